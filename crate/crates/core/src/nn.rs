//! Small numeric helpers shared by the encoder layers.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

/// Negative slope of every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Uniform in `[-bound, bound]`.
pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

pub fn uniform_vec<R: Rng>(len: usize, bound: f64, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.random_range(-bound..=bound))
}

/// Glorot/Xavier uniform initialisation for a `rows x cols` map.
pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rows, cols, bound, rng)
}

/// Numerically stable `log(sum(exp(x)) + extra_zeros * exp(0))`.
pub fn log_sum_exp_with_zeros(x: ArrayView1<f64>, extra_zeros: usize) -> f64 {
    let mut max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if extra_zeros > 0 {
        max = max.max(0.0);
    }
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = x.iter().map(|v| (v - max).exp()).sum::<f64>() + extra_zeros as f64 * (-max).exp();
    max + sum.ln()
}
