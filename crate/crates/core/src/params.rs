//! Learnable parameters.
//!
//! No parameter is indexed by entity: entity states start at zero for every
//! query, which is what lets a trained model run on an unseen entity set.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{glorot, uniform, uniform_vec};

/// Two-layer FFN fusing a relation embedding with a relative-time vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TrComponentParams {
    /// `d x (d + d_time)`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `d x d`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Attention, message, aggregation and update weights of one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w_src: Array2<f64>,
    pub w_rel: Array2<f64>,
    pub w_query: Array2<f64>,
    /// Attention output vector (`1 x d`).
    pub w_att: Array1<f64>,
    /// Aggregation map.
    pub w_agg: Array2<f64>,
    /// Message-cell update gate over `[h_src, h_rt, h_q]` (`d x 3d`).
    pub w_update: Array2<f64>,
    pub b_update: Array1<f64>,
    /// Message-cell forget gate (`d x 3d`).
    pub w_forget: Array2<f64>,
    pub b_forget: Array1<f64>,
    pub w_cand: Array2<f64>,
    pub b_cand: Array1<f64>,
    /// State-update GRU, gate order (reset, update, new): `3d x d`.
    pub gru_w_ih: Array2<f64>,
    pub gru_w_hh: Array2<f64>,
    pub gru_b_ih: Array1<f64>,
    pub gru_b_hh: Array1<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub time_dim: usize,
    /// Augmented relation count (`2|R| + 1`).
    pub num_relations: usize,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// One row per augmented relation.
    pub relation_emb: Array2<f64>,
    pub tr: TrComponentParams,
    pub layers: Vec<LayerParams>,
    /// Decoder `1 x d`.
    pub w_out: Array1<f64>,
}

impl TrComponentParams {
    fn init(d: usize, dt: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: glorot(d, d + dt, rng),
            b1: Array1::zeros(d),
            w2: glorot(d, d, rng),
            b2: Array1::zeros(d),
        }
    }
}

impl LayerParams {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let gru_bound = 1.0 / (d as f64).sqrt();
        Self {
            w_src: glorot(d, d, rng),
            w_rel: glorot(d, d, rng),
            w_query: glorot(d, d, rng),
            w_att: glorot(1, d, rng).into_shape_with_order(d).unwrap(),
            w_agg: glorot(d, d, rng),
            w_update: glorot(d, 3 * d, rng),
            b_update: Array1::zeros(d),
            w_forget: glorot(d, 3 * d, rng),
            b_forget: Array1::zeros(d),
            w_cand: glorot(d, d, rng),
            b_cand: Array1::zeros(d),
            gru_w_ih: uniform(3 * d, d, gru_bound, rng),
            gru_w_hh: uniform(3 * d, d, gru_bound, rng),
            gru_b_ih: uniform_vec(3 * d, gru_bound, rng),
            gru_b_hh: uniform_vec(3 * d, gru_bound, rng),
        }
    }

    fn tensors(&self) -> [(&'static str, &[f64]); 15] {
        [
            ("w_src", self.w_src.as_slice().unwrap()),
            ("w_rel", self.w_rel.as_slice().unwrap()),
            ("w_query", self.w_query.as_slice().unwrap()),
            ("w_att", self.w_att.as_slice().unwrap()),
            ("w_agg", self.w_agg.as_slice().unwrap()),
            ("w_update", self.w_update.as_slice().unwrap()),
            ("b_update", self.b_update.as_slice().unwrap()),
            ("w_forget", self.w_forget.as_slice().unwrap()),
            ("b_forget", self.b_forget.as_slice().unwrap()),
            ("w_cand", self.w_cand.as_slice().unwrap()),
            ("b_cand", self.b_cand.as_slice().unwrap()),
            ("gru_w_ih", self.gru_w_ih.as_slice().unwrap()),
            ("gru_w_hh", self.gru_w_hh.as_slice().unwrap()),
            ("gru_b_ih", self.gru_b_ih.as_slice().unwrap()),
            ("gru_b_hh", self.gru_b_hh.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 15] {
        [
            ("w_src", self.w_src.as_slice_mut().unwrap()),
            ("w_rel", self.w_rel.as_slice_mut().unwrap()),
            ("w_query", self.w_query.as_slice_mut().unwrap()),
            ("w_att", self.w_att.as_slice_mut().unwrap()),
            ("w_agg", self.w_agg.as_slice_mut().unwrap()),
            ("w_update", self.w_update.as_slice_mut().unwrap()),
            ("b_update", self.b_update.as_slice_mut().unwrap()),
            ("w_forget", self.w_forget.as_slice_mut().unwrap()),
            ("b_forget", self.b_forget.as_slice_mut().unwrap()),
            ("w_cand", self.w_cand.as_slice_mut().unwrap()),
            ("b_cand", self.b_cand.as_slice_mut().unwrap()),
            ("gru_w_ih", self.gru_w_ih.as_slice_mut().unwrap()),
            ("gru_w_hh", self.gru_w_hh.as_slice_mut().unwrap()),
            ("gru_b_ih", self.gru_b_ih.as_slice_mut().unwrap()),
            ("gru_b_hh", self.gru_b_hh.as_slice_mut().unwrap()),
        ]
    }
}

impl ModelParams {
    /// Seeded initialisation. Relation rows are Glorot-uniform.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.embed_dim;
        let relation_emb = glorot(dims.num_relations, d, &mut rng);
        let tr = TrComponentParams::init(d, dims.time_dim, &mut rng);
        let layers = (0..dims.layers).map(|_| LayerParams::init(d, &mut rng)).collect();
        let w_out = glorot(1, d, &mut rng).into_shape_with_order(d).unwrap();
        Self {
            dims,
            relation_emb,
            tr,
            layers,
            w_out,
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, v: f64) {
        for (_, t) in self.tensors_mut() {
            t.fill(v);
        }
    }

    /// Named flat views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = vec![
            ("relation_emb".to_string(), self.relation_emb.as_slice().unwrap()),
            ("tr.w1".to_string(), self.tr.w1.as_slice().unwrap()),
            ("tr.b1".to_string(), self.tr.b1.as_slice().unwrap()),
            ("tr.w2".to_string(), self.tr.w2.as_slice().unwrap()),
            ("tr.b2".to_string(), self.tr.b2.as_slice().unwrap()),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.tensors().into_iter().map(|(n, t)| (format!("layer{i}.{n}"), t)));
        }
        out.push(("w_out".to_string(), self.w_out.as_slice().unwrap()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = vec![
            ("relation_emb".to_string(), self.relation_emb.as_slice_mut().unwrap()),
            ("tr.w1".to_string(), self.tr.w1.as_slice_mut().unwrap()),
            ("tr.b1".to_string(), self.tr.b1.as_slice_mut().unwrap()),
            ("tr.w2".to_string(), self.tr.w2.as_slice_mut().unwrap()),
            ("tr.b2".to_string(), self.tr.b2.as_slice_mut().unwrap()),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("layer{i}.{n}"), t)),
            );
        }
        out.push(("w_out".to_string(), self.w_out.as_slice_mut().unwrap()));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += scale * b;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            embed_dim: 4,
            time_dim: 2,
            num_relations: 5,
            layers: 2,
        }
    }

    #[test]
    fn shapes() {
        let p = ModelParams::init(dims(), 1);
        assert_eq!(p.relation_emb.dim(), (5, 4));
        assert_eq!(p.tr.w1.dim(), (4, 6));
        assert_eq!(p.layers.len(), 2);
        assert_eq!(p.layers[0].w_update.dim(), (4, 12));
        assert_eq!(p.layers[1].gru_w_ih.dim(), (12, 4));
        assert_eq!(p.tensors().len(), 5 + 2 * 15 + 1);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        assert_eq!(ModelParams::init(dims(), 7), ModelParams::init(dims(), 7));
        assert_ne!(ModelParams::init(dims(), 7), ModelParams::init(dims(), 8));
    }

    #[test]
    fn add_scaled_and_norm() {
        let p = ModelParams::init(dims(), 3);
        let mut z = p.zeros_like();
        assert_eq!(z.global_norm(), 0.0);
        z.add_scaled(&p, 2.0);
        assert!((z.global_norm() - 2.0 * p.global_norm()).abs() < 1e-12);
    }
}
