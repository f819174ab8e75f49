//! Linear decoder and multi-class log-loss.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::reasoner::StateMap;

/// `score(e) = w_out . h_e` for entities in `states`, exactly 0 elsewhere.
pub fn score_entities(states: &StateMap, w_out: &Array1<f64>, num_entities: usize) -> Array1<f64> {
    let mut scores = Array1::zeros(num_entities);
    if states.is_empty() {
        return scores;
    }
    let present = states.states.dot(w_out);
    for (&e, s) in states.entities.iter().zip(present.iter()) {
        if (e as usize) < num_entities {
            scores[e as usize] = *s;
        }
    }
    scores
}

/// `-score[gold] + log sum_o exp(score[o])` over every entity.
pub fn loss(scores: ArrayView1<f64>, gold: u32) -> Result<f64> {
    let g = gold as usize;
    if g >= scores.len() {
        return Err(Error::OutOfRange {
            what: "gold entity",
            value: g,
            limit: scores.len(),
        });
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok(max + sum.ln() - scores[g])
}
