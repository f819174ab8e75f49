//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::PathBuf;

use cogntke::checkpoint::Checkpoint;
use cogntke::config::Ablation;
use cogntke::digraph::{DigraphConfig, LayeredEdge, QueryContext, TcrDigraph};
use cogntke::params::{ModelDims, ModelParams};
use cogntke::reasoner::Encoder;
use cogntke::store::{augment_relations, load_dataset, Quadruple, TkgDataset, Vocab};
use cogntke::synth::SynthConfig;
use cogntke::temporal::TimeEncodingTable;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random augmented TKG with every fact in the training split.
pub fn random_tkg(rng: &mut impl Rng, max_entities: u32, max_relations: u32, max_snapshots: u32) -> TkgDataset {
    let ne = rng.random_range(2..=max_entities);
    let nr = rng.random_range(1..=max_relations);
    let nt = rng.random_range(1..=max_snapshots);
    let n_facts = rng.random_range(1..=(ne * nt).min(200));
    let facts: Vec<Quadruple> = (0..n_facts)
        .map(|_| {
            Quadruple::new(
                rng.random_range(0..ne),
                rng.random_range(0..nr),
                rng.random_range(0..ne),
                rng.random_range(0..nt),
            )
        })
        .collect();
    let ds = TkgDataset::from_parts(
        Vocab::anonymous(ne as usize),
        Vocab::anonymous(nr as usize),
        facts,
        vec![],
        vec![],
        1,
    )
    .unwrap();
    augment_relations(ds).unwrap()
}

/// Layered expansion computed directly from the raw fact list.
pub fn oracle_layers(ds: &TkgDataset, source: u32, t_q: u32, cfg: &DigraphConfig) -> Vec<Vec<LayeredEdge>> {
    let nr = ds.num_base_relations() as u32;
    let identity = 2 * nr;
    let mut frontier = vec![source];
    let mut out = Vec::new();
    for layer in 1..=cfg.layers as u32 {
        let lo = if layer == 1 && cfg.global_first_layer {
            0
        } else {
            t_q.saturating_sub(cfg.window)
        };
        let hi = t_q - 1;
        let mut edges = Vec::new();
        for &src in &frontier {
            let mut hist: Vec<LayeredEdge> = Vec::new();
            for q in ds.all_facts() {
                if q.time < lo || q.time > hi {
                    continue;
                }
                if q.subject == src {
                    hist.push(LayeredEdge { layer, src, relation: q.relation, time: q.time, dst: q.object });
                }
                if q.object == src {
                    hist.push(LayeredEdge { layer, src, relation: q.relation + nr, time: q.time, dst: q.subject });
                }
            }
            if let Some(cap) = cfg.cap {
                hist.sort_by(|a, b| b.time.cmp(&a.time).then(a.relation.cmp(&b.relation)).then(a.dst.cmp(&b.dst)));
                hist.truncate(cap);
            }
            edges.extend(hist);
            edges.push(LayeredEdge { layer, src, relation: identity, time: t_q - 1, dst: src });
        }
        let mut next: Vec<u32> = edges.iter().map(|e| e.dst).collect();
        next.sort_unstable();
        next.dedup();
        frontier = next;
        out.push(edges);
    }
    out
}

/// Compares a built digraph with the oracle as per-layer multisets.
pub fn digraph_matches_oracle(g: &TcrDigraph, oracle: &[Vec<LayeredEdge>]) -> bool {
    if g.layers.len() != oracle.len() {
        return false;
    }
    g.layers.iter().zip(oracle).all(|(a, b)| {
        let mut a = a.clone();
        let mut b = b.clone();
        a.sort();
        b.sort();
        a == b
    })
}

/// Rank by sorting: gold takes the rounded-up mean of the positions its score occupies.
pub fn oracle_rank(scores: &[f64], gold: usize, competing: &[usize]) -> usize {
    let mut kept: Vec<(f64, usize)> = scores
        .iter()
        .copied()
        .enumerate()
        .filter(|(i, _)| *i == gold || !competing.contains(i))
        .map(|(i, s)| (s, i))
        .collect();
    kept.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let g = scores[gold];
    let first = kept.iter().position(|(s, _)| *s == g).unwrap() + 1;
    let last = kept.iter().rposition(|(s, _)| *s == g).unwrap() + 1;
    (first + last).div_ceil(2)
}

/// Cross-entropy of a softmax computed with plain exponentials.
pub fn oracle_loss(scores: &[f64], gold: usize) -> f64 {
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    -(scores[gold].exp() / z).ln()
}

/// Worst per-tensor relative error between analytic and central-difference gradients.
pub struct GradCheck {
    pub worst: f64,
    pub worst_tensor: String,
    pub tensors: usize,
    pub scalars: usize,
}

pub fn gradient_check(
    params: &ModelParams,
    time: &TimeEncodingTable,
    ablation: Ablation,
    g: &TcrDigraph,
    q: &QueryContext,
    gold: u32,
    num_entities: usize,
    step: f64,
) -> GradCheck {
    let analytic = Encoder::new(params, time, ablation)
        .loss_and_grad(g, q, gold, num_entities)
        .unwrap()
        .grads;
    let names: Vec<String> = analytic.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|(_, v)| v.to_vec()).collect();
    let mut p = params.clone();
    let mut worst = 0.0f64;
    let mut worst_tensor = String::new();
    let mut scalars = 0;
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let mut numeric = vec![0.0; len];
        for i in 0..len {
            let orig = p.tensors_mut()[ti].1[i];
            p.tensors_mut()[ti].1[i] = orig + step;
            let up = Encoder::new(&p, time, ablation).loss(g, q, gold, num_entities).unwrap();
            p.tensors_mut()[ti].1[i] = orig - step;
            let down = Encoder::new(&p, time, ablation).loss(g, q, gold, num_entities).unwrap();
            p.tensors_mut()[ti].1[i] = orig;
            numeric[i] = (up - down) / (2.0 * step);
            scalars += 1;
        }
        let diff: f64 = analytic[ti].iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic[ti].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let rel = if na.max(nn) < 1e-12 { diff } else { diff / na.max(nn) };
        if rel > worst {
            worst = rel;
            worst_tensor = name.clone();
        }
    }
    GradCheck {
        worst,
        worst_tensor,
        tensors: names.len(),
        scalars,
    }
}

/// Small hand-shaped graph with fan-in, inverse edges, identity carries and absent entities.
pub fn toy_dataset() -> TkgDataset {
    let facts = vec![
        Quadruple::new(0, 0, 1, 0),
        Quadruple::new(0, 1, 2, 1),
        Quadruple::new(3, 0, 0, 2),
        Quadruple::new(1, 2, 2, 3),
        Quadruple::new(2, 1, 4, 4),
        Quadruple::new(1, 0, 4, 5),
        Quadruple::new(3, 2, 1, 5),
        Quadruple::new(4, 1, 5, 6),
        Quadruple::new(0, 2, 5, 6),
    ];
    augment_relations(
        TkgDataset::from_parts(Vocab::anonymous(8), Vocab::anonymous(3), facts, vec![], vec![], 1).unwrap(),
    )
    .unwrap()
}

pub fn toy_params(ds: &TkgDataset, layers: usize, seed: u64) -> ModelParams {
    let dims = ModelDims {
        embed_dim: 5,
        time_dim: 4,
        num_relations: ds.scheme().num_augmented(),
        layers,
    };
    let mut p = ModelParams::init(dims, seed);
    // non-zero biases and relation rows everywhere so no gradient is trivially zero
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

/// Looks for a real dataset under `COGNTKE_DATA_DIR` by any of `names`.
pub fn find_real_dataset(names: &[&str]) -> Option<PathBuf> {
    let root = PathBuf::from(std::env::var_os("COGNTKE_DATA_DIR")?);
    names
        .iter()
        .map(|n| root.join(n))
        .find(|p| p.join("train.txt").is_file())
}

pub fn load_real(path: &PathBuf) -> TkgDataset {
    load_dataset(path).unwrap()
}

/// Seeded synthetic stand-in for the first 100 snapshots of a daily event graph.
pub fn smoke_substitute_config() -> SynthConfig {
    SynthConfig {
        entities: 300,
        relations: 10,
        snapshots: 100,
        periodic: 400,
        min_period: 18,
        max_period: 36,
        chains_per_snapshot: 2,
        rules: 2,
        noise_per_snapshot: 2,
        granularity: 24,
        named: true,
        seed: 7,
    }
}

pub fn checkpoint_for(ds: &TkgDataset, cfg: &cogntke::TrainConfig, params: ModelParams) -> Checkpoint {
    Checkpoint::new(ds, cfg, params, 0)
}
