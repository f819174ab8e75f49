//! Attention-pruned evidence paths for a single prediction.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::digraph::{DigraphConfig, LayeredEdge, QueryContext, TcrDigraph};
use crate::error::{Error, Result};
use crate::reasoner::Encoder;
use crate::scorer::score_entities;
use crate::store::{EntityId, TkgDataset};
use crate::train::time_table_for;

pub const DEFAULT_THRESHOLD: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedEdge {
    #[serde(flatten)]
    pub edge: LayeredEdge,
    pub weight: f64,
}

/// A source-to-target path with one edge per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidencePath {
    pub edges: Vec<WeightedEdge>,
    /// Product of the edge weights.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub query: QueryContext,
    pub target: EntityId,
    pub threshold: f64,
    /// Surviving edges, layer order; every weight is `>= threshold`.
    pub edges: Vec<WeightedEdge>,
    /// Paths on the pruned digraph, highest score first.
    pub paths: Vec<EvidencePath>,
}

/// Prunes edges whose attention is below `threshold` and enumerates paths to `target`.
pub fn extract(
    g: &TcrDigraph,
    q: &QueryContext,
    attention: &[Vec<f64>],
    threshold: f64,
    target: EntityId,
) -> Result<Explanation> {
    extract_limited(g, q, attention, threshold, target, usize::MAX)
}

/// Like [`extract`] but keeps at most `max_paths` paths.
pub fn extract_limited(
    g: &TcrDigraph,
    q: &QueryContext,
    attention: &[Vec<f64>],
    threshold: f64,
    target: EntityId,
    max_paths: usize,
) -> Result<Explanation> {
    if !(0.0..=f64::INFINITY).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} must be non-negative")));
    }
    if !g.contains_final(target) {
        return Err(Error::TargetAbsent(target));
    }
    if attention.len() != g.layers.len() || attention.iter().zip(&g.layers).any(|(a, l)| a.len() != l.len()) {
        return Err(Error::Shape("attention does not match the digraph's edges".into()));
    }
    let mut kept: Vec<Vec<(LayeredEdge, f64)>> = Vec::with_capacity(g.layers.len());
    for (edges, weights) in g.layers.iter().zip(attention) {
        kept.push(
            edges
                .iter()
                .zip(weights)
                .filter(|(_, &w)| w >= threshold)
                .map(|(e, &w)| (*e, w))
                .collect(),
        );
    }
    let pruned = TcrDigraph {
        source: g.source,
        query_time: g.query_time,
        layers: kept.iter().map(|l| l.iter().map(|(e, _)| *e).collect()).collect(),
        entity_sets: g.entity_sets.clone(),
    };
    let weight_of = |e: &LayeredEdge| {
        let layer = &kept[e.layer as usize - 1];
        layer.iter().find(|(k, _)| k == e).map_or(0.0, |(_, w)| *w)
    };
    let mut paths: Vec<EvidencePath> = pruned
        .enumerate_paths_limited(target, max_paths)
        .into_iter()
        .map(|p| {
            let edges: Vec<WeightedEdge> = p
                .into_iter()
                .map(|edge| WeightedEdge {
                    edge,
                    weight: weight_of(&edge),
                })
                .collect();
            let score = edges.iter().map(|e| e.weight).product();
            EvidencePath { edges, score }
        })
        .collect();
    paths.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(Explanation {
        query: *q,
        target,
        threshold,
        edges: kept
            .into_iter()
            .flatten()
            .map(|(edge, weight)| WeightedEdge { edge, weight })
            .collect(),
        paths,
    })
}

/// Encodes `q` with the checkpoint and explains `target`, or the top-scoring
/// reachable entity when `target` is `None`.
pub fn explain(
    ckpt: &Checkpoint,
    ds: &TkgDataset,
    q: &QueryContext,
    target: Option<EntityId>,
    threshold: f64,
    max_paths: usize,
) -> Result<Explanation> {
    let cfg: &TrainConfig = &ckpt.meta.config;
    let time = time_table_for(ds, ckpt.params.dims.time_dim);
    let enc = Encoder::new(&ckpt.params, &time, cfg.ablation);
    let g = TcrDigraph::build(ds, q, &cfg.digraph_config())?;
    let encoding = enc.encode(&g, q)?;
    let target = match target {
        Some(t) => t,
        None => {
            let scores = score_entities(&encoding.states, &ckpt.params.w_out, ds.num_entities());
            *g.final_entities()
                .iter()
                .max_by(|a, b| scores[**a as usize].total_cmp(&scores[**b as usize]).then(b.cmp(a)))
                .ok_or(Error::EmptyNeighborhood)?
        }
    };
    extract_limited(&g, q, &encoding.attention, threshold, target, max_paths)
}

/// True when every edge is a stored (possibly inverse) fact inside its layer's
/// window, or an identity self-loop stamped `t_q - 1`.
pub fn verify_path(ds: &TkgDataset, cfg: &DigraphConfig, query_time: u32, path: &[LayeredEdge]) -> bool {
    let scheme = ds.scheme();
    path.iter().all(|e| {
        let (lo, hi) = cfg.window_for(e.layer as usize, query_time);
        if scheme.is_identity(e.relation) {
            return e.src == e.dst && e.time + 1 == query_time;
        }
        e.time >= lo
            && e.time <= hi
            && ds
                .index()
                .neighbors(e.src, e.time, e.time)
                .iter()
                .any(|n| n.relation == e.relation && n.object == e.dst)
    })
}

impl Explanation {
    /// JSON export; names are added when the dataset has vocabulary files.
    pub fn to_json(&self, ds: &TkgDataset) -> serde_json::Value {
        let ent = ds.entities().has_names();
        let rel = ds.relations().has_names();
        let edge = |w: &WeightedEdge| {
            let e = &w.edge;
            let mut v = json!({
                "layer": e.layer, "src": e.src, "rel": e.relation,
                "time": e.time, "dst": e.dst, "weight": w.weight,
            });
            if ent {
                v["src_name"] = json!(ds.entity_name(e.src));
                v["dst_name"] = json!(ds.entity_name(e.dst));
            }
            if rel {
                v["rel_name"] = json!(ds.relation_name(e.relation));
            }
            v
        };
        let mut query = json!(self.query);
        if ent {
            query["entity_name"] = json!(ds.entity_name(self.query.entity));
        }
        if rel {
            query["relation_name"] = json!(ds.relation_name(self.query.relation));
        }
        json!({
            "query": query,
            "target": self.target,
            "target_name": ds.entity_name(self.target),
            "threshold": self.threshold,
            "edges": self.edges.iter().map(edge).collect::<Vec<_>>(),
            "paths": self.paths.iter().map(|p| json!({
                "score": p.score,
                "edges": p.edges.iter().map(edge).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }

    /// Graphviz DOT description of the surviving edges.
    pub fn to_dot(&self, ds: &TkgDataset) -> String {
        let node = |layer: u32, e: EntityId| format!("\"L{layer}:{e}\"");
        let mut out = String::from("digraph evidence {\n  rankdir=LR;\n");
        let mut nodes: Vec<(u32, EntityId)> = vec![(0, self.query.entity)];
        for w in &self.edges {
            nodes.push((w.edge.layer - 1, w.edge.src));
            nodes.push((w.edge.layer, w.edge.dst));
        }
        nodes.sort_unstable();
        nodes.dedup();
        for (layer, e) in nodes {
            let shape = if layer == 0 && e == self.query.entity {
                ", shape=box"
            } else if e == self.target && layer as usize == self.paths.first().map_or(0, |p| p.edges.len()) {
                ", shape=doublecircle"
            } else {
                ""
            };
            let _ = writeln!(
                out,
                "  {} [label=\"{}\"{}];",
                node(layer, e),
                escape(&ds.entity_name(e)),
                shape
            );
        }
        for w in &self.edges {
            let e = &w.edge;
            let _ = writeln!(
                out,
                "  {} -> {} [label=\"{}@{} ({:.3})\"];",
                node(e.layer - 1, e.src),
                node(e.layer, e.dst),
                escape(&ds.relation_name(e.relation)),
                e.time,
                w.weight
            );
        }
        out.push_str("}\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}
