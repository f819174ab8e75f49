//! Layered query-rooted digraphs over the fact store.
//!
//! Layer 1 holds the one-hop history of the query entity over the whole past
//! `[0, t_q-1]`. Layers `2..=L` expand every entity of the previous layer over
//! the local window `[t_q-m, t_q-1]`. Each layer transition also carries every
//! entity forward through one identity edge stamped `t_q-1`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{EntityId, RelationId, Snapshot, TkgDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryContext {
    pub entity: EntityId,
    /// Relation in the augmented id space.
    pub relation: RelationId,
    pub time: Snapshot,
}

impl QueryContext {
    pub fn new(entity: EntityId, relation: RelationId, time: Snapshot) -> Result<Self> {
        if time == 0 {
            return Err(Error::OutOfRange {
                what: "query time (needs at least one prior snapshot)",
                value: 0,
                limit: 1,
            });
        }
        Ok(Self {
            entity,
            relation,
            time,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayeredEdge {
    /// 1-based layer index.
    pub layer: u32,
    pub src: EntityId,
    #[serde(rename = "rel")]
    pub relation: RelationId,
    pub time: Snapshot,
    pub dst: EntityId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigraphConfig {
    /// Total layer count; layer 1 is the global layer.
    pub layers: usize,
    /// Local window length `m`.
    pub window: u32,
    /// Max non-identity edges per source entity per layer.
    pub cap: Option<usize>,
    /// When false, layer 1 also uses the local window (no global retrieval).
    pub global_first_layer: bool,
}

impl Default for DigraphConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            window: 15,
            cap: Some(200),
            global_first_layer: true,
        }
    }
}

impl DigraphConfig {
    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    /// Inclusive snapshot window used to expand layer `layer` (1-based).
    pub fn window_for(&self, layer: usize, query_time: Snapshot) -> (Snapshot, Snapshot) {
        let hi = query_time - 1;
        if layer == 1 && self.global_first_layer {
            (0, hi)
        } else {
            (query_time.saturating_sub(self.window), hi)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TcrDigraph {
    pub source: EntityId,
    pub query_time: Snapshot,
    /// `layers[l-1]` holds the edges of layer `l`.
    pub layers: Vec<Vec<LayeredEdge>>,
    /// `entity_sets[0] = {source}`; `entity_sets[l]` are the sorted distinct
    /// destinations of layer `l`.
    pub entity_sets: Vec<Vec<EntityId>>,
}

impl TcrDigraph {
    /// Builds the digraph for `q`. Only `q.entity` and `q.time` matter.
    pub fn build(ds: &TkgDataset, q: &QueryContext, cfg: &DigraphConfig) -> Result<Self> {
        if cfg.layers == 0 || cfg.window == 0 {
            return Err(Error::Config("digraph needs layers >= 1 and window >= 1".into()));
        }
        if q.time == 0 {
            return Err(Error::OutOfRange {
                what: "query time",
                value: 0,
                limit: 1,
            });
        }
        let identity = ds.scheme().identity();
        let carry_time = q.time - 1;
        let mut entity_sets = vec![vec![q.entity]];
        let mut layers = Vec::with_capacity(cfg.layers);
        for layer in 1..=cfg.layers {
            let (lo, hi) = cfg.window_for(layer, q.time);
            let prev = entity_sets.last().unwrap();
            let mut edges = Vec::new();
            for &src in prev {
                let neighbors = ds.index().neighbors(src, lo, hi);
                let take = cfg.cap.map_or(neighbors.len(), |c| c.min(neighbors.len()));
                edges.extend(neighbors[..take].iter().map(|n| LayeredEdge {
                    layer: layer as u32,
                    src,
                    relation: n.relation,
                    time: n.time,
                    dst: n.object,
                }));
                edges.push(LayeredEdge {
                    layer: layer as u32,
                    src,
                    relation: identity,
                    time: carry_time,
                    dst: src,
                });
            }
            let mut next: Vec<EntityId> = edges.iter().map(|e| e.dst).collect();
            next.sort_unstable();
            next.dedup();
            layers.push(edges);
            entity_sets.push(next);
        }
        Ok(Self {
            source: q.entity,
            query_time: q.time,
            layers,
            entity_sets,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_edges(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = &LayeredEdge> {
        self.layers.iter().flatten()
    }

    pub fn final_entities(&self) -> &[EntityId] {
        self.entity_sets.last().map_or(&[], Vec::as_slice)
    }

    pub fn contains_final(&self, e: EntityId) -> bool {
        self.final_entities().binary_search(&e).is_ok()
    }

    /// All source → `target` paths with one edge per layer.
    pub fn enumerate_paths(&self, target: EntityId) -> Vec<Vec<LayeredEdge>> {
        self.enumerate_paths_limited(target, usize::MAX)
    }

    /// Like [`Self::enumerate_paths`] but stops after `limit` paths.
    pub fn enumerate_paths_limited(&self, target: EntityId, limit: usize) -> Vec<Vec<LayeredEdge>> {
        let mut out = Vec::new();
        if self.layers.is_empty() || !self.contains_final(target) {
            return out;
        }
        let by_dst: Vec<HashMap<EntityId, Vec<&LayeredEdge>>> = self
            .layers
            .iter()
            .map(|edges| {
                let mut m: HashMap<EntityId, Vec<&LayeredEdge>> = HashMap::new();
                for e in edges {
                    m.entry(e.dst).or_default().push(e);
                }
                m
            })
            .collect();
        let mut stack = Vec::with_capacity(self.layers.len());
        walk_back(
            &by_dst,
            self.source,
            self.layers.len(),
            target,
            &mut stack,
            &mut out,
            limit,
        );
        out
    }

    /// JSON dump `{query, layers: [[{src, rel, time, dst}]]}`.
    pub fn to_json(&self, q: &QueryContext) -> serde_json::Value {
        let layers: Vec<Vec<serde_json::Value>> = self
            .layers
            .iter()
            .map(|edges| {
                edges
                    .iter()
                    .map(|e| {
                        serde_json::json!({
                            "src": e.src, "rel": e.relation, "time": e.time, "dst": e.dst
                        })
                    })
                    .collect()
            })
            .collect();
        serde_json::json!({ "query": q, "layers": layers })
    }
}

fn walk_back<'a>(
    by_dst: &[HashMap<EntityId, Vec<&'a LayeredEdge>>],
    source: EntityId,
    layer: usize,
    node: EntityId,
    stack: &mut Vec<&'a LayeredEdge>,
    out: &mut Vec<Vec<LayeredEdge>>,
    limit: usize,
) {
    if out.len() >= limit {
        return;
    }
    if layer == 0 {
        if node == source {
            out.push(stack.iter().rev().map(|e| **e).collect());
        }
        return;
    }
    let Some(incoming) = by_dst[layer - 1].get(&node) else {
        return;
    };
    for e in incoming {
        stack.push(e);
        walk_back(by_dst, source, layer - 1, e.src, stack, out, limit);
        stack.pop();
        if out.len() >= limit {
            return;
        }
    }
}
