//! Temporal knowledge graph extrapolation with layered temporal-relation
//! digraphs: a global one-hop history layer followed by windowed multi-hop
//! layers, encoded by a query-conditioned gated message passing network.

pub mod checkpoint;
pub mod config;
pub mod digraph;
pub mod error;
pub mod evaluate;
pub mod explain;
pub mod nn;
pub mod params;
pub mod reasoner;
pub mod scorer;
pub mod store;
pub mod synth;
pub mod temporal;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Ablation, RunConfig, TrainConfig};
pub use digraph::{DigraphConfig, LayeredEdge, QueryContext, TcrDigraph};
pub use error::{Error, Result};
pub use evaluate::{evaluate, evaluate_zero_shot, filtered_rank, zero_shot_remap, MetricsReport};
pub use explain::{explain, extract, Explanation};
pub use params::{ModelDims, ModelParams};
pub use reasoner::{Encoder, Encoding, StateMap};
pub use store::{augment_relations, load_dataset, EntityId, Quadruple, RelationId, Snapshot, Split, TkgDataset, Vocab};
pub use train::{train, LabeledQuery, TrainOptions, TrainOutcome, Trainer};
