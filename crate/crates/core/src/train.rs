//! Training driver: query generation, batching, Adam, clipping, checkpoints.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::digraph::{QueryContext, TcrDigraph};
use crate::error::{Error, Result};
use crate::params::{ModelDims, ModelParams};
use crate::reasoner::Encoder;
use crate::store::{EntityId, EntityId as Gold, Split, TkgDataset};
use crate::temporal::TimeEncodingTable;

/// A query with its gold answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub query: QueryContext,
    pub gold: Gold,
}

/// Object-prediction queries for both directions of every quadruple in `split`.
///
/// `(s, r, o, t)` yields `(s, r, ?, t) -> o` and `(o, r + |R|, ?, t) -> s`.
/// Quadruples at snapshot 0 have no history and are skipped.
pub fn labeled_queries(ds: &TkgDataset, split: Split) -> Result<Vec<LabeledQuery>> {
    if !ds.is_augmented() {
        return Err(Error::Config("dataset must be augmented before building queries".into()));
    }
    let scheme = ds.scheme();
    let mut out = Vec::with_capacity(ds.split(split).len() * 2);
    for q in ds.split(split).iter().filter(|q| q.time > 0) {
        out.push(LabeledQuery {
            query: QueryContext::new(q.subject, q.relation, q.time)?,
            gold: q.object,
        });
        out.push(LabeledQuery {
            query: QueryContext::new(q.object, scheme.inverse(q.relation), q.time)?,
            gold: q.subject,
        });
    }
    Ok(out)
}

/// Time table long enough for every relative offset in `ds`.
pub fn time_table_for(ds: &TkgDataset, time_dim: usize) -> TimeEncodingTable {
    TimeEncodingTable::new(ds.num_snapshots() + 1, time_dim)
}

pub fn model_dims(ds: &TkgDataset, cfg: &TrainConfig) -> ModelDims {
    ModelDims {
        embed_dim: cfg.embed_dim,
        time_dim: cfg.time_dim,
        num_relations: ds.scheme().num_augmented(),
        layers: cfg.effective_layers(),
    }
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = self.lr;
        let eps = self.eps;
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()))
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub queries: usize,
    pub seconds: f64,
}

/// Owns the parameters and optimiser state for one training run.
pub struct Trainer<'a> {
    ds: &'a TkgDataset,
    cfg: TrainConfig,
    params: ModelParams,
    adam: Adam,
    time: TimeEncodingTable,
    queries: Vec<LabeledQuery>,
    epochs_done: usize,
}

/// Queries evaluated in parallel before their gradients are summed in order.
const GRAD_CHUNK: usize = 16;

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a TkgDataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(model_dims(ds, cfg), cfg.seed);
        Self::with_params(ds, cfg, params)
    }

    pub fn with_params(ds: &'a TkgDataset, cfg: &TrainConfig, params: ModelParams) -> Result<Self> {
        cfg.validate()?;
        if params.dims != model_dims(ds, cfg) {
            return Err(Error::Shape(format!(
                "parameters {:?} do not match dataset/config {:?}",
                params.dims,
                model_dims(ds, cfg)
            )));
        }
        let mut queries = labeled_queries(ds, Split::Train)?;
        queries.sort_by_key(|q| (q.query.time, q.query.entity, q.query.relation, q.gold));
        Ok(Self {
            ds,
            cfg: cfg.clone(),
            adam: Adam::new(&params, cfg.learning_rate),
            params,
            time: time_table_for(ds, cfg.time_dim),
            queries,
            epochs_done: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn queries(&self) -> &[LabeledQuery] {
        &self.queries
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    fn encoder(&self) -> Encoder<'_> {
        Encoder::new(&self.params, &self.time, self.cfg.ablation)
    }

    fn digraphs(&self, batch: &[LabeledQuery]) -> Result<HashMap<(EntityId, u32), TcrDigraph>> {
        let mut keys: Vec<(EntityId, u32)> = batch.iter().map(|q| (q.query.entity, q.query.time)).collect();
        keys.sort_unstable();
        keys.dedup();
        let gcfg = self.cfg.digraph_config();
        let built = keys
            .par_iter()
            .map(|&(e, t)| {
                let q = QueryContext { entity: e, relation: 0, time: t };
                TcrDigraph::build(self.ds, &q, &gcfg).map(|g| ((e, t), g))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(built.into_iter().collect())
    }

    /// Mean loss and summed gradient over `batch`, accumulated in query order.
    pub fn batch_gradient(&self, batch: &[LabeledQuery]) -> Result<(f64, ModelParams)> {
        let graphs = self.digraphs(batch)?;
        let enc = self.encoder();
        let n = self.ds.num_entities();
        let mut total = self.params.zeros_like();
        let mut loss_sum = 0.0;
        for chunk in batch.chunks(GRAD_CHUNK) {
            let results = chunk
                .par_iter()
                .map(|lq| {
                    let g = &graphs[&(lq.query.entity, lq.query.time)];
                    enc.loss_and_grad(g, &lq.query, lq.gold, n)
                })
                .collect::<Result<Vec<_>>>()?;
            for r in results {
                loss_sum += r.loss;
                total.add_scaled(&r.grads, 1.0);
            }
        }
        let scale = 1.0 / batch.len() as f64;
        let mut mean = total.zeros_like();
        mean.add_scaled(&total, scale);
        Ok((loss_sum * scale, mean))
    }

    /// Mean loss of the current parameters over the training queries, no update.
    pub fn mean_loss(&self) -> Result<f64> {
        let enc = self.encoder();
        let n = self.ds.num_entities();
        let mut sum = 0.0;
        for batch in self.queries.chunks(self.cfg.batch_size) {
            let graphs = self.digraphs(batch)?;
            let losses = batch
                .par_iter()
                .map(|lq| enc.loss(&graphs[&(lq.query.entity, lq.query.time)], &lq.query, lq.gold, n))
                .collect::<Result<Vec<_>>>()?;
            sum += losses.iter().sum::<f64>();
        }
        Ok(sum / self.queries.len().max(1) as f64)
    }

    /// One optimiser step on `batch`; returns the pre-step mean loss.
    pub fn step(&mut self, batch: &[LabeledQuery]) -> Result<f64> {
        let (loss, mut grads) = self.batch_gradient(batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence {
                epoch: self.epochs_done + 1,
                batch: 0,
                detail: format!("loss {loss}, {} queries", batch.len()),
            });
        }
        let norm = grads.global_norm();
        if norm > self.cfg.clip_norm {
            let mut clipped = grads.zeros_like();
            clipped.add_scaled(&grads, self.cfg.clip_norm / norm);
            grads = clipped;
        }
        self.adam.step(&mut self.params, &grads);
        Ok(loss)
    }

    /// One pass over the training queries in seeded batch order.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let start = Instant::now();
        let epoch = self.epochs_done + 1;
        let mut order: Vec<usize> = (0..self.queries.len().div_ceil(self.cfg.batch_size)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for (bi, &b) in order.iter().enumerate() {
            let lo = b * self.cfg.batch_size;
            let hi = (lo + self.cfg.batch_size).min(self.queries.len());
            let batch: Vec<LabeledQuery> = self.queries[lo..hi].to_vec();
            let loss = self.step(&batch).map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence {
                    epoch,
                    batch: bi,
                    detail: format!("{detail}, first query {:?}", batch[0]),
                },
                other => other,
            })?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        self.epochs_done = epoch;
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / seen.max(1) as f64,
            queries: seen,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {} mean loss {:.5} over {} queries ({:.1}s)",
            stats.epoch, stats.mean_loss, stats.queries, stats.seconds
        );
        Ok(stats)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory rewritten with the latest checkpoint after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Trains for `cfg.epochs` epochs. Zero epochs returns the initial parameters.
pub fn train(ds: &TkgDataset, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(ds, cfg)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    if let Some(dir) = &opts.checkpoint_dir {
        Checkpoint::new(ds, cfg, trainer.params().clone(), 0).save(dir)?;
    }
    for _ in 0..cfg.epochs {
        let stats = trainer.run_epoch()?;
        if let Some(dir) = &opts.checkpoint_dir {
            Checkpoint::new(ds, cfg, trainer.params().clone(), stats.epoch).save(dir)?;
        }
        history.push(stats);
    }
    let epochs = trainer.epochs_done();
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(ds, cfg, trainer.into_params(), epochs),
        history,
    })
}
