//! Time-aware filtered ranking, metrics and the zero-shot protocol.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::digraph::{QueryContext, TcrDigraph};
use crate::error::{Error, Result};
use crate::reasoner::Encoder;
use crate::scorer::score_entities;
use crate::store::{EntityId, RelationId, Split, TkgDataset};
use crate::train::{labeled_queries, time_table_for, LabeledQuery};

/// Rank of `gold` with `competing` removed from contention.
///
/// Ties share the mean of their positions, rounded up: with `g` strictly
/// better entities and `k` tied entities (gold included) the rank is
/// `g + ceil((k + 1) / 2)`. An all-equal score vector ranks gold in the middle.
pub fn filtered_rank(scores: ArrayView1<f64>, gold: EntityId, competing: &[EntityId]) -> usize {
    let gs = scores[gold as usize];
    let mut greater = 0usize;
    let mut tied = 1usize;
    for (e, &s) in scores.iter().enumerate() {
        let e = e as EntityId;
        if e == gold || competing.contains(&e) {
            continue;
        }
        if s > gs {
            greater += 1;
        } else if s == gs {
            tied += 1;
        }
    }
    greater + (tied + 2) / 2
}

/// Unfiltered rank with the same tie rule.
pub fn raw_rank(scores: ArrayView1<f64>, gold: EntityId) -> usize {
    filtered_rank(scores, gold, &[])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankResult {
    pub query: QueryContext,
    pub gold: EntityId,
    pub rank: usize,
}

/// Aggregated metrics, all in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub n_queries: usize,
    pub n_skipped: usize,
}

impl MetricsReport {
    pub fn from_ranks(split: Split, ranks: &[usize], n_skipped: usize) -> Self {
        let n = ranks.len();
        let pct = |f: &dyn Fn(usize) -> f64| {
            if n == 0 {
                0.0
            } else {
                100.0 * ranks.iter().map(|&r| f(r)).sum::<f64>() / n as f64
            }
        };
        let hits = |k: usize| pct(&|r| if r <= k { 1.0 } else { 0.0 });
        Self {
            split,
            mrr: pct(&|r| 1.0 / r as f64),
            hits1: hits(1),
            hits3: hits(3),
            hits10: hits(10),
            n_queries: n,
            n_skipped,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("metrics serialise")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9}",
            "split", "MRR", "H@1", "H@3", "H@10", "queries", "skipped"
        )?;
        write!(
            f,
            "{:<6} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>9} {:>9}",
            self.split.to_string(),
            self.mrr,
            self.hits1,
            self.hits3,
            self.hits10,
            self.n_queries,
            self.n_skipped
        )
    }
}

/// Fails unless the checkpoint was trained on this relation vocabulary.
pub fn check_vocab(ckpt: &Checkpoint, ds: &TkgDataset) -> Result<()> {
    if ckpt.num_base_relations() != ds.num_base_relations() {
        return Err(Error::Vocab(format!(
            "checkpoint has {} relations, dataset has {}",
            ckpt.num_base_relations(),
            ds.num_base_relations()
        )));
    }
    if ckpt.meta.relation_names_known && ds.relations().has_names() {
        for (r, name) in ckpt.meta.relations.iter().enumerate() {
            let other = ds.relations().name(r as u32);
            if *name != other {
                return Err(Error::Vocab(format!("relation {r} is {name:?} in the checkpoint but {other:?} here")));
            }
        }
    }
    if ckpt.params.dims.num_relations != ds.scheme().num_augmented() {
        return Err(Error::Vocab("relation embedding table size differs from dataset".into()));
    }
    Ok(())
}

/// Scores every entity for each query, grouped so each digraph is built once.
pub fn score_queries(ckpt: &Checkpoint, ds: &TkgDataset, queries: &[QueryContext]) -> Result<Array2<f64>> {
    let cfg = &ckpt.meta.config;
    let time = time_table_for(ds, ckpt.params.dims.time_dim);
    let enc = Encoder::new(&ckpt.params, &time, cfg.ablation);
    let gcfg = cfg.digraph_config();
    let n = ds.num_entities();
    let mut groups: BTreeMap<(EntityId, u32), Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        groups.entry((q.entity, q.time)).or_default().push(i);
    }
    let groups: Vec<_> = groups.into_iter().collect();
    let scored = groups
        .par_iter()
        .map(|((e, t), idx)| {
            let probe = QueryContext { entity: *e, relation: 0, time: *t };
            let g = TcrDigraph::build(ds, &probe, &gcfg)?;
            idx.iter()
                .map(|&i| {
                    let enc_q = enc.encode(&g, &queries[i])?;
                    Ok((i, score_entities(&enc_q.states, &ckpt.params.w_out, n)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Array2::zeros((queries.len(), n));
    for (i, s) in scored.into_iter().flatten() {
        out.row_mut(i).assign(&s);
    }
    Ok(out)
}

/// Filtered ranks for `queries`, in input order.
pub fn rank_queries(ckpt: &Checkpoint, ds: &TkgDataset, queries: &[LabeledQuery]) -> Result<Vec<RankResult>> {
    let answers = ds.answers_by_query();
    let contexts: Vec<QueryContext> = queries.iter().map(|q| q.query).collect();
    let scores = score_queries(ckpt, ds, &contexts)?;
    let empty = Vec::new();
    Ok(queries
        .iter()
        .enumerate()
        .map(|(i, lq)| {
            let q = lq.query;
            let all = answers.get(&(q.entity, q.relation, q.time)).unwrap_or(&empty);
            let competing: Vec<EntityId> = all.iter().copied().filter(|&o| o != lq.gold).collect();
            RankResult {
                query: q,
                gold: lq.gold,
                rank: filtered_rank(scores.row(i), lq.gold, &competing),
            }
        })
        .collect())
}

/// Filtered metrics for both query directions of every quadruple in `split`.
pub fn evaluate(ckpt: &Checkpoint, ds: &TkgDataset, split: Split) -> Result<MetricsReport> {
    check_vocab(ckpt, ds)?;
    let queries = labeled_queries(ds, split)?;
    let skipped = 2 * ds.split(split).iter().filter(|q| q.time == 0).count();
    let ranks = rank_queries(ckpt, ds, &queries)?;
    let ranks: Vec<usize> = ranks.iter().map(|r| r.rank).collect();
    Ok(MetricsReport::from_ranks(split, &ranks, skipped))
}

/// A checkpoint whose relation table was reindexed onto another dataset.
#[derive(Clone, Debug)]
pub struct RemappedCheckpoint {
    pub checkpoint: Checkpoint,
    /// Target base relations with no same-named source relation.
    pub unmatched: Vec<RelationId>,
}

/// Reindexes relation embeddings onto `target` by relation name.
///
/// Unmatched target relations keep all-zero embedding rows (forward and
/// inverse); queries on them are skipped by [`evaluate_zero_shot`].
pub fn zero_shot_remap(ckpt: &Checkpoint, target: &TkgDataset) -> Result<RemappedCheckpoint> {
    if !ckpt.meta.relation_names_known {
        return Err(Error::Remap("checkpoint has no relation names".into()));
    }
    let Some(names) = target.relations().names() else {
        return Err(Error::Remap("target dataset has no relation names".into()));
    };
    if !target.is_augmented() {
        return Err(Error::Config("target dataset must be augmented".into()));
    }
    let src_index: HashMap<&str, usize> = ckpt
        .meta
        .relations
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let rs = ckpt.num_base_relations();
    let rt = names.len();
    let src = &ckpt.params.relation_emb;
    let d = src.ncols();
    let mut emb = Array2::zeros((2 * rt + 1, d));
    let mut unmatched = Vec::new();
    for (r, name) in names.iter().enumerate() {
        match src_index.get(name.as_str()) {
            Some(&s) => {
                emb.row_mut(r).assign(&src.row(s));
                emb.row_mut(r + rt).assign(&src.row(s + rs));
            }
            None => unmatched.push(r as RelationId),
        }
    }
    if unmatched.len() == rt {
        return Err(Error::Remap("no relation names shared with the checkpoint".into()));
    }
    emb.row_mut(2 * rt).assign(&src.row(2 * rs));
    let mut checkpoint = ckpt.clone();
    checkpoint.params.relation_emb = emb;
    checkpoint.params.dims.num_relations = 2 * rt + 1;
    checkpoint.meta.dims = checkpoint.params.dims;
    checkpoint.meta.relations = names.to_vec();
    checkpoint.meta.dataset_fingerprint = target.fingerprint();
    Ok(RemappedCheckpoint {
        checkpoint,
        unmatched,
    })
}

/// Evaluates a remapped checkpoint, skipping queries on unmatched relations.
pub fn evaluate_zero_shot(remapped: &RemappedCheckpoint, ds: &TkgDataset, split: Split) -> Result<MetricsReport> {
    let ckpt = &remapped.checkpoint;
    check_vocab(ckpt, ds)?;
    let scheme = ds.scheme();
    let all = labeled_queries(ds, split)?;
    let mut skipped = 2 * ds.split(split).iter().filter(|q| q.time == 0).count();
    let queries: Vec<LabeledQuery> = all
        .into_iter()
        .filter(|lq| {
            let base = scheme.base_of(lq.query.relation).unwrap_or(lq.query.relation);
            let keep = !remapped.unmatched.contains(&base);
            if !keep {
                skipped += 1;
            }
            keep
        })
        .collect();
    let ranks = rank_queries(ckpt, ds, &queries)?;
    let ranks: Vec<usize> = ranks.iter().map(|r| r.rank).collect();
    Ok(MetricsReport::from_ranks(split, &ranks, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::params::{ModelDims, ModelParams};
    use crate::store::{augment_relations, Quadruple, Vocab};
    use ndarray::array;

    #[test]
    fn unique_max_is_rank_one() {
        assert_eq!(filtered_rank(array![0.1, 0.9, 0.3].view(), 1, &[]), 1);
    }

    #[test]
    fn filter_removes_competing_gold() {
        let s = array![0.1, 0.5, 0.9];
        assert_eq!(raw_rank(s.view(), 1), 2);
        assert_eq!(filtered_rank(s.view(), 1, &[2]), 1);
    }

    #[test]
    fn ties_take_mean_position_rounded_up() {
        // positions 2..=4 tied, mean 3
        assert_eq!(raw_rank(array![1.0, 0.5, 0.5, 0.5, 0.0].view(), 2), 3);
        // positions 1..=2 tied, mean 1.5 -> 2
        assert_eq!(raw_rank(array![0.5, 0.5].view(), 0), 2);
        // all equal over 7128 entities
        let z = ndarray::Array1::<f64>::zeros(7128);
        assert_eq!(raw_rank(z.view(), 0), 3565);
    }

    #[test]
    fn hand_computed_report() {
        let r = MetricsReport::from_ranks(Split::Test, &[1, 2, 4, 11, 1], 0);
        let mrr = (1.0 + 0.5 + 0.25 + 1.0 / 11.0 + 1.0) / 5.0 * 100.0;
        assert!((r.mrr - mrr).abs() < 1e-12);
        assert_eq!((r.hits1, r.hits3, r.hits10), (40.0, 60.0, 80.0));
        assert_eq!(r.n_queries, 5);
        let text = r.to_string();
        assert!(text.lines().count() == 2 && text.contains("MRR"));
        let j = r.to_json();
        for k in ["split", "mrr", "hits1", "hits3", "hits10", "n_queries", "n_skipped"] {
            assert!(j.get(k).is_some());
        }
    }

    fn named(rel: &[&str], facts: Vec<Quadruple>, n: usize) -> TkgDataset {
        let last = facts.iter().map(|q| q.time).max().unwrap();
        let (train, test): (Vec<_>, Vec<_>) = facts.into_iter().partition(|q| q.time < last);
        augment_relations(
            TkgDataset::from_parts(
                Vocab::anonymous(n),
                Vocab::named(rel.iter().map(|s| s.to_string()).collect()),
                train,
                vec![],
                test,
                1,
            )
            .unwrap(),
        )
        .unwrap()
    }

    fn toy_facts() -> Vec<Quadruple> {
        let mut f = Vec::new();
        for t in 0..6 {
            f.push(Quadruple::new(0, 0, 1, t));
            f.push(Quadruple::new(1, 1, 2, t));
            f.push(Quadruple::new(2, 2, 3, t));
        }
        f
    }

    fn ckpt_for(ds: &TkgDataset) -> Checkpoint {
        let cfg = TrainConfig {
            embed_dim: 6,
            time_dim: 4,
            layers: 2,
            window: 3,
            ..TrainConfig::default()
        };
        let dims = ModelDims {
            embed_dim: 6,
            time_dim: 4,
            num_relations: ds.scheme().num_augmented(),
            layers: 2,
        };
        Checkpoint::new(ds, &cfg, ModelParams::init(dims, 1), 0)
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let a = named(&["x", "y", "z"], toy_facts(), 4);
        let b = named(&["x", "y", "w"], toy_facts(), 4);
        let ck = ckpt_for(&a);
        assert!(matches!(evaluate(&ck, &b, Split::Test), Err(Error::Vocab(_))));
        let report = evaluate(&ck, &a, Split::Test).unwrap();
        assert_eq!(report.n_queries, 6);
        assert!(report.hits1 <= report.hits3 && report.hits3 <= report.hits10);
    }

    #[test]
    fn remap_onto_self_is_identity() {
        let a = named(&["x", "y", "z"], toy_facts(), 4);
        let ck = ckpt_for(&a);
        let re = zero_shot_remap(&ck, &a).unwrap();
        assert!(re.unmatched.is_empty());
        assert_eq!(re.checkpoint.params, ck.params);
        assert_eq!(
            evaluate_zero_shot(&re, &a, Split::Test).unwrap(),
            evaluate(&ck, &a, Split::Test).unwrap()
        );
    }

    #[test]
    fn partial_overlap_flags_and_skips() {
        let a = named(&["x", "y", "z"], toy_facts(), 4);
        let b = named(&["y", "q", "x"], toy_facts(), 4);
        let re = zero_shot_remap(&ckpt_for(&a), &b).unwrap();
        assert_eq!(re.unmatched, vec![1]);
        let r = evaluate_zero_shot(&re, &b, Split::Test).unwrap();
        assert_eq!(r.n_skipped, 2);
        assert_eq!(r.n_queries, 4);
        let c = named(&["p", "q", "s"], toy_facts(), 4);
        assert!(matches!(zero_shot_remap(&ckpt_for(&a), &c), Err(Error::Remap(_))));
    }
}
