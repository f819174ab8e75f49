//! Seeded synthetic event graphs with recurring and multi-hop structure.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Quadruple, TkgDataset, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub entities: usize,
    pub relations: usize,
    pub snapshots: usize,
    /// Recurring `(s, r, o)` facts, each with its own period.
    pub periodic: usize,
    pub min_period: usize,
    pub max_period: usize,
    /// Three-step chains `(a,r1,b,t) (b,r2,c,t+1) => (a,r3,c,t+2)` per snapshot.
    pub chains_per_snapshot: usize,
    /// Number of distinct chain rules.
    pub rules: usize,
    pub noise_per_snapshot: usize,
    /// Raw time step written to disk.
    pub granularity: u64,
    pub named: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            entities: 200,
            relations: 12,
            snapshots: 100,
            periodic: 300,
            min_period: 18,
            max_period: 36,
            chains_per_snapshot: 4,
            rules: 3,
            noise_per_snapshot: 8,
            granularity: 24,
            named: true,
            seed: 7,
        }
    }
}

fn relation_names(n: usize) -> Vec<String> {
    (0..n).map(|r| format!("rel_{r:02}")).collect()
}

fn entity_names(n: usize) -> Vec<String> {
    (0..n).map(|e| format!("actor_{e:04}")).collect()
}

/// Generates the dataset in memory, split 80/10/10 by snapshot.
pub fn generate(cfg: &SynthConfig) -> Result<TkgDataset> {
    if cfg.entities < 3 || cfg.relations < 3 || cfg.snapshots < 10 {
        return Err(Error::Config("synthetic graph needs >= 3 entities, >= 3 relations, >= 10 snapshots".into()));
    }
    if cfg.min_period == 0 || cfg.min_period > cfg.max_period {
        return Err(Error::Config("period range is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (ne, nr, nt) = (cfg.entities as u32, cfg.relations as u32, cfg.snapshots as u32);
    let mut facts: BTreeSet<(u32, u32, u32, u32)> = BTreeSet::new();

    for _ in 0..cfg.periodic {
        let s = rng.random_range(0..ne);
        let o = (s + rng.random_range(1..ne)) % ne;
        let r = rng.random_range(0..nr);
        let period = rng.random_range(cfg.min_period..=cfg.max_period) as u32;
        let phase = rng.random_range(0..period);
        let mut t = phase;
        while t < nt {
            facts.insert((t, s, r, o));
            t += period;
        }
    }

    let rules: Vec<(u32, u32, u32)> = (0..cfg.rules)
        .map(|_| {
            let r1 = rng.random_range(0..nr);
            let r2 = (r1 + rng.random_range(1..nr)) % nr;
            let r3 = rng.random_range(0..nr);
            (r1, r2, r3)
        })
        .collect();
    if !rules.is_empty() {
        for t in 0..nt.saturating_sub(2) {
            for _ in 0..cfg.chains_per_snapshot {
                let (r1, r2, r3) = rules[rng.random_range(0..rules.len())];
                let a = rng.random_range(0..ne);
                let b = (a + rng.random_range(1..ne)) % ne;
                let mut c = rng.random_range(0..ne);
                if c == a || c == b {
                    c = (b + 1) % ne;
                }
                facts.insert((t, a, r1, b));
                facts.insert((t + 1, b, r2, c));
                facts.insert((t + 2, a, r3, c));
            }
        }
    }

    for t in 0..nt {
        for _ in 0..cfg.noise_per_snapshot {
            let s = rng.random_range(0..ne);
            let o = (s + rng.random_range(1..ne)) % ne;
            facts.insert((t, s, rng.random_range(0..nr), o));
        }
    }

    let train_end = (nt * 8 / 10).max(1);
    let valid_end = (nt * 9 / 10).max(train_end + 1);
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (t, s, r, o) in facts {
        let q = Quadruple::new(s, r, o, t);
        if t < train_end {
            train.push(q);
        } else if t < valid_end {
            valid.push(q);
        } else {
            test.push(q);
        }
    }
    let (ents, rels) = if cfg.named {
        (
            Vocab::named(entity_names(cfg.entities)),
            Vocab::named(relation_names(cfg.relations)),
        )
    } else {
        (Vocab::anonymous(cfg.entities), Vocab::anonymous(cfg.relations))
    };
    TkgDataset::from_parts(ents, rels, train, valid, test, cfg.granularity)
}

/// Writes `ds` in the standard directory layout (`train.txt`, `valid.txt`,
/// `test.txt`, `stat.txt` and, when named, `entity2id.txt`/`relation2id.txt`).
/// Times are written as `snapshot * granularity`. Expects a non-augmented dataset.
pub fn write_dataset(ds: &TkgDataset, dir: impl AsRef<Path>) -> Result<()> {
    if ds.is_augmented() {
        return Err(Error::AlreadyAugmented);
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let gran = ds.granularity();
    for (file, facts) in [("train.txt", ds.train()), ("valid.txt", ds.valid()), ("test.txt", ds.test())] {
        let mut text = String::with_capacity(facts.len() * 16);
        for q in facts {
            let _ = writeln!(text, "{}\t{}\t{}\t{}", q.subject, q.relation, q.object, q.time as u64 * gran);
        }
        fs::write(dir.join(file), text)?;
    }
    fs::write(
        dir.join("stat.txt"),
        format!("{}\t{}\n", ds.num_entities(), ds.num_base_relations()),
    )?;
    for (file, vocab) in [("entity2id.txt", ds.entities()), ("relation2id.txt", ds.relations())] {
        if let Some(names) = vocab.names() {
            let mut text = String::new();
            for (i, n) in names.iter().enumerate() {
                let _ = writeln!(text, "{n}\t{i}");
            }
            fs::write(dir.join(file), text)?;
        }
    }
    Ok(())
}
