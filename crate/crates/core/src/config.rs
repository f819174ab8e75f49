//! Hyperparameters and run configuration.
//!
//! Run configs can be read from plain `key=value` files; command-line flags
//! are applied on top.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::digraph::DigraphConfig;
use crate::error::{Error, Result};
use crate::store::Split;

/// Model variants used for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// Every layer uses the local window; no global one-hop retrieval.
    NoGlobal,
    /// A single global layer; no local multi-hop expansion.
    GlobalOnly,
    /// Temporal relation = relation embedding (no time fusion).
    NoTime,
    /// Message = source state + temporal relation instead of the gated cell.
    NoQtr,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no-global" | "wo-system1" => Ok(Self::NoGlobal),
            "global-only" | "wo-system2" => Ok(Self::GlobalOnly),
            "no-time" => Ok(Self::NoTime),
            "no-qtr" => Ok(Self::NoQtr),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::NoGlobal => "no-global",
            Self::GlobalOnly => "global-only",
            Self::NoTime => "no-time",
            Self::NoQtr => "no-qtr",
        })
    }
}

/// Training hyperparameters. Optimisation is always Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub time_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub window: u32,
    pub layers: usize,
    pub epochs: usize,
    /// Per-source fan-out cap; `None` is unbounded.
    pub cap: Option<usize>,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            time_dim: 32,
            learning_rate: 0.001,
            batch_size: 128,
            window: 15,
            layers: 4,
            epochs: 20,
            cap: Some(200),
            seed: 0,
            clip_norm: 1.0,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive");
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad("time_dim must be positive and even");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.window == 0 {
            return bad("window must be positive");
        }
        if self.layers == 0 {
            return bad("layers must be positive");
        }
        if self.cap == Some(0) {
            return bad("cap must be positive (omit for unbounded)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    /// Number of encoder layers actually used.
    pub fn effective_layers(&self) -> usize {
        if self.ablation == Ablation::GlobalOnly {
            1
        } else {
            self.layers
        }
    }

    pub fn digraph_config(&self) -> DigraphConfig {
        DigraphConfig {
            layers: self.effective_layers(),
            window: self.window,
            cap: self.cap,
            global_first_layer: self.ablation != Ablation::NoGlobal,
        }
    }
}

/// Everything a CLI command needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub threshold: f64,
    pub out: Option<PathBuf>,
    /// Raw time units per snapshot; inferred when absent.
    pub granularity: Option<u64>,
    /// Restrict the dataset to its first N snapshots (re-split 80/10/10).
    pub max_snapshots: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            dataset_dir: None,
            checkpoint: None,
            split: Split::Test,
            threshold: 0.4,
            out: None,
            granularity: None,
            max_snapshots: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}={value}: {e}")))
}

fn parse_cap(value: &str) -> Result<Option<usize>> {
    match value {
        "none" | "unbounded" | "0" => Ok(None),
        v => parse("cap", v).map(Some),
    }
}

impl RunConfig {
    /// Applies one `key=value` setting. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let t = &mut self.train;
        match key.as_str() {
            "embed_dim" => t.embed_dim = parse(&key, value)?,
            "time_dim" => t.time_dim = parse(&key, value)?,
            "lr" | "learning_rate" => t.learning_rate = parse(&key, value)?,
            "batch_size" => t.batch_size = parse(&key, value)?,
            "window" => t.window = parse(&key, value)?,
            "layers" => t.layers = parse(&key, value)?,
            "epochs" => t.epochs = parse(&key, value)?,
            "cap" => t.cap = parse_cap(value)?,
            "seed" => t.seed = parse(&key, value)?,
            "clip_norm" => t.clip_norm = parse(&key, value)?,
            "ablation" => t.ablation = value.parse()?,
            "dataset_dir" => self.dataset_dir = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "split" => self.split = value.parse()?,
            "threshold" => self.threshold = parse(&key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            "granularity" => self.granularity = Some(parse(&key, value)?),
            "max_snapshots" => self.max_snapshots = Some(parse(&key, value)?),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_str(&text)
    }

    /// Falls back to `COGNTKE_DATA_DIR` when no dataset directory is set.
    pub fn resolve_dataset_dir(&self) -> Result<PathBuf> {
        self.dataset_dir
            .clone()
            .or_else(|| std::env::var_os("COGNTKE_DATA_DIR").map(PathBuf::from))
            .ok_or_else(|| {
                Error::Config("no dataset directory (use --dataset-dir or COGNTKE_DATA_DIR)".into())
            })
    }

    /// The effective configuration as `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let t = &self.train;
        let mut lines = vec![
            format!("embed_dim={}", t.embed_dim),
            format!("time_dim={}", t.time_dim),
            format!("learning_rate={}", t.learning_rate),
            format!("batch_size={}", t.batch_size),
            format!("window={}", t.window),
            format!("layers={}", t.layers),
            format!("epochs={}", t.epochs),
            format!("cap={}", t.cap.map_or("none".to_string(), |c| c.to_string())),
            format!("seed={}", t.seed),
            format!("clip_norm={}", t.clip_norm),
            format!("ablation={}", t.ablation),
            format!("split={}", self.split),
            format!("threshold={}", self.threshold),
        ];
        let paths = [
            ("dataset_dir", &self.dataset_dir),
            ("checkpoint", &self.checkpoint),
            ("out", &self.out),
        ];
        for (k, v) in paths {
            if let Some(p) = v {
                lines.push(format!("{k}={}", p.display()));
            }
        }
        if let Some(g) = self.granularity {
            lines.push(format!("granularity={g}"));
        }
        if let Some(n) = self.max_snapshots {
            lines.push(format!("max_snapshots={n}"));
        }
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.embed_dim, c.time_dim, c.batch_size, c.window, c.layers, c.epochs), (64, 32, 128, 15, 4, 20));
        assert_eq!(c.learning_rate, 0.001);
        c.validate().unwrap();
    }

    #[test]
    fn file_then_override() {
        let mut rc = RunConfig::default();
        rc.apply_str("# comment\nlayers=2\nwindow = 5\ncap=none\nablation=no-global\n").unwrap();
        rc.set("layers", "3").unwrap();
        assert_eq!(rc.train.layers, 3);
        assert_eq!(rc.train.window, 5);
        assert_eq!(rc.train.cap, None);
        assert_eq!(rc.train.ablation, Ablation::NoGlobal);
        assert!(!rc.train.digraph_config().global_first_layer);
    }

    #[test]
    fn key_values_round_trip() {
        let mut rc = RunConfig::default();
        rc.set("epochs", "3").unwrap();
        rc.set("out", "/tmp/x").unwrap();
        rc.set("max-snapshots", "100").unwrap();
        let mut back = RunConfig::default();
        back.apply_str(&rc.to_key_values()).unwrap();
        assert_eq!(back, rc);
    }

    #[test]
    fn rejects_bad_values() {
        let mut rc = RunConfig::default();
        assert!(rc.set("layers", "two").is_err());
        assert!(rc.set("nonsense", "1").is_err());
        rc.set("time_dim", "31").unwrap();
        assert!(rc.train.validate().is_err());
    }

    #[test]
    fn global_only_forces_one_layer() {
        let c = TrainConfig {
            ablation: Ablation::GlobalOnly,
            ..TrainConfig::default()
        };
        assert_eq!(c.digraph_config().layers, 1);
    }
}
