use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use cogntke::checkpoint::Checkpoint;
use cogntke::config::RunConfig;
use cogntke::digraph::QueryContext;
use cogntke::error::{Error, Result};
use cogntke::evaluate::{evaluate, evaluate_zero_shot, zero_shot_remap};
use cogntke::explain::explain;
use cogntke::store::{augment_relations, load_dataset_with, LoadOptions, TkgDataset};
use cogntke::synth::{generate, write_dataset, SynthConfig};
use cogntke::train::{train, TrainOptions};

#[derive(Parser)]
#[command(name = "cogntke", version, about = "Temporal knowledge graph reasoning: train, evaluate, explain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint directory.
    Train(Common),
    /// Filtered MRR / Hits@k of a checkpoint on a split.
    Eval(Common),
    /// Evaluate a checkpoint on another dataset matched by relation names.
    Zeroshot(Common),
    /// Attention-pruned evidence paths for one query.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Query entity (id or name).
        #[arg(long)]
        entity: String,
        /// Query relation (id or name; `<name>_reverse` for inverses).
        #[arg(long)]
        relation: String,
        /// Query snapshot index.
        #[arg(long)]
        time: u32,
        /// Entity to explain; defaults to the top prediction.
        #[arg(long)]
        target: Option<String>,
        #[arg(long, default_value_t = 100)]
        max_paths: usize,
        /// Also write a Graphviz DOT file.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Grid of train + eval runs written as CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated window lengths.
        #[arg(long, value_delimiter = ',')]
        windows: Vec<u32>,
        /// Comma-separated layer counts.
        #[arg(long = "layer-grid", value_delimiter = ',')]
        layer_grid: Vec<usize>,
        #[arg(long = "embed-dims", value_delimiter = ',')]
        embed_dims: Vec<usize>,
        #[arg(long = "time-dims", value_delimiter = ',')]
        time_dims: Vec<usize>,
    },
    /// Dataset statistics.
    Inspect(Common),
    /// Write a seeded synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        entities: usize,
        #[arg(long, default_value_t = 12)]
        relations: usize,
        #[arg(long, default_value_t = 100)]
        snapshots: usize,
        #[arg(long, default_value_t = 300)]
        periodic: usize,
        #[arg(long, default_value_t = 4)]
        chains: usize,
        #[arg(long, default_value_t = 3)]
        rules: usize,
        #[arg(long, default_value_t = 8)]
        noise: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Omit entity2id/relation2id files.
        #[arg(long)]
        anonymous: bool,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    embed_dim: Option<String>,
    #[arg(long)]
    time_dim: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// Per-source fan-out cap, or `none`.
    #[arg(long)]
    cap: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// train | valid | test
    #[arg(long)]
    split: Option<String>,
    /// full | no-global | global-only | no-time | no-qtr
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    granularity: Option<String>,
    /// Keep only the first N snapshots, re-split 80/10/10.
    #[arg(long)]
    max_snapshots: Option<String>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut rc = RunConfig::default();
        if let Some(path) = &self.config {
            rc.apply_file(path)?;
        }
        let flags = [
            ("embed_dim", &self.embed_dim),
            ("time_dim", &self.time_dim),
            ("layers", &self.layers),
            ("window", &self.window),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("cap", &self.cap),
            ("threshold", &self.threshold),
            ("seed", &self.seed),
            ("split", &self.split),
            ("ablation", &self.ablation),
            ("granularity", &self.granularity),
            ("max_snapshots", &self.max_snapshots),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                rc.set(key, v)?;
            }
        }
        for (key, value) in [
            ("dataset_dir", &self.dataset_dir),
            ("checkpoint", &self.checkpoint),
            ("out", &self.out),
        ] {
            if let Some(p) = value {
                rc.set(key, &p.to_string_lossy())?;
            }
        }
        Ok(rc)
    }
}

fn load(rc: &RunConfig) -> Result<TkgDataset> {
    let dir = rc.resolve_dataset_dir()?;
    let mut ds = load_dataset_with(
        &dir,
        &LoadOptions {
            granularity: rc.granularity,
        },
    )?;
    if let Some(n) = rc.max_snapshots {
        ds = ds.head_snapshots(n)?;
    }
    augment_relations(ds)
}

fn require_checkpoint(rc: &RunConfig) -> Result<&Path> {
    rc.checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

/// Loads the checkpoint; its training config replaces the model flags.
fn with_checkpoint(common: &Common) -> Result<(RunConfig, Checkpoint)> {
    let mut rc = common.run_config()?;
    let ckpt = Checkpoint::load(require_checkpoint(&rc)?)?;
    rc.train = ckpt.meta.config.clone();
    Ok((rc, ckpt))
}

fn write_json(path: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, text + "\n")?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_train(common: &Common) -> Result<()> {
    let rc = common.run_config()?;
    rc.train.validate()?;
    let ckpt_dir = require_checkpoint(&rc)?.to_path_buf();
    let ds = load(&rc)?;
    info!(
        "training on {} train facts, {} entities, {} relations",
        ds.train().len(),
        ds.num_entities(),
        ds.num_base_relations()
    );
    let outcome = train(
        &ds,
        &rc.train,
        &TrainOptions {
            checkpoint_dir: Some(ckpt_dir.clone()),
        },
    )?;
    fs::write(ckpt_dir.join("run.conf"), rc.to_key_values())?;
    let log = json!({
        "config": rc,
        "history": outcome.history.iter().map(|h| json!({
            "epoch": h.epoch, "mean_loss": h.mean_loss, "queries": h.queries,
        })).collect::<Vec<_>>(),
    });
    fs::write(ckpt_dir.join("train_log.json"), serde_json::to_string_pretty(&log)?)?;
    for h in &outcome.history {
        eprintln!("epoch {:>3}  loss {:.5}", h.epoch, h.mean_loss);
    }
    if rc.out.is_some() {
        write_json(rc.out.as_deref(), &log)?;
    }
    Ok(())
}

fn cmd_eval(common: &Common, zero_shot: bool) -> Result<()> {
    let (rc, ckpt) = with_checkpoint(common)?;
    let ds = load(&rc)?;
    let (report, unmatched) = if zero_shot {
        let remapped = zero_shot_remap(&ckpt, &ds)?;
        let unmatched: Vec<String> = remapped
            .unmatched
            .iter()
            .map(|&r| ds.relations().name(r))
            .collect();
        (evaluate_zero_shot(&remapped, &ds, rc.split)?, Some(unmatched))
    } else {
        (evaluate(&ckpt, &ds, rc.split)?, None)
    };
    eprintln!("{report}");
    let mut out = json!({
        "config": rc,
        "metrics": report.to_json(),
    });
    if let Some(u) = unmatched {
        out["unmatched_relations"] = json!(u);
    }
    write_json(rc.out.as_deref(), &out)
}

fn resolve_entity(ds: &TkgDataset, s: &str) -> Result<u32> {
    let id = s
        .parse::<u32>()
        .ok()
        .or_else(|| ds.entities().id_of(s))
        .ok_or_else(|| Error::Vocab(format!("unknown entity `{s}`")))?;
    if id as usize >= ds.num_entities() {
        return Err(Error::OutOfRange {
            what: "entity id",
            value: id as usize,
            limit: ds.num_entities(),
        });
    }
    Ok(id)
}

fn resolve_relation(ds: &TkgDataset, s: &str) -> Result<u32> {
    let scheme = ds.scheme();
    let id = if let Ok(id) = s.parse::<u32>() {
        Some(id)
    } else if let Some(base) = s.strip_suffix("_reverse") {
        ds.relations().id_of(base).map(|r| scheme.inverse(r))
    } else {
        ds.relations().id_of(s)
    }
    .ok_or_else(|| Error::Vocab(format!("unknown relation `{s}`")))?;
    if id as usize >= ds.num_relations() {
        return Err(Error::OutOfRange {
            what: "relation id",
            value: id as usize,
            limit: ds.num_relations(),
        });
    }
    Ok(id)
}

fn cmd_explain(
    common: &Common,
    entity: &str,
    relation: &str,
    time: u32,
    target: Option<&str>,
    max_paths: usize,
    dot: Option<&Path>,
) -> Result<()> {
    let (rc, ckpt) = with_checkpoint(common)?;
    let ds = load(&rc)?;
    cogntke::evaluate::check_vocab(&ckpt, &ds)?;
    let q = QueryContext::new(resolve_entity(&ds, entity)?, resolve_relation(&ds, relation)?, time)?;
    let target = target.map(|t| resolve_entity(&ds, t)).transpose()?;
    let x = explain(&ckpt, &ds, &q, target, rc.threshold, max_paths)?;
    eprintln!(
        "{} edges >= {}, {} paths to {}",
        x.edges.len(),
        rc.threshold,
        x.paths.len(),
        ds.entity_name(x.target)
    );
    if let Some(path) = dot {
        fs::write(path, x.to_dot(&ds))?;
    }
    let mut out = x.to_json(&ds);
    out["config"] = json!(rc);
    write_json(rc.out.as_deref(), &out)
}

fn cmd_sweep(
    common: &Common,
    windows: &[u32],
    layer_grid: &[usize],
    embed_dims: &[usize],
    time_dims: &[usize],
) -> Result<()> {
    let rc = common.run_config()?;
    let ds = load(&rc)?;
    let pick = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
    let windows = if windows.is_empty() {
        vec![rc.train.window]
    } else {
        windows.to_vec()
    };
    let mut csv = String::from("window,layers,embed_dim,time_dim,split,mrr,hits1,hits3,hits10,n_queries\n");
    for &window in &windows {
        for &layers in &pick(layer_grid, rc.train.layers) {
            for &embed_dim in &pick(embed_dims, rc.train.embed_dim) {
                for &time_dim in &pick(time_dims, rc.train.time_dim) {
                    let mut cfg = rc.train.clone();
                    cfg.window = window;
                    cfg.layers = layers;
                    cfg.embed_dim = embed_dim;
                    cfg.time_dim = time_dim;
                    cfg.validate()?;
                    info!("sweep point m={window} L={layers} d={embed_dim} dt={time_dim}");
                    let opts = TrainOptions {
                        checkpoint_dir: rc
                            .checkpoint
                            .as_ref()
                            .map(|d| d.join(format!("m{window}_L{layers}_d{embed_dim}_t{time_dim}"))),
                    };
                    let outcome = train(&ds, &cfg, &opts)?;
                    let r = evaluate(&outcome.checkpoint, &ds, rc.split)?;
                    let _ = writeln!(
                        csv,
                        "{window},{layers},{embed_dim},{time_dim},{},{},{},{},{},{}",
                        r.split, r.mrr, r.hits1, r.hits3, r.hits10, r.n_queries
                    );
                }
            }
        }
    }
    let header = format!(
        "# {}\n",
        rc.to_key_values().lines().collect::<Vec<_>>().join(" ")
    );
    match &rc.out {
        Some(p) => fs::write(p, header + &csv)?,
        None => print!("{header}{csv}"),
    }
    Ok(())
}

fn cmd_inspect(common: &Common) -> Result<()> {
    let rc = common.run_config()?;
    let ds = load(&rc)?;
    let out = json!({
        "config": rc,
        "entities": ds.num_entities(),
        "relations": ds.num_base_relations(),
        "snapshots": ds.num_snapshots(),
        "granularity": ds.granularity(),
        "train": ds.train().len(),
        "valid": ds.valid().len(),
        "test": ds.test().len(),
        "has_entity_names": ds.entities().has_names(),
        "has_relation_names": ds.relations().has_names(),
        "fingerprint": ds.fingerprint(),
    });
    write_json(rc.out.as_deref(), &out)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c, false),
        Command::Zeroshot(c) => cmd_eval(c, true),
        Command::Explain {
            common,
            entity,
            relation,
            time,
            target,
            max_paths,
            dot,
        } => cmd_explain(
            common,
            entity,
            relation,
            *time,
            target.as_deref(),
            *max_paths,
            dot.as_deref(),
        ),
        Command::Sweep {
            common,
            windows,
            layer_grid,
            embed_dims,
            time_dims,
        } => cmd_sweep(common, windows, layer_grid, embed_dims, time_dims),
        Command::Inspect(c) => cmd_inspect(c),
        Command::Synth {
            out,
            entities,
            relations,
            snapshots,
            periodic,
            chains,
            rules,
            noise,
            seed,
            anonymous,
        } => {
            let cfg = SynthConfig {
                entities: *entities,
                relations: *relations,
                snapshots: *snapshots,
                periodic: *periodic,
                chains_per_snapshot: *chains,
                rules: *rules,
                noise_per_snapshot: *noise,
                seed: *seed,
                named: !anonymous,
                ..SynthConfig::default()
            };
            write_dataset(&generate(&cfg)?, out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
