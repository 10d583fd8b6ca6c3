//! `nfs` command line: `search`, `train`, `eval`, `ablate` and `gen-data`.
//!
//! A run's configuration is layered: built-in defaults, then an optional
//! `--config` JSON file, then individual flags. Every command writes a
//! `manifest.json` in its output directory holding the resolved config,
//! all seeds, and SHA-256 digests of every artifact it wrote.

mod ablate;
mod commands;
mod manifest;

pub use ablate::{stage_subsets, AblationRow};
pub use manifest::{sha256_file, RunManifest};

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::bilevel::SearchOrder;
use crate::error::{NfsError, Result};
use crate::eval::EvalProtocol;
use crate::pipeline::{RunConfig, Variant};

#[derive(Debug, Parser)]
#[command(name = "nfs", version, about = "Neural feature search on a synthetic cross-modality benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split the training images and search gates on the chosen stages.
    Search(SearchArgs),
    /// Train weights from scratch, optionally with a derived gate file.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint on the test identities.
    Eval(EvalArgs),
    /// Run the four-variant ablation (or the stage-subset table) over seeds.
    Ablate(AblateArgs),
    /// Write the dataset manifest and optionally an image cache.
    GenData(GenDataArgs),
}

/// Flags shared by every command.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON file with a full or partial run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for initialization, splits, sampling and gate draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the synthetic benchmark.
    #[arg(long)]
    pub dataset_seed: Option<u64>,
    /// Comma-separated 1-based stages to search, e.g. `1,2,3`.
    #[arg(long)]
    pub stages: Option<String>,
    /// Weight of the contrastive term; 0 disables it.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Contrastive margin.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Where gate gradients are taken: `first` or `second`.
    #[arg(long)]
    pub order: Option<SearchOrder>,
    /// Epochs of the bilevel gate search.
    #[arg(long)]
    pub search_epochs: Option<usize>,
    /// Epochs of retraining from scratch.
    #[arg(long)]
    pub retrain_epochs: Option<usize>,
    /// Number of training identities.
    #[arg(long)]
    pub train_ids: Option<u32>,
    /// Number of test identities.
    #[arg(long)]
    pub test_ids: Option<u32>,
    /// Images per identity in each modality.
    #[arg(long)]
    pub images_per_modality: Option<u32>,
    /// Output directory.
    #[arg(long, default_value = "nfs-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Derived gate file written by `nfs search`; absent trains the baseline.
    #[arg(long)]
    pub gates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to evaluate; defaults to `<out>/checkpoints/model.nfs`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `visible-to-infrared`, `infrared-to-visible` or `both`.
    #[arg(long, default_value = "both")]
    pub protocol: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: String,
    /// Comma-separated variants among B, B+N, B+C, B+N+C.
    #[arg(long, default_value = "B,B+N,B+C,B+N+C")]
    pub variants: String,
    /// Instead of the variant table, search every non-empty subset of the
    /// shared stages with the full objective.
    #[arg(long)]
    pub stage_table: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Also write every rendered image to `<out>/data/images.nfs`.
    #[arg(long)]
    pub cache: bool,
}

pub fn parse_list<T: std::str::FromStr>(what: &str, text: &str) -> Result<Vec<T>> {
    let items: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(NfsError::Config(format!("empty {what} list")));
    }
    items
        .into_iter()
        .map(|s| s.parse().map_err(|_| NfsError::Config(format!("bad {what} entry {s:?}"))))
        .collect()
}

impl CommonArgs {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| NfsError::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| NfsError::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.dataset_seed {
            cfg.data.seed = s;
        }
        if let Some(stages) = &self.stages {
            cfg.net.searched_stages = parse_list("stage", stages)?;
        }
        if let Some(l) = self.lambda {
            cfg.objective.contrastive.lambda_weight = l;
        }
        if let Some(m) = self.margin {
            cfg.objective.contrastive.margin = m;
        }
        if let Some(o) = self.order {
            cfg.bilevel.order = o;
        }
        if let Some(e) = self.search_epochs {
            cfg.bilevel.search_epochs = e;
        }
        if let Some(e) = self.retrain_epochs {
            cfg.bilevel.retrain_epochs = e;
        }
        if let Some(n) = self.train_ids {
            cfg.data.n_train_ids = n;
        }
        if let Some(n) = self.test_ids {
            cfg.data.n_test_ids = n;
        }
        if let Some(n) = self.images_per_modality {
            cfg.data.images_per_modality = n;
        }
        cfg.resolved()
    }
}

/// The contrastive term is on iff its weight is positive.
pub fn contrastive_enabled(cfg: &RunConfig) -> bool {
    cfg.objective.contrastive.lambda_weight > 0.0
}

pub fn parse_protocols(text: &str) -> Result<Vec<EvalProtocol>> {
    if text == "both" {
        return Ok(vec![EvalProtocol::visible_to_infrared(), EvalProtocol::infrared_to_visible()]);
    }
    Ok(vec![text.parse()?])
}

pub fn parse_variants(text: &str) -> Result<Vec<Variant>> {
    parse_list("variant", text)
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search(a) => commands::search(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => ablate::ablate(&a),
        Command::GenData(a) => commands::gen_data(&a),
    }
}
