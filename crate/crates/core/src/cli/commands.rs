use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::{sha256_bytes, write_json, RunManifest};
use super::{contrastive_enabled, parse_protocols, CommonArgs, EvalArgs, GenDataArgs, SearchArgs, TrainArgs};
use crate::bilevel::{write_loss_csv, EpochRecord, StepRecord};
use crate::data::{build_dataset_with, Dataset, DatasetConfig};
use crate::error::{NfsError, Result};
use crate::eval::{evaluate, write_rankings_csv};
use crate::gates::{export_stage_gates, gates_from_checkpoint, gates_to_checkpoint};
use crate::net::{NetConfig, TwoStreamNet};
use crate::pipeline::{search_phase, train_phase, RunConfig};
use crate::tensor::{read_checkpoint, write_checkpoint};
use crate::Real;

/// Written next to every model checkpoint so `eval` can rebuild the
/// network and the dataset it was trained against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub net: NetConfig,
    pub data: DatasetConfig,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    checkpoint.with_file_name(format!("{stem}.config.json"))
}

pub fn load_dataset(config: &DatasetConfig) -> Result<Dataset> {
    Ok(Dataset::render(build_dataset_with(config)?))
}

pub(crate) struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "gates", "logs", "reports"] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| NfsError::io(&dir, e))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, sub: &str, file: &str) -> PathBuf {
        self.root.join(sub).join(file)
    }
}

pub(crate) fn write_logs(
    layout: &Layout,
    manifest: &mut RunManifest,
    phase: &str,
    steps: &[StepRecord],
    epochs: &[EpochRecord],
) -> Result<()> {
    let csv = layout.path("logs", &format!("{phase}_loss.csv"));
    write_loss_csv(&csv, steps)?;
    manifest.record(&layout.root, &csv)?;
    let json = layout.path("logs", &format!("{phase}_epochs.json"));
    write_json(&json, epochs)?;
    manifest.record(&layout.root, &json)
}

pub(crate) fn save_model(
    layout: &Layout,
    manifest: &mut RunManifest,
    name: &str,
    net: &TwoStreamNet<Real>,
    data: &DatasetConfig,
) -> Result<PathBuf> {
    let ckpt = layout.path("checkpoints", &format!("{name}.nfs"));
    write_checkpoint(&ckpt, &net.to_checkpoint())?;
    manifest.record(&layout.root, &ckpt)?;
    let side = sidecar_path(&ckpt);
    write_json(
        &side,
        &ModelSidecar {
            net: net.config().clone(),
            data: data.clone(),
        },
    )?;
    manifest.record(&layout.root, &side)?;
    Ok(ckpt)
}

fn prepare(common: &CommonArgs) -> Result<(RunConfig, Dataset, Layout)> {
    let config = common.resolve()?;
    let dataset = load_dataset(&config.data)?;
    let layout = Layout::new(&common.out)?;
    Ok((config, dataset, layout))
}

pub fn search(args: &SearchArgs) -> Result<()> {
    let c = &args.common;
    let (config, dataset, layout) = prepare(c)?;
    let mut manifest = RunManifest::new("search", c.seed, &config, dataset.digest());
    let (mut net, split, outcome) = search_phase(&dataset, &config, contrastive_enabled(&config), c.seed)?;
    manifest.split_digest = Some(sha256_bytes(serde_json::to_string(&split)?.as_bytes()));

    let gates_file = layout.path("gates", "gates.nfs");
    gates_to_checkpoint(&gates_file, &outcome.derived)?;
    manifest.record(&layout.root, &gates_file)?;
    let gate_dir = layout.root.join("gates");
    for stage in net.stage_cells() {
        for path in export_stage_gates(&gate_dir, stage)? {
            manifest.record(&layout.root, &path)?;
        }
    }
    write_logs(&layout, &mut manifest, "search", &outcome.steps, &outcome.epochs)?;
    // The searched weights are discarded by retraining but kept for inspection.
    net.zero_grad();
    save_model(&layout, &mut manifest, "search", &net, &config.data)?;
    manifest.save(&layout.root)?;
    println!("searched stages {:?}; gates written to {}", outcome.derived.stages(), gates_file.display());
    for (name, (_, values)) in &outcome.derived.cells {
        let kept = values.iter().filter(|&&v| v == 1.0).count();
        println!("  {name}: {kept}/{} kept", values.len());
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let c = &args.common;
    let (config, dataset, layout) = prepare(c)?;
    let mut manifest = RunManifest::new("train", c.seed, &config, dataset.digest());
    let gates = match &args.gates {
        Some(path) => {
            let g = gates_from_checkpoint(path)?;
            if g.cells.is_empty() {
                return Err(NfsError::format(path, "gate file holds no cells"));
            }
            manifest.record_input("gates", path)?;
            Some(g)
        }
        None => None,
    };
    let (net, outcome) = train_phase(&dataset, &config, gates.as_ref(), contrastive_enabled(&config), c.seed)?;
    write_logs(&layout, &mut manifest, "train", &outcome.steps, &outcome.epochs)?;
    let ckpt = save_model(&layout, &mut manifest, "model", &net, &config.data)?;
    manifest.save(&layout.root)?;
    let last = outcome.epochs.last().map(|e| e.train.total).unwrap_or(f64::NAN);
    println!("trained {} epochs, final loss {last:.4}; checkpoint {}", outcome.epochs.len(), ckpt.display());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let c = &args.common;
    let protocols = parse_protocols(&args.protocol)?;
    let config = c.resolve()?;
    let layout = Layout::new(&c.out)?;
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| layout.path("checkpoints", "model.nfs"));
    let side_path = sidecar_path(&ckpt);
    let text = std::fs::read_to_string(&side_path).map_err(|e| NfsError::io(&side_path, e))?;
    let sidecar: ModelSidecar = serde_json::from_str(&text).map_err(|e| NfsError::format(&side_path, e.to_string()))?;
    let entries = read_checkpoint(&ckpt)?;
    let mut net: TwoStreamNet<Real> = TwoStreamNet::from_checkpoint(&sidecar.net, &entries).map_err(|e| match e {
        NfsError::Config(reason) | NfsError::Format { reason, .. } => NfsError::format(&ckpt, reason),
        other => other,
    })?;
    let dataset = load_dataset(&sidecar.data)?;

    let mut run_config = config.clone();
    run_config.data = sidecar.data.clone();
    run_config.net = sidecar.net.clone();
    let mut manifest = RunManifest::new("eval", c.seed, &run_config, dataset.digest());
    manifest.record_input("checkpoint", &ckpt)?;
    manifest.record_input("checkpoint_config", &side_path)?;
    for protocol in protocols {
        let (report, rankings, query, gallery) = evaluate(&mut net, &dataset, protocol, config.metric, c.seed)?;
        print!("{}", report.table());
        let tag = protocol.name();
        let json = layout.path("reports", &format!("eval_{tag}.json"));
        write_json(&json, &report)?;
        manifest.record(&layout.root, &json)?;
        let csv = layout.path("reports", &format!("rankings_{tag}.csv"));
        write_rankings_csv(&csv, &rankings, &query.identities, &gallery.identities, 20)?;
        manifest.record(&layout.root, &csv)?;
    }
    manifest.save(&layout.root)?;
    Ok(())
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let c = &args.common;
    let config = c.resolve()?;
    let dataset_manifest = build_dataset_with(&config.data)?;
    std::fs::create_dir_all(&c.out).map_err(|e| NfsError::io(&c.out, e))?;
    let dataset = Dataset::render(dataset_manifest.clone());
    let mut manifest = RunManifest::new("gen-data", c.seed, &config, dataset.digest());
    let path = c.out.join("data").join("dataset.json");
    write_json(&path, &dataset_manifest)?;
    manifest.record(&c.out, &path)?;
    if args.cache {
        let cache = c.out.join("data").join("images.nfs");
        dataset.write_cache(&cache)?;
        manifest.record(&c.out, &cache)?;
    }
    manifest.save(&c.out)?;
    println!(
        "{} images ({} train ids, {} test ids), digest {}",
        dataset.len(),
        config.data.n_train_ids,
        config.data.n_test_ids,
        dataset.digest()
    );
    Ok(())
}

