use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::problem::{BilevelProblem, LossParts, NetProblem, ObjectiveConfig};
use super::schedule::{lr_schedule, SgdMomentum, SplitSpec};
use super::{BilevelConfig, SearchOrder};
use crate::data::{Dataset, SamplePool};
use crate::error::{NfsError, Result};
use crate::gates::DerivedGates;
use crate::modality::Modality;
use crate::net::{ForwardMode, TwoStreamNet};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossParts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub train: LossParts,
    pub val: Option<LossParts>,
    /// Per stage, mean fraction of sampled gates that were on.
    pub stage_activation: BTreeMap<String, f64>,
    /// Per cell, fraction of probabilities at or above one half.
    pub gate_keep: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub derived: DerivedGates,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn ensure_finite(stage: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(NfsError::NonFinite {
            stage: stage.into(),
            detail: format!("entry {i} is {}", values[i]),
        }),
    }
}

/// One alternation: a momentum step on the weights from the training
/// loss, then a plain gradient step on the gate parameters from the
/// validation loss. Returns `(l_train, l_val)`.
pub fn search_step<P: BilevelProblem, R: Rng + ?Sized>(
    problem: &mut P,
    optimizer: &mut SgdMomentum,
    train_batch: &P::Batch,
    val_batch: &P::Batch,
    weight_lr: f64,
    config: &BilevelConfig,
    rng: &mut R,
) -> Result<(LossParts, LossParts)> {
    let (l_train, grad_w) = problem.train_grad(train_batch, true, rng)?;
    let mut weights = problem.weights();
    optimizer.step(&mut weights, &grad_w, weight_lr);
    ensure_finite("weight update", &weights)?;
    problem.set_weights(&weights);

    let (l_val, grad_p) = match config.order {
        SearchOrder::First => problem.val_grad(val_batch, rng)?,
        SearchOrder::Second => {
            let (_, grad_now) = problem.train_grad(train_batch, false, rng)?;
            let xi = config.xi.unwrap_or(weight_lr);
            let effective = optimizer.effective_grad(&weights, &grad_now);
            let lookahead: Vec<f64> = weights.iter().zip(&effective).map(|(w, g)| w - xi * g).collect();
            problem.set_weights(&lookahead);
            let result = problem.val_grad(val_batch, rng);
            problem.set_weights(&weights);
            result?
        }
    };
    if !l_val.is_finite() {
        return Err(NfsError::NonFinite {
            stage: "validation loss".into(),
            detail: format!("{l_val:?}"),
        });
    }
    let mut gates = problem.gates();
    for (p, g) in gates.iter_mut().zip(&grad_p) {
        *p -= config.gate_lr * g;
    }
    ensure_finite("gate update", &gates)?;
    problem.set_gates(&gates);
    Ok((l_train, l_val))
}

fn mean_parts(parts: &[LossParts]) -> LossParts {
    let n = parts.len().max(1) as f64;
    let sum = |f: fn(&LossParts) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossParts {
        l_id: sum(|p| p.l_id),
        l_tri: sum(|p| p.l_tri),
        l_c: sum(|p| p.l_c),
        total: sum(|p| p.total),
    }
}

fn annotate(err: NfsError, phase: &str, epoch: usize, step: usize) -> NfsError {
    match err {
        NfsError::NonFinite { stage, detail } => NfsError::NonFinite {
            stage: format!("{phase} epoch {epoch} step {step}: {stage}"),
            detail,
        },
        other => other,
    }
}

/// Smallest per-identity, per-modality image count in a pool.
fn min_images(pool: &SamplePool) -> usize {
    pool.ids()
        .flat_map(|id| Modality::ALL.map(|m| pool.samples(id, m).len()))
        .min()
        .unwrap_or(0)
}

/// Runs the search for `config.search_epochs` epochs of
/// `ceil(identities / p)` steps each, then freezes every cell at its
/// thresholded probabilities.
pub fn run_search<T: Scalar, R: Rng + ?Sized>(
    net: &mut TwoStreamNet<T>,
    dataset: &Dataset,
    split: &SplitSpec,
    objective: &ObjectiveConfig,
    config: &BilevelConfig,
    rng: &mut R,
) -> Result<SearchOutcome> {
    config.validate()?;
    let train_pool = SamplePool::new(dataset, &split.search_train);
    let val_pool = SamplePool::new(dataset, &split.search_val);
    // validation splits are small; never ask for more than every identity has
    let k_val = config.k.min(min_images(&val_pool));
    let p_val = config.p.min(val_pool.identity_count());
    let batches = train_pool.batches_per_epoch(config.p);
    let mut optimizer = SgdMomentum::new(config.momentum, config.weight_decay);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();

    for epoch in 0..config.search_epochs {
        let lr = lr_schedule(epoch, config.base_lr);
        let (mut train_parts, mut val_parts) = (Vec::new(), Vec::new());
        let mut activation: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for step in 0..batches {
            let train_batch = dataset.batch::<T>(&train_pool.sample_batch(config.p, config.k, rng)?)?;
            let val_batch = dataset.batch::<T>(&val_pool.sample_batch(p_val, k_val, rng)?)?;
            let mut problem = NetProblem::new(&mut *net, *objective, ForwardMode::Search);
            let (lt, lv) = search_step(&mut problem, &mut optimizer, &train_batch, &val_batch, lr, config, rng)
                .map_err(|e| annotate(e, "search", epoch, step))?;
            for cell in net.search_cells() {
                if let Some(f) = cell.active_fraction() {
                    let slot = activation.entry(format!("stage{}", cell.stage_index + 1)).or_default();
                    slot.0 += f;
                    slot.1 += 1;
                }
            }
            for (phase, parts) in [("search_train", lt), ("search_val", lv)] {
                steps.push(StepRecord {
                    phase: phase.into(),
                    epoch,
                    step,
                    lr,
                    loss: parts,
                });
            }
            train_parts.push(lt);
            val_parts.push(lv);
        }
        epochs.push(EpochRecord {
            phase: "search".into(),
            epoch,
            lr,
            train: mean_parts(&train_parts),
            val: Some(mean_parts(&val_parts)),
            stage_activation: activation.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            gate_keep: net.search_cells().map(|c| (c.name(), c.probable_fraction())).collect(),
        });
    }
    let derived = net.derive_gates();
    Ok(SearchOutcome {
        derived,
        steps,
        epochs,
    })
}

/// Reinitializes the weights and trains them with fixed gates on the
/// given training images.
pub fn retrain<T: Scalar, R: Rng + ?Sized>(
    net: &mut TwoStreamNet<T>,
    dataset: &Dataset,
    train_indices: &[usize],
    objective: &ObjectiveConfig,
    config: &BilevelConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    config.validate()?;
    if net.has_search_cells() && net.derived_gates().is_none() {
        return Err(NfsError::Config("retraining needs derived gates for every searched stage".into()));
    }
    net.reinit_weights(rng)?;
    let pool = SamplePool::new(dataset, train_indices);
    let batches = pool.batches_per_epoch(config.p);
    let mut optimizer = SgdMomentum::new(config.momentum, config.weight_decay);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 0..config.retrain_epochs {
        let lr = lr_schedule(epoch, config.base_lr);
        let mut parts = Vec::with_capacity(batches);
        for step in 0..batches {
            let batch = dataset.batch::<T>(&pool.sample_batch(config.p, config.k, rng)?)?;
            let mut problem = NetProblem::new(&mut *net, *objective, ForwardMode::Train);
            let (loss, grad) = problem
                .train_grad(&batch, true, rng)
                .map_err(|e| annotate(e, "retrain", epoch, step))?;
            let mut weights = problem.weights();
            optimizer.step(&mut weights, &grad, lr);
            ensure_finite("weight update", &weights).map_err(|e| annotate(e, "retrain", epoch, step))?;
            problem.set_weights(&weights);
            steps.push(StepRecord {
                phase: "retrain".into(),
                epoch,
                step,
                lr,
                loss,
            });
            parts.push(loss);
        }
        epochs.push(EpochRecord {
            phase: "retrain".into(),
            epoch,
            lr,
            train: mean_parts(&parts),
            val: None,
            stage_activation: BTreeMap::new(),
            gate_keep: BTreeMap::new(),
        });
    }
    Ok(TrainOutcome { steps, epochs })
}

/// `phase,epoch,step,l_id,l_tri,l_c,total,lr`, one row per step.
pub fn write_loss_csv(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut out = String::from("phase,epoch,step,l_id,l_tri,l_c,total,lr\n");
    for s in steps {
        let l = &s.loss;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.phase, s.epoch, s.step, l.l_id, l.l_tri, l.l_c, l.total, s.lr
        )
        .expect("string write");
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| NfsError::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| NfsError::io(path, e))
}
