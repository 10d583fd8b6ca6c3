//! Alternating weight/gate optimization. Weights descend the training
//! loss on one split of the training images, gate parameters descend the
//! validation loss on the other; after a fixed budget the gates are
//! thresholded and the weights retrained from scratch on all training
//! images.

mod engine;
mod problem;
mod schedule;
#[cfg(test)]
mod tests;

pub use engine::{retrain, run_search, search_step, write_loss_csv, EpochRecord, SearchOutcome, StepRecord, TrainOutcome};
pub use problem::{objective, BilevelProblem, LossParts, NetProblem, ObjectiveConfig};
pub use schedule::{lr_schedule, split_search_sets, SgdMomentum, SplitSpec};

use serde::{Deserialize, Serialize};

use crate::error::{NfsError, Result};

/// Where the gate gradient is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchOrder {
    /// At the weights just updated by the training step.
    #[default]
    First,
    /// At a one-step lookahead `W - xi * grad_W L_train`.
    Second,
}

impl std::str::FromStr for SearchOrder {
    type Err = NfsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Self::First),
            "second" => Ok(Self::Second),
            other => Err(NfsError::Config(format!("order must be first or second, got {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilevelConfig {
    pub base_lr: f64,
    pub gate_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Lookahead step; `None` uses the current weight learning rate.
    pub xi: Option<f64>,
    pub order: SearchOrder,
    pub search_epochs: usize,
    pub retrain_epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Images per modality per identity in a batch.
    pub k: usize,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            gate_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            xi: None,
            order: SearchOrder::First,
            search_epochs: 40,
            retrain_epochs: 80,
            p: 8,
            k: 4,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("base_lr", self.base_lr),
            ("gate_lr", self.gate_lr),
            ("weight_decay", self.weight_decay),
            ("xi", self.xi.unwrap_or(0.0)),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(NfsError::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NfsError::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.p == 0 || self.k == 0 {
            return Err(NfsError::Config("batch needs p >= 1 and k >= 1".into()));
        }
        Ok(())
    }
}
