use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{NfsError, Result};
use crate::modality::Modality;

/// Learning rate at `epoch`: linear warm-up from `base/10` at epoch 0 to
/// `base` at epoch 9, then steps down to `0.1 * base` at epoch 16 and
/// `0.01 * base` at epoch 50.
pub fn lr_schedule(epoch: usize, base_lr: f64) -> f64 {
    match epoch {
        0..=9 => base_lr * (0.1 + 0.9 * epoch as f64 / 9.0),
        10..=15 => base_lr,
        16..=49 => 0.1 * base_lr,
        _ => 0.01 * base_lr,
    }
}

/// Disjoint halves of the training images used by the search.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub search_train: Vec<usize>,
    pub search_val: Vec<usize>,
}

/// Per identity and modality, holds out `max(1, n - round(0.8 n))` images
/// for validation, chosen by a seeded shuffle.
pub fn split_search_sets(dataset: &Dataset, indices: &[usize], seed: u64) -> Result<SplitSpec> {
    let pool = crate::data::SamplePool::new(dataset, indices);
    let mut search_train = Vec::new();
    let mut search_val = Vec::new();
    for id in pool.ids() {
        for m in Modality::ALL {
            let mut own = pool.samples(id, m).to_vec();
            let n = own.len();
            if n < 2 {
                return Err(NfsError::Insufficient(format!(
                    "identity {id} has {n} {m} image(s); the split needs at least 2"
                )));
            }
            let n_val = (n - (0.8 * n as f64).round() as usize).max(1);
            let key = [seed, u64::from(id), m.index() as u64];
            own.shuffle(&mut crate::data::split_stream(&key));
            search_val.extend_from_slice(&own[..n_val]);
            search_train.extend_from_slice(&own[n_val..]);
        }
    }
    search_train.sort_unstable();
    search_val.sort_unstable();
    Ok(SplitSpec {
        seed,
        search_train,
        search_val,
    })
}

/// SGD with heavy-ball momentum and coupled weight decay:
/// `v = mu v + (g + wd w)`, `w -= lr v`.
#[derive(Clone, Debug, Default)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// The decay-augmented gradient the step would use.
    pub fn effective_grad(&self, weights: &[f64], grad: &[f64]) -> Vec<f64> {
        weights.iter().zip(grad).map(|(w, g)| g + self.weight_decay * w).collect()
    }

    pub fn step(&mut self, weights: &mut [f64], grad: &[f64], lr: f64) {
        if self.velocity.len() != weights.len() {
            self.velocity = vec![0.0; weights.len()];
        }
        for ((w, v), g) in weights.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g + self.weight_decay * *w;
            *w -= lr * *v;
        }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}
