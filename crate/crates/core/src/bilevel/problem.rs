use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NfsError, Result};
use crate::net::{ForwardMode, ForwardPass, GradRequest, ImageBatch, TwoStreamNet};
use crate::objectives::{contrastive_loss, id_loss, pair_up, total_loss, wrt_triplet, ContrastiveConfig};
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Loss terms of one evaluation. `l_c` is zero when the contrastive term
/// is disabled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_id: f64,
    pub l_tri: f64,
    pub l_c: f64,
    pub total: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        [self.l_id, self.l_tri, self.l_c, self.total].iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub use_contrastive: bool,
    pub contrastive: ContrastiveConfig,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            use_contrastive: true,
            contrastive: ContrastiveConfig::default(),
        }
    }
}

/// The two coupled problems the search alternates between, seen through
/// flat parameter vectors.
pub trait BilevelProblem {
    type Batch;

    fn weights(&self) -> Vec<f64>;
    fn set_weights(&mut self, weights: &[f64]);
    fn gates(&self) -> Vec<f64>;
    fn set_gates(&mut self, gates: &[f64]);

    /// Training loss and its gradient with respect to the weights. Gates
    /// are held fixed (sampled where stochastic). `track_stats` asks the
    /// problem to fold this pass into any running statistics.
    fn train_grad<R: Rng + ?Sized>(
        &mut self,
        batch: &Self::Batch,
        track_stats: bool,
        rng: &mut R,
    ) -> Result<(LossParts, Vec<f64>)>;

    /// Validation loss and its gradient with respect to the gate
    /// parameters, weights held fixed.
    fn val_grad<R: Rng + ?Sized>(&mut self, batch: &Self::Batch, rng: &mut R) -> Result<(LossParts, Vec<f64>)>;
}

/// Builds the total objective on a recorded forward pass.
pub fn objective<T: Scalar, R: Rng + ?Sized>(
    pass: &mut ForwardPass<T>,
    classes: usize,
    config: &ObjectiveConfig,
    rng: &mut R,
) -> Result<(Var, LossParts)> {
    let logits = pass.logits.ok_or(NfsError::MissingForwardState)?;
    let labels: Vec<usize> = pass.identities.iter().map(|&id| id as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(NfsError::LabelOutOfRange { label: bad, classes });
    }
    let tape = &mut pass.tape;
    let l_id = id_loss(tape, logits, &labels)?;
    let l_tri = wrt_triplet(tape, pass.embedding, &pass.identities)?;
    let l_c = if config.use_contrastive {
        let pairs = pair_up(&pass.modalities, &pass.identities, rng)?;
        Some(contrastive_loss(tape, pass.embedding, &pairs, &config.contrastive)?)
    } else {
        None
    };
    let total = total_loss(tape, l_id, l_tri, l_c, &config.contrastive)?;
    let read = |v: Var| tape.value(v)[0].to_f64_lossy();
    let parts = LossParts {
        l_id: read(l_id),
        l_tri: read(l_tri),
        l_c: l_c.map_or(0.0, read),
        total: read(total),
    };
    Ok((total, parts))
}

/// The network under the bilevel search. Weights are every entry of the
/// parameter store; gates are the logits of every cell not yet frozen.
pub struct NetProblem<'a, T: Scalar> {
    pub net: &'a mut TwoStreamNet<T>,
    pub objective: ObjectiveConfig,
    /// Forward mode of the training pass (`Search` during the search,
    /// `Train` during retraining).
    pub train_mode: ForwardMode,
}

impl<'a, T: Scalar> NetProblem<'a, T> {
    pub fn new(net: &'a mut TwoStreamNet<T>, objective: ObjectiveConfig, train_mode: ForwardMode) -> Self {
        Self {
            net,
            objective,
            train_mode,
        }
    }

    fn run<R: Rng + ?Sized>(
        &mut self,
        batch: &ImageBatch<T>,
        mode: ForwardMode,
        request: GradRequest,
        track_stats: bool,
        rng: &mut R,
    ) -> Result<LossParts> {
        self.net.zero_grad();
        let mut pass = self.net.forward(batch, mode, request, rng)?;
        let classes = self.net.config().num_identities;
        let (total, parts) = objective(&mut pass, classes, &self.objective, rng)?;
        if !parts.is_finite() {
            return Err(NfsError::NonFinite {
                stage: "loss".into(),
                detail: format!("{parts:?}"),
            });
        }
        pass.tape.backward(total)?;
        self.net.absorb_gradients(&pass)?;
        if track_stats {
            self.net.update_running_stats(&pass);
        }
        Ok(parts)
    }
}

impl<T: Scalar> BilevelProblem for NetProblem<'_, T> {
    type Batch = ImageBatch<T>;

    fn weights(&self) -> Vec<f64> {
        self.net
            .weights()
            .iter()
            .flat_map(|(_, t)| t.values().iter().map(|v| v.to_f64_lossy()))
            .collect()
    }

    fn set_weights(&mut self, weights: &[f64]) {
        let mut offset = 0;
        for t in self.net.weights_mut().tensors_mut() {
            let n = t.numel();
            for (dst, &src) in t.values_mut().iter_mut().zip(&weights[offset..offset + n]) {
                *dst = T::lit(src);
            }
            offset += n;
        }
    }

    fn gates(&self) -> Vec<f64> {
        self.net
            .search_cells()
            .filter(|c| !c.is_frozen())
            .flat_map(|c| c.param().values().iter().map(|v| v.to_f64_lossy()))
            .collect()
    }

    fn set_gates(&mut self, gates: &[f64]) {
        let mut offset = 0;
        for cell in self.net.search_cells_mut().filter(|c| !c.is_frozen()) {
            let t = cell.param_mut();
            let n = t.numel();
            for (dst, &src) in t.values_mut().iter_mut().zip(&gates[offset..offset + n]) {
                *dst = T::lit(src);
            }
            offset += n;
        }
    }

    fn train_grad<R: Rng + ?Sized>(
        &mut self,
        batch: &ImageBatch<T>,
        track_stats: bool,
        rng: &mut R,
    ) -> Result<(LossParts, Vec<f64>)> {
        let mode = self.train_mode;
        let parts = self.run(batch, mode, GradRequest::WEIGHTS, track_stats, rng)?;
        let grad = self
            .net
            .weights()
            .iter()
            .flat_map(|(_, t)| t.grad().iter().map(|v| v.to_f64_lossy()))
            .collect();
        Ok((parts, grad))
    }

    fn val_grad<R: Rng + ?Sized>(&mut self, batch: &ImageBatch<T>, rng: &mut R) -> Result<(LossParts, Vec<f64>)> {
        let parts = self.run(batch, ForwardMode::Search, GradRequest::GATES, false, rng)?;
        let grad = self
            .net
            .search_cells()
            .filter(|c| !c.is_frozen())
            .flat_map(|c| c.param().grad().iter().map(|v| v.to_f64_lossy()))
            .collect();
        Ok((parts, grad))
    }
}
