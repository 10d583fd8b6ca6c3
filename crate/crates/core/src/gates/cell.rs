use rand::Rng;
use serde::{Deserialize, Serialize};

use super::continuous_bernoulli::ContinuousBernoulli;
use crate::error::{NfsError, Result};
use crate::modality::Modality;
use crate::scalar::Scalar;
use crate::tensor::{GateLevel, Tape, Tensor};

/// How gates are drawn during search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSampler {
    /// Continuous Bernoulli draw binarized at 0.5.
    #[default]
    ContinuousBernoulli,
    /// Plain discrete Bernoulli draw with success probability `sigmoid(P)`.
    Bernoulli,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Deterministic derivation rule: keep iff probability >= 0.5.
pub fn derive_threshold<T: Scalar>(prob: T) -> T {
    if prob >= T::lit(0.5) {
        T::one()
    } else {
        T::zero()
    }
}

/// Gate parameters of one (stage, level, modality) triple.
#[derive(Clone, Debug)]
pub struct SearchCell<T: Scalar> {
    pub level: GateLevel,
    pub modality: Modality,
    pub stage_index: usize,
    param: Tensor<T>,
    last_sampled: Option<Vec<T>>,
    derived: Option<Vec<T>>,
}

impl<T: Scalar> SearchCell<T> {
    /// `shape` is `[C]` for channel cells and `[C,H,W]` for pixel cells.
    /// Parameters are drawn i.i.d. uniform on `[init_low, init_high]`.
    pub fn new<R: Rng + ?Sized>(
        level: GateLevel,
        modality: Modality,
        stage_index: usize,
        shape: &[usize],
        init: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        let expected_rank = match level {
            GateLevel::Channel => 1,
            GateLevel::Pixel => 3,
        };
        if shape.len() != expected_rank {
            return Err(NfsError::shape("search_cell", "parameter rank", expected_rank, shape.len()));
        }
        let numel = shape.iter().product();
        let values = (0..numel)
            .map(|_| T::lit(init.0 + (init.1 - init.0) * rng.random::<f64>()))
            .collect();
        Self::from_param(level, modality, stage_index, Tensor::from_vec(shape, values)?)
    }

    pub fn from_param(level: GateLevel, modality: Modality, stage_index: usize, param: Tensor<T>) -> Result<Self> {
        Ok(Self {
            level,
            modality,
            stage_index,
            param: param.with_requires_grad(true),
            last_sampled: None,
            derived: None,
        })
    }

    pub fn param(&self) -> &Tensor<T> {
        &self.param
    }

    pub fn param_mut(&mut self) -> &mut Tensor<T> {
        &mut self.param
    }

    pub fn shape(&self) -> &[usize] {
        self.param.shape()
    }

    pub fn is_frozen(&self) -> bool {
        self.derived.is_some()
    }

    pub fn name(&self) -> String {
        let level = match self.level {
            GateLevel::Channel => "channel",
            GateLevel::Pixel => "pixel",
        };
        format!("stage{}.{}.{}", self.stage_index + 1, self.modality, level)
    }

    /// Activated probabilities `sigmoid(P)`.
    pub fn probabilities(&self) -> Vec<T> {
        self.param.values().iter().map(|&p| sigmoid(p)).collect()
    }

    /// Draws fresh binary gates and stores them as this pass's forward state.
    pub fn sample_gates<R: Rng + ?Sized>(&mut self, sampler: GateSampler, rng: &mut R) -> Result<&[T]> {
        let half = T::lit(0.5);
        let gates = self
            .probabilities()
            .into_iter()
            .map(|p| {
                let on = match sampler {
                    GateSampler::ContinuousBernoulli => {
                        let p = p.max(T::min_positive_value()).min(T::one() - T::epsilon());
                        ContinuousBernoulli::new(p).map(|d| d.sample(rng) >= half)
                    }
                    GateSampler::Bernoulli => Ok(T::lit(rng.random::<f64>()) < p),
                }?;
                Ok(if on { T::one() } else { T::zero() })
            })
            .collect::<Result<Vec<T>>>()?;
        Ok(self.last_sampled.insert(gates))
    }

    pub fn last_sampled(&self) -> Option<&[T]> {
        self.last_sampled.as_deref()
    }

    /// Straight-through gradient of the loss with respect to `P` given the
    /// gradient with respect to the last sampled gates.
    pub fn ste_backward(&self, grad_wrt_gate: &[T]) -> Result<Vec<T>> {
        if self.last_sampled.is_none() {
            return Err(NfsError::MissingForwardState);
        }
        if grad_wrt_gate.len() != self.param.numel() {
            return Err(NfsError::shape("ste_backward", "gradient", self.param.numel(), grad_wrt_gate.len()));
        }
        let slope: Vec<T> = self.probabilities().into_iter().map(|p| p * (T::one() - p)).collect();
        Ok(crate::tensor::ste_backward(grad_wrt_gate, &slope))
    }

    /// Thresholds the probabilities into fixed gates and freezes the cell.
    pub fn derive_gates(&mut self) -> &[T] {
        let gates = self.probabilities().into_iter().map(derive_threshold).collect();
        self.param.set_requires_grad(false);
        self.derived.insert(gates)
    }

    pub fn derived(&self) -> Option<&[T]> {
        self.derived.as_deref()
    }

    /// Installs externally derived gates (for retraining from a gate file).
    pub fn set_derived(&mut self, gates: Vec<T>) -> Result<()> {
        if gates.len() != self.param.numel() {
            return Err(NfsError::shape("set_derived", "gates", self.param.numel(), gates.len()));
        }
        if gates.iter().any(|&g| g != T::zero() && g != T::one()) {
            return Err(NfsError::Config(format!("{}: gates must be binary", self.name())));
        }
        self.param.set_requires_grad(false);
        self.derived = Some(gates);
        Ok(())
    }

    /// Fraction of active gates in the derived set, or in the last sample.
    pub fn active_fraction(&self) -> Option<f64> {
        let gates = self.derived.as_deref().or(self.last_sampled.as_deref())?;
        let on = gates.iter().filter(|&&g| g > T::zero()).count();
        Some(on as f64 / gates.len() as f64)
    }

    /// Fraction of probabilities at or above 0.5.
    pub fn probable_fraction(&self) -> f64 {
        let probs = self.probabilities();
        probs.iter().filter(|&&p| p >= T::lit(0.5)).count() as f64 / probs.len() as f64
    }
}

/// The four cells (2 levels x 2 modalities) of one searched stage.
#[derive(Clone, Debug)]
pub struct StageCells<T: Scalar> {
    pub stage_index: usize,
    /// Indexed by [`Modality::index`].
    pub channel: [SearchCell<T>; 2],
    pub pixel: [SearchCell<T>; 2],
}

impl<T: Scalar> StageCells<T> {
    pub fn new<R: Rng + ?Sized>(
        stage_index: usize,
        channels: usize,
        height: usize,
        width: usize,
        init: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        let mut cell = |level, modality, shape: &[usize]| SearchCell::new(level, modality, stage_index, shape, init, rng);
        let channel = [
            cell(GateLevel::Channel, Modality::Rgb, &[channels])?,
            cell(GateLevel::Channel, Modality::Ir, &[channels])?,
        ];
        let pixel = [
            cell(GateLevel::Pixel, Modality::Rgb, &[channels, height, width])?,
            cell(GateLevel::Pixel, Modality::Ir, &[channels, height, width])?,
        ];
        Ok(Self {
            stage_index,
            channel,
            pixel,
        })
    }

    pub fn cells(&self) -> impl Iterator<Item = &SearchCell<T>> {
        self.channel.iter().chain(self.pixel.iter())
    }

    pub fn cells_mut(&mut self) -> impl Iterator<Item = &mut SearchCell<T>> {
        self.channel.iter_mut().chain(self.pixel.iter_mut())
    }
}

/// Masks `features [B,C,H,W]` with each row's modality gates: channel gate
/// first, then pixel gate. `channel_gates[m]` is `[C]`, `pixel_gates[m]` is
/// `[C,H,W]` for `m` in [`Modality::index`] order.
pub fn apply_gates<T: Scalar>(
    features: &Tensor<T>,
    channel_gates: [&Tensor<T>; 2],
    pixel_gates: [&Tensor<T>; 2],
    rows: &[Modality],
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let cg = channel_gates.map(|g| tape.constant(g.clone()));
    let pg = pixel_gates.map(|g| tape.constant(g.clone()));
    let y = tape.gate_mask(x, cg, rows, GateLevel::Channel)?;
    let y = tape.gate_mask(y, pg, rows, GateLevel::Pixel)?;
    Ok(tape.tensor(y).clone())
}
