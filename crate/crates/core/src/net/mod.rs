//! Two-stream network: a modality-specific stem per input type, shared
//! convolution stages (optionally carrying search cells), global average
//! pooling, a shared batch-norm neck that produces the embedding, and an
//! identity classifier used only while training.
//!
//! A forward pass records onto a fresh [`Tape`]; after the caller runs
//! `backward` on a loss built from that tape, [`TwoStreamNet::absorb_gradients`]
//! moves the gradients onto the stored parameters.

mod config;
mod params;

pub use config::{NetConfig, StageShape};
pub use params::{ParamStore, RunningStats};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NfsError, Result};
use crate::gates::{DerivedGates, SearchCell, StageCells};
use crate::modality::Modality;
use crate::scalar::Scalar;
use crate::tensor::{BatchStats, BnMode, CheckpointEntry, GateLevel, Tape, Tensor, Var};

/// How a forward pass treats gates and batch-norm statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Fresh stochastic gates per pass, batch statistics, logits.
    Search,
    /// Gates take their probability values instead of a binary draw. The
    /// straight-through gradient is then the exact derivative, which makes
    /// this the mode used for finite-difference checks.
    Relaxed,
    /// Derived gates, batch statistics, logits.
    Train,
    /// Derived gates, running statistics, no logits.
    Eval,
}

/// Which parameter groups should receive gradients from a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub weights: bool,
    pub gates: bool,
}

impl GradRequest {
    pub const NONE: Self = Self {
        weights: false,
        gates: false,
    };
    pub const WEIGHTS: Self = Self {
        weights: true,
        gates: false,
    };
    pub const GATES: Self = Self {
        weights: false,
        gates: true,
    };
    pub const ALL: Self = Self {
        weights: true,
        gates: true,
    };
}

/// Images grouped by modality. Rows are ordered rgb first, then ir, in
/// everything downstream of the stems.
#[derive(Clone, Debug)]
pub struct ImageBatch<T: Scalar> {
    images: [Option<Tensor<T>>; 2],
    ids: [Vec<u32>; 2],
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(rgb: Option<(Tensor<T>, Vec<u32>)>, ir: Option<(Tensor<T>, Vec<u32>)>) -> Result<Self> {
        let mut images = [None, None];
        let mut ids = [Vec::new(), Vec::new()];
        for (modality, part) in Modality::ALL.into_iter().zip([rgb, ir]) {
            let Some((tensor, labels)) = part else { continue };
            let shape = tensor.shape();
            if shape.len() != 4 {
                return Err(NfsError::shape("image_batch", "rank", 4, shape.len()));
            }
            if shape[1] != modality.channels() {
                return Err(NfsError::Modality(format!(
                    "{modality} rows need {} channel(s), got {}",
                    modality.channels(),
                    shape[1]
                )));
            }
            if shape[0] != labels.len() {
                return Err(NfsError::shape("image_batch", "identities", shape[0], labels.len()));
            }
            images[modality.index()] = Some(tensor);
            ids[modality.index()] = labels;
        }
        if images.iter().all(Option::is_none) {
            return Err(NfsError::DegenerateBatch {
                op: "image_batch",
                reason: "no images".into(),
            });
        }
        Ok(Self { images, ids })
    }

    pub fn single(modality: Modality, images: Tensor<T>, ids: Vec<u32>) -> Result<Self> {
        match modality {
            Modality::Rgb => Self::new(Some((images, ids)), None),
            Modality::Ir => Self::new(None, Some((images, ids))),
        }
    }

    pub fn images(&self, modality: Modality) -> Option<&Tensor<T>> {
        self.images[modality.index()].as_ref()
    }

    pub fn len(&self) -> usize {
        self.ids.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modalities(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .flat_map(|m| std::iter::repeat_n(m, self.ids[m.index()].len()))
            .collect()
    }

    pub fn identities(&self) -> Vec<u32> {
        self.ids.concat()
    }
}

/// Post-neck embeddings with their row metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch<T: Scalar> {
    pub vectors: Tensor<T>,
    pub identities: Vec<u32>,
    pub modalities: Vec<Modality>,
}

/// One recorded forward pass.
pub struct ForwardPass<T: Scalar> {
    pub tape: Tape<T>,
    pub embedding: Var,
    pub logits: Option<Var>,
    pub identities: Vec<u32>,
    pub modalities: Vec<Modality>,
    weight_vars: Vec<(usize, Var)>,
    gate_vars: Vec<(usize, GateLevel, Modality, Var)>,
    bn_stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn embeddings(&self) -> EmbeddingBatch<T> {
        EmbeddingBatch {
            vectors: self.tape.tensor(self.embedding).clone(),
            identities: self.identities.clone(),
            modalities: self.modalities.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    running: usize,
    stride: usize,
}

#[derive(Clone, Debug)]
pub struct TwoStreamNet<T: Scalar> {
    config: NetConfig,
    weights: ParamStore<T>,
    running: Vec<RunningStats<T>>,
    stems: [ConvBlock; 2],
    stages: Vec<ConvBlock>,
    neck: (usize, usize, usize),
    classifier: (usize, usize),
    cells: Vec<Option<StageCells<T>>>,
}

fn kaiming<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let values = (0..shape.iter().product()).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::from_vec(shape, values).expect("shape matches count")
}

impl<T: Scalar> TwoStreamNet<T> {
    /// Fresh network: Kaiming-normal conv and classifier weights, zero
    /// biases, unit batch-norm scale, and search cells on the configured
    /// stages.
    pub fn init_params<R: Rng + ?Sized>(config: &NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let shapes = config.stage_shapes()?;
        let k = config.kernel;
        let mut weights = ParamStore::new();
        let mut running = Vec::new();
        let mut block = |name: String, c_in: usize, c_out: usize, stride: usize, rng: &mut R| {
            let weight = weights.push(format!("{name}.conv.weight"), kaiming(&[c_out, c_in, k, k], c_in * k * k, rng));
            let bias = weights.push(format!("{name}.conv.bias"), Tensor::zeros(&[c_out]));
            let gamma = weights.push(format!("{name}.bn.gamma"), Tensor::full(&[c_out], T::one()));
            let beta = weights.push(format!("{name}.bn.beta"), Tensor::zeros(&[c_out]));
            running.push(RunningStats::new(format!("{name}.bn"), c_out));
            ConvBlock {
                weight,
                bias,
                gamma,
                beta,
                running: running.len() - 1,
                stride,
            }
        };
        let stems = [Modality::Rgb, Modality::Ir]
            .map(|m| block(format!("stem.{m}"), m.channels(), config.stem_width, 1, rng));
        let mut c_in = config.stem_width;
        let mut stages = Vec::new();
        for (i, s) in shapes.iter().enumerate() {
            stages.push(block(format!("stage{}", i + 1), c_in, s.channels, s.stride, rng));
            c_in = s.channels;
        }
        let dim = config.embedding_dim();
        let neck_gamma = weights.push("neck.bn.gamma", Tensor::full(&[dim], T::one()));
        let neck_beta = weights.push("neck.bn.beta", Tensor::zeros(&[dim]));
        running.push(RunningStats::new("neck.bn", dim));
        let neck = (neck_gamma, neck_beta, running.len() - 1);
        let cls_w = weights.push(
            "classifier.weight",
            kaiming(&[dim, config.num_identities], dim, rng),
        );
        let cls_b = weights.push("classifier.bias", Tensor::zeros(&[config.num_identities]));

        let mut cells = Vec::with_capacity(shapes.len());
        for (i, s) in shapes.iter().enumerate() {
            cells.push(if config.is_searched(i) {
                Some(StageCells::new(i, s.channels, s.height, s.width, config.gate_init, rng)?)
            } else {
                None
            });
        }
        Ok(Self {
            config: config.clone(),
            weights,
            running,
            stems,
            stages,
            neck,
            classifier: (cls_w, cls_b),
            cells,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    pub fn weights(&self) -> &ParamStore<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.weights
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn stage_cells(&self) -> impl Iterator<Item = &StageCells<T>> {
        self.cells.iter().flatten()
    }

    pub fn search_cells(&self) -> impl Iterator<Item = &SearchCell<T>> {
        self.stage_cells().flat_map(StageCells::cells)
    }

    pub fn search_cells_mut(&mut self) -> impl Iterator<Item = &mut SearchCell<T>> {
        self.cells.iter_mut().flatten().flat_map(StageCells::cells_mut)
    }

    pub fn has_search_cells(&self) -> bool {
        self.cells.iter().any(Option::is_some)
    }

    /// Replaces weights and running statistics with a fresh draw, leaving
    /// search cells untouched.
    /// Draws exactly as many values as a network without search cells, so
    /// a gated and an ungated network see the same stream afterwards.
    pub fn reinit_weights<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let weights_only = NetConfig {
            searched_stages: Vec::new(),
            ..self.config.clone()
        };
        let fresh = Self::init_params(&weights_only, rng)?;
        self.weights = fresh.weights;
        self.running = fresh.running;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.weights.zero_grad();
        for cell in self.search_cells_mut() {
            cell.param_mut().zero_grad();
        }
    }

    /// Freezes every cell at its thresholded probabilities.
    pub fn derive_gates(&mut self) -> DerivedGates {
        for cell in self.search_cells_mut() {
            cell.derive_gates();
        }
        self.derived_gates().expect("all cells derived")
    }

    /// Derived gates of every cell, or `None` if any cell is still searching.
    pub fn derived_gates(&self) -> Option<DerivedGates> {
        let mut out = DerivedGates::default();
        for cell in self.search_cells() {
            let gates = cell.derived()?;
            out.cells.insert(
                cell.name(),
                (cell.shape().to_vec(), gates.iter().map(|g| g.to_f64_lossy()).collect()),
            );
        }
        Some(out)
    }

    /// Installs derived gates for every cell; the gate set must cover
    /// exactly the searched cells.
    pub fn set_derived_gates(&mut self, gates: &DerivedGates) -> Result<()> {
        let expected: Vec<String> = self.search_cells().map(SearchCell::name).collect();
        let provided: Vec<&String> = gates.cells.keys().collect();
        let mut sorted = expected.clone();
        sorted.sort();
        if provided.len() != sorted.len() || provided.iter().zip(&sorted).any(|(a, b)| *a != b) {
            return Err(NfsError::Config(format!(
                "gate file covers {provided:?}, network searches {sorted:?}"
            )));
        }
        for cell in self.search_cells_mut() {
            let (shape, values) = &gates.cells[&cell.name()];
            if shape.as_slice() != cell.shape() {
                return Err(NfsError::shape("set_derived_gates", cell.name(), cell.shape(), shape));
            }
            cell.set_derived(values.iter().map(|&v| T::lit(v)).collect())?;
        }
        Ok(())
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        wv: &[Var],
        input: Var,
        b: &ConvBlock,
        mode: ForwardMode,
        stats: &mut Vec<(usize, BatchStats<T>)>,
    ) -> Result<Var> {
        let conv = tape.conv2d(input, wv[b.weight], wv[b.bias], b.stride, self.config.padding())?;
        let normed = self.norm(tape, conv, wv[b.gamma], wv[b.beta], b.running, mode, stats)?;
        Ok(tape.relu(normed))
    }

    #[allow(clippy::too_many_arguments)]
    fn norm(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        gamma: Var,
        beta: Var,
        running: usize,
        mode: ForwardMode,
        stats: &mut Vec<(usize, BatchStats<T>)>,
    ) -> Result<Var> {
        let bn_mode = match mode {
            ForwardMode::Eval => BnMode::Eval {
                mean: &self.running[running].mean,
                var: &self.running[running].var,
            },
            _ => BnMode::Train,
        };
        let (out, batch_stats) = tape.batch_norm(input, gamma, beta, bn_mode)?;
        if let Some(s) = batch_stats {
            stats.push((running, s));
        }
        Ok(out)
    }

    /// Records the gate tensors of one cell for this pass.
    fn gate_var<R: Rng + ?Sized>(
        cell: &mut SearchCell<T>,
        tape: &mut Tape<T>,
        mode: ForwardMode,
        want_grad: bool,
        rng: &mut R,
        sampler: crate::gates::GateSampler,
    ) -> Result<(Var, Option<Var>)> {
        let shape = cell.shape().to_vec();
        let stochastic = match (mode, cell.derived()) {
            (ForwardMode::Search | ForwardMode::Relaxed, None) => true,
            (_, Some(_)) => false,
            (_, None) => {
                return Err(NfsError::Config(format!(
                    "{} has no derived gates; run the search or load a gate file",
                    cell.name()
                )))
            }
        };
        if !stochastic {
            let gates = cell.derived().expect("checked above").to_vec();
            return Ok((tape.constant(Tensor::from_vec(&shape, gates)?), None));
        }
        let values = if mode == ForwardMode::Relaxed {
            cell.probabilities()
        } else {
            cell.sample_gates(sampler, rng)?.to_vec()
        };
        if want_grad {
            let p = tape.param(cell.param());
            Ok((tape.ste_gate(p, values)?, Some(p)))
        } else {
            Ok((tape.constant(Tensor::from_vec(&shape, values)?), None))
        }
    }

    /// Runs the network on `batch`. See [`ForwardMode`] for how gates and
    /// batch-norm behave in each mode.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        batch: &ImageBatch<T>,
        mode: ForwardMode,
        grads: GradRequest,
        rng: &mut R,
    ) -> Result<ForwardPass<T>> {
        let mut tape = Tape::new();
        let wv: Vec<Var> = self
            .weights
            .iter()
            .map(|(_, t)| if grads.weights { tape.param(t) } else { tape.constant(t.clone()) })
            .collect();
        let mut stats = Vec::new();

        let mut stem_out = Vec::with_capacity(2);
        for m in Modality::ALL {
            let Some(images) = batch.images(m) else { continue };
            let shape = images.shape();
            if shape[2] != self.config.input_height || shape[3] != self.config.input_width {
                return Err(NfsError::shape(
                    "forward",
                    "image size",
                    [self.config.input_height, self.config.input_width],
                    &shape[2..],
                ));
            }
            let x = tape.constant(images.clone());
            stem_out.push(self.block(&mut tape, &wv, x, &self.stems[m.index()], mode, &mut stats)?);
        }
        let mut x = if stem_out.len() == 1 {
            stem_out[0]
        } else {
            tape.concat_rows(&stem_out)?
        };

        let rows = batch.modalities();
        let mut gate_vars = Vec::new();
        let sampler = self.config.sampler;
        for i in 0..self.stages.len() {
            let stage = self.stages[i];
            x = self.block(&mut tape, &wv, x, &stage, mode, &mut stats)?;
            let Some(cells) = self.cells[i].as_mut() else { continue };
            for level in [GateLevel::Channel, GateLevel::Pixel] {
                let group = match level {
                    GateLevel::Channel => &mut cells.channel,
                    GateLevel::Pixel => &mut cells.pixel,
                };
                let mut vars = [x; 2];
                for (m, cell) in Modality::ALL.into_iter().zip(group.iter_mut()) {
                    let (var, tracked) = Self::gate_var(cell, &mut tape, mode, grads.gates, rng, sampler)?;
                    if let Some(param) = tracked {
                        gate_vars.push((i, level, m, param));
                    }
                    vars[m.index()] = var;
                }
                x = tape.gate_mask(x, vars, &rows, level)?;
            }
        }

        let pooled = tape.global_avg_pool(x)?;
        let (g, b, r) = self.neck;
        let embedding = self.norm(&mut tape, pooled, wv[g], wv[b], r, mode, &mut stats)?;
        let logits = if mode == ForwardMode::Eval {
            None
        } else {
            let (cw, cb) = self.classifier;
            Some(tape.affine(embedding, wv[cw], wv[cb])?)
        };
        let weight_vars = if grads.weights {
            wv.into_iter().enumerate().collect()
        } else {
            Vec::new()
        };
        Ok(ForwardPass {
            tape,
            embedding,
            logits,
            identities: batch.identities(),
            modalities: rows,
            weight_vars,
            gate_vars,
            bn_stats: stats,
        })
    }

    /// Adds the gradients recorded on `pass.tape` into the stored weights
    /// and gate parameters that the pass tracked.
    pub fn absorb_gradients(&mut self, pass: &ForwardPass<T>) -> Result<()> {
        for &(idx, var) in &pass.weight_vars {
            pass.tape.accumulate_into(var, self.weights.get_mut(idx))?;
        }
        for &(stage, level, m, param_var) in &pass.gate_vars {
            let cells = self.cells[stage].as_mut().ok_or(NfsError::MissingForwardState)?;
            let cell = match level {
                GateLevel::Channel => &mut cells.channel[m.index()],
                GateLevel::Pixel => &mut cells.pixel[m.index()],
            };
            pass.tape.accumulate_into(param_var, cell.param_mut())?;
        }
        Ok(())
    }

    /// Folds the pass's batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, pass: &ForwardPass<T>) {
        let momentum = self.config.bn_momentum;
        for (idx, s) in &pass.bn_stats {
            self.running[*idx].update(s, momentum);
        }
    }

    /// Eval-mode embeddings.
    pub fn embed(&mut self, batch: &ImageBatch<T>) -> Result<EmbeddingBatch<T>> {
        // eval mode never draws from the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(batch, ForwardMode::Eval, GradRequest::NONE, &mut rng)?.embeddings())
    }

    /// Every weight, running statistic, gate parameter and derived gate.
    pub fn to_checkpoint(&self) -> Vec<CheckpointEntry> {
        let entry = |name: String, shape: &[usize], values: &[T]| CheckpointEntry {
            name,
            shape: shape.to_vec(),
            values: values.iter().map(|v| v.to_f64_lossy()).collect(),
        };
        let mut out: Vec<CheckpointEntry> = self
            .weights
            .iter()
            .map(|(n, t)| entry(n.to_string(), t.shape(), t.values()))
            .collect();
        for r in &self.running {
            out.push(entry(format!("{}.running_mean", r.name), &[r.mean.len()], &r.mean));
            out.push(entry(format!("{}.running_var", r.name), &[r.var.len()], &r.var));
        }
        for cell in self.search_cells() {
            out.push(entry(format!("{}.logits", cell.name()), cell.shape(), cell.param().values()));
            if let Some(g) = cell.derived() {
                out.push(entry(format!("{}.derived", cell.name()), cell.shape(), g));
            }
        }
        out
    }

    /// Rebuilds a network from a checkpoint written by [`Self::to_checkpoint`].
    pub fn from_checkpoint(config: &NetConfig, entries: &[CheckpointEntry]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Self::init_params(config, &mut rng)?;
        let lookup = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let e = entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| NfsError::Config(format!("checkpoint lacks {name}")))?;
            if e.shape != shape {
                return Err(NfsError::shape("from_checkpoint", name, shape, &e.shape));
            }
            Ok(e.values.iter().map(|&v| T::lit(v)).collect())
        };
        let mut known = 0;
        for i in 0..net.weights.len() {
            let name = net.weights.name(i).to_string();
            let t = net.weights.get_mut(i);
            let values = lookup(&name, t.shape())?;
            t.values_mut().copy_from_slice(&values);
            known += 1;
        }
        for r in &mut net.running {
            let n = r.mean.len();
            r.mean = lookup(&format!("{}.running_mean", r.name), &[n])?;
            r.var = lookup(&format!("{}.running_var", r.name), &[n])?;
            known += 2;
        }
        for cell in net.search_cells_mut() {
            let shape = cell.shape().to_vec();
            let logits = lookup(&format!("{}.logits", cell.name()), &shape)?;
            cell.param_mut().values_mut().copy_from_slice(&logits);
            known += 1;
            let derived_name = format!("{}.derived", cell.name());
            if entries.iter().any(|e| e.name == derived_name) {
                cell.set_derived(lookup(&derived_name, &shape)?)?;
                known += 1;
            }
        }
        if known != entries.len() {
            return Err(NfsError::Config(format!(
                "checkpoint has {} entries, network uses {known}",
                entries.len()
            )));
        }
        Ok(net)
    }
}
