//! Modality-aware search gates: continuous Bernoulli relaxation, per-cell
//! sampling and derivation, masking, and export.

mod cell;
mod continuous_bernoulli;
mod export;

pub use cell::{apply_gates, derive_threshold, sigmoid, GateSampler, SearchCell, StageCells};
pub use continuous_bernoulli::{cb_log_density, cb_normalizer, cb_sample, ContinuousBernoulli};
pub use export::{export_stage_gates, gates_from_checkpoint, gates_to_checkpoint, write_pgm, DerivedGates};
pub use crate::tensor::GateLevel;
