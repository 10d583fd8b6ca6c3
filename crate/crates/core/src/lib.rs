//! Neural feature search: modality-aware binary search gates over the
//! shared stages of a two-stream network, searched by alternating
//! weight/gate descent and trained under a cross-modality contrastive
//! objective. Includes a synthetic cross-modality identity benchmark and a
//! CMC/mAP retrieval evaluator.
//!
//! Every numeric kernel is generic over [`Scalar`]; the pipeline runs on
//! `f64` through the aliases below.

pub mod bilevel;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gates;
pub mod modality;
pub mod net;
pub mod objectives;
pub mod pipeline;
pub mod scalar;
pub mod tensor;

pub use error::{NfsError, Result};
pub use modality::Modality;
pub use scalar::Scalar;

/// The pipeline's working precision.
pub type Real = f64;
pub type Tensor = tensor::Tensor<Real>;
pub type Tape = tensor::Tape<Real>;
