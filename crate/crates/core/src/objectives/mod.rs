//! Loss stack: identity cross-entropy, weighted-regularization triplet,
//! cross-modality pairing with a margin contrastive loss, and their
//! weighted total.
//!
//! Each loss is a pure kernel returning its value together with the
//! gradient with respect to its tensor input, plus a thin tape wrapper.

mod contrastive;
mod cross_entropy;
mod wrt;

pub use contrastive::{contrastive_kernel, contrastive_loss, pair_up, ContrastiveConfig, CrossModalPair, CrossModalPairSet};
pub use cross_entropy::{cross_entropy_kernel, id_loss};
pub use wrt::{wrt_kernel, wrt_triplet};

use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// `l_id + l_tri + lambda * l_c`. With `l_c = None` the contrastive term is absent.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    l_id: Var,
    l_tri: Var,
    l_c: Option<Var>,
    config: &ContrastiveConfig,
) -> crate::Result<Var> {
    let baseline = tape.add(l_id, l_tri)?;
    match l_c {
        Some(l_c) if config.lambda_weight != 0.0 => {
            let weighted = tape.scale(l_c, T::lit(config.lambda_weight));
            tape.add(baseline, weighted)
        }
        _ => Ok(baseline),
    }
}

/// Euclidean distance with the square clamped away from zero; returns the
/// distance and whether the clamp was active (zero gradient).
pub(crate) fn clamped_distance<T: Scalar>(a: &[T], b: &[T]) -> (T, bool) {
    let sq: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    let floor = T::lit(1e-12);
    if sq < floor {
        (floor.sqrt(), true)
    } else {
        (sq.sqrt(), false)
    }
}
