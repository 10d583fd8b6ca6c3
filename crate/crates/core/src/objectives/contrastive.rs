use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::clamped_distance;
use crate::error::{NfsError, Result};
use crate::modality::Modality;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    /// Distance beyond which mismatched pairs stop contributing.
    pub margin: f64,
    /// Weight of the contrastive term in the total objective.
    pub lambda_weight: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            margin: 15.0,
            lambda_weight: 0.04,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(NfsError::Config(format!("margin must be non-negative, got {}", self.margin)));
        }
        if !(self.lambda_weight >= 0.0 && self.lambda_weight.is_finite()) {
            return Err(NfsError::Config(format!(
                "lambda weight must be non-negative, got {}",
                self.lambda_weight
            )));
        }
        Ok(())
    }
}

/// Row indices into the embedding batch plus the match label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CrossModalPair {
    pub rgb: usize,
    pub ir: usize,
    pub label: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CrossModalPairSet {
    pub pairs: Vec<CrossModalPair>,
}

impl CrossModalPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.label).count()
    }
}

/// Draws a uniformly random perfect matching between the rgb rows and the
/// ir rows of a batch. Pairs come out in rgb-row order.
pub fn pair_up<R: Rng + ?Sized>(modalities: &[Modality], ids: &[u32], rng: &mut R) -> Result<CrossModalPairSet> {
    if modalities.len() != ids.len() {
        return Err(NfsError::shape("pair_up", "ids", modalities.len(), ids.len()));
    }
    let rgb: Vec<usize> = (0..ids.len()).filter(|&i| modalities[i] == Modality::Rgb).collect();
    let mut ir: Vec<usize> = (0..ids.len()).filter(|&i| modalities[i] == Modality::Ir).collect();
    if rgb.len() != ir.len() {
        return Err(NfsError::UnbalancedModality {
            rgb: rgb.len(),
            ir: ir.len(),
        });
    }
    ir.shuffle(rng);
    let pairs = rgb
        .into_iter()
        .zip(ir)
        .map(|(r, i)| CrossModalPair {
            rgb: r,
            ir: i,
            label: ids[r] == ids[i],
        })
        .collect();
    Ok(CrossModalPairSet { pairs })
}

/// Mean over pairs of `D^2` for matches and `max(0, margin - D)^2` for
/// mismatches, with the gradient wrt the `[B, dim]` embeddings.
pub fn contrastive_kernel<T: Scalar>(
    embeddings: &[T],
    dim: usize,
    pairs: &CrossModalPairSet,
    margin: f64,
) -> Result<(T, Vec<T>)> {
    if dim == 0 || !embeddings.len().is_multiple_of(dim) {
        return Err(NfsError::shape("contrastive_loss", "embeddings", dim, embeddings.len()));
    }
    let rows = embeddings.len() / dim;
    let mut grad = vec![T::zero(); embeddings.len()];
    if pairs.is_empty() {
        return Ok((T::zero(), grad));
    }
    let margin = T::lit(margin);
    let inv_n = T::one() / T::from_usize(pairs.len()).expect("pair count fits");
    let two = T::lit(2.0);
    let mut loss = T::zero();
    for pair in &pairs.pairs {
        for idx in [pair.rgb, pair.ir] {
            if idx >= rows {
                return Err(NfsError::shape("contrastive_loss", "pair index", rows, idx));
            }
        }
        let a = &embeddings[pair.rgb * dim..(pair.rgb + 1) * dim];
        let b = &embeddings[pair.ir * dim..(pair.ir + 1) * dim];
        // per-coordinate gradient factor on (a - b)
        let coeff = if pair.label {
            let sq: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
            loss += sq;
            two
        } else {
            let (d, clamped) = clamped_distance(a, b);
            let gap = margin - d;
            if gap <= T::zero() {
                continue;
            }
            loss += gap * gap;
            if clamped {
                continue;
            }
            -two * gap / d
        };
        for k in 0..dim {
            let g = coeff * (a[k] - b[k]) * inv_n;
            grad[pair.rgb * dim + k] += g;
            grad[pair.ir * dim + k] -= g;
        }
    }
    Ok((loss * inv_n, grad))
}

pub fn contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    pairs: &CrossModalPairSet,
    config: &ContrastiveConfig,
) -> Result<Var> {
    let shape = tape.shape(embeddings).to_vec();
    if shape.len() != 2 {
        return Err(NfsError::shape("contrastive_loss", "rank", 2, shape.len()));
    }
    let (value, grad) = contrastive_kernel(tape.value(embeddings), shape[1], pairs, config.margin)?;
    tape.scalar_fn(&[embeddings], value, vec![grad])
}
