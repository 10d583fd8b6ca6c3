//! Weighted-regularization triplet loss. For every anchor, positive
//! distances are pooled with softmax weights over the distances themselves
//! and negative distances with softmax weights over their negations; the
//! anchor's loss is `softplus(pooled_pos - pooled_neg)`.

use super::clamped_distance;
use crate::error::{NfsError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn logistic<T: Scalar>(z: T) -> T {
    crate::gates::sigmoid(z)
}

/// Softmax-weighted mean of `dists` with logits `sign * d`; returns the
/// pooled value and the weights.
fn pooled<T: Scalar>(dists: &[T], sign: T) -> (T, Vec<T>) {
    let max = dists.iter().map(|&d| sign * d).fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = dists.iter().map(|&d| (sign * d - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    let weights: Vec<T> = exps.into_iter().map(|e| e / z).collect();
    let value = weights.iter().zip(dists).map(|(&w, &d)| w * d).sum();
    (value, weights)
}

/// Loss and gradient over `embeddings [B,dim]` with identity `labels`.
/// Every row acts as an anchor; positives exclude the anchor itself.
pub fn wrt_kernel<T: Scalar>(embeddings: &[T], dim: usize, labels: &[u32]) -> Result<(T, Vec<T>)> {
    let batch = labels.len();
    if dim == 0 || embeddings.len() != batch * dim {
        return Err(NfsError::shape("wrt_triplet", "embeddings", batch * dim, embeddings.len()));
    }
    let row = |i: usize| &embeddings[i * dim..(i + 1) * dim];
    let mut dist = vec![T::zero(); batch * batch];
    let mut clamped = vec![false; batch * batch];
    for i in 0..batch {
        for j in i + 1..batch {
            let (d, c) = clamped_distance(row(i), row(j));
            dist[i * batch + j] = d;
            dist[j * batch + i] = d;
            clamped[i * batch + j] = c;
            clamped[j * batch + i] = c;
        }
    }

    let inv_b = T::one() / T::from_usize(batch.max(1)).expect("batch fits");
    let mut loss = T::zero();
    // dL/d dist[i][j], accumulated per ordered pair
    let mut d_dist = vec![T::zero(); batch * batch];
    for i in 0..batch {
        let pos: Vec<usize> = (0..batch).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let neg: Vec<usize> = (0..batch).filter(|&j| labels[j] != labels[i]).collect();
        if pos.is_empty() || neg.is_empty() {
            return Err(NfsError::DegenerateBatch {
                op: "wrt_triplet",
                reason: format!(
                    "anchor {i} (identity {}) has {} positives and {} negatives",
                    labels[i],
                    pos.len(),
                    neg.len()
                ),
            });
        }
        let dp: Vec<T> = pos.iter().map(|&j| dist[i * batch + j]).collect();
        let dn: Vec<T> = neg.iter().map(|&j| dist[i * batch + j]).collect();
        let (far_pos, wp) = pooled(&dp, T::one());
        let (near_neg, wn) = pooled(&dn, -T::one());
        let z = far_pos - near_neg;
        loss += softplus(z);
        let dz = logistic(z) * inv_b;
        for (k, &j) in pos.iter().enumerate() {
            d_dist[i * batch + j] += dz * wp[k] * (T::one() + dp[k] - far_pos);
        }
        for (k, &j) in neg.iter().enumerate() {
            d_dist[i * batch + j] -= dz * wn[k] * (T::one() - dn[k] + near_neg);
        }
    }

    let mut grad = vec![T::zero(); embeddings.len()];
    for i in 0..batch {
        for j in 0..batch {
            let g = d_dist[i * batch + j];
            if i == j || g == T::zero() || clamped[i * batch + j] {
                continue;
            }
            let d = dist[i * batch + j];
            for k in 0..dim {
                let diff = (embeddings[i * dim + k] - embeddings[j * dim + k]) / d;
                grad[i * dim + k] += g * diff;
                grad[j * dim + k] -= g * diff;
            }
        }
    }
    Ok((loss * inv_b, grad))
}

pub fn wrt_triplet<T: Scalar>(tape: &mut Tape<T>, embeddings: Var, labels: &[u32]) -> Result<Var> {
    let shape = tape.shape(embeddings).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(NfsError::shape("wrt_triplet", "embeddings", [labels.len()], &shape));
    }
    let (value, grad) = wrt_kernel(tape.value(embeddings), shape[1], labels)?;
    tape.scalar_fn(&[embeddings], value, vec![grad])
}
