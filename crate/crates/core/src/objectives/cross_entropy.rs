use crate::error::{NfsError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Mean softmax cross-entropy of `logits [B,K]` (row-major) against class
/// indices, with its gradient.
pub fn cross_entropy_kernel<T: Scalar>(logits: &[T], classes: usize, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let batch = labels.len();
    if classes == 0 || logits.len() != batch * classes {
        return Err(NfsError::shape("id_loss", "logits", batch * classes, logits.len()));
    }
    let inv_b = T::one() / T::from_usize(batch).expect("batch fits");
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(NfsError::LabelOutOfRange { label, classes });
        }
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum_exp: T = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += lse - row[label];
        for (k, &z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            grad[b * classes + k] = (p - if k == label { T::one() } else { T::zero() }) * inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}

pub fn id_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(NfsError::shape("id_loss", "logits", [labels.len()], &shape));
    }
    let (value, grad) = cross_entropy_kernel(tape.value(logits), shape[1], labels)?;
    tape.scalar_fn(&[logits], value, vec![grad])
}
