use ndarray::{Array3, Array4, ArrayView3, Axis};

use super::EngineError;
use crate::Scalar;

/// Weighted mean per-pixel cross-entropy of channel-softmaxed logits.
///
/// `logits: [n, classes, h, w]`, `target: [n, h, w]` class indices,
/// `weights: [n, h, w]` (all ones when `None`). Returns the loss
/// `sum(w * ce) / sum(w)` and its gradient with respect to the logits,
/// `w * (softmax - onehot) / sum(w)`.
pub fn softmax_ce_loss<T: Scalar>(
    logits: &Array4<T>,
    target: ArrayView3<u8>,
    weights: Option<ArrayView3<T>>,
) -> Result<(T, Array4<T>), EngineError> {
    let (n, classes, h, w) = logits.dim();
    if target.dim() != (n, h, w) {
        return Err(EngineError::ShapeMismatch(format!(
            "target {:?} does not match logits {:?}",
            target.dim(),
            logits.dim()
        )));
    }
    if let Some(wt) = &weights {
        if wt.dim() != (n, h, w) {
            return Err(EngineError::ShapeMismatch("weight map shape".into()));
        }
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= classes) {
        return Err(EngineError::ClassOutOfRange {
            class: bad,
            classes,
        });
    }
    match weights {
        Some(wt) => weighted_ce(logits, target, wt),
        None => weighted_ce(
            logits,
            target,
            Array3::from_elem((n, h, w), T::one()).view(),
        ),
    }
}

fn weighted_ce<T: Scalar>(
    logits: &Array4<T>,
    target: ArrayView3<u8>,
    weights: ArrayView3<T>,
) -> Result<(T, Array4<T>), EngineError> {
    let (n, classes, h, w) = logits.dim();
    let total: T = weights.iter().copied().sum();
    let mut grad = Array4::zeros(logits.raw_dim());
    if total <= T::zero() {
        return Ok((T::zero(), grad));
    }
    let mut loss = T::zero();
    let mut probs = vec![T::zero(); classes];
    for b in 0..n {
        let lb = logits.index_axis(Axis(0), b);
        for i in 0..h {
            for j in 0..w {
                let wt = weights[[b, i, j]];
                if wt == T::zero() {
                    continue;
                }
                let mut max = T::neg_infinity();
                for c in 0..classes {
                    max = max.max(lb[[c, i, j]]);
                }
                let mut sum = T::zero();
                for c in 0..classes {
                    probs[c] = (lb[[c, i, j]] - max).exp();
                    sum += probs[c];
                }
                let t = target[[b, i, j]] as usize;
                loss += wt * (sum.ln() - (lb[[t, i, j]] - max));
                let scale = wt / total;
                for c in 0..classes {
                    let p = probs[c] / sum;
                    let onehot = if c == t { T::one() } else { T::zero() };
                    grad[[b, c, i, j]] = scale * (p - onehot);
                }
            }
        }
    }
    Ok((loss / total, grad))
}

/// Channel softmax at every pixel.
pub fn softmax<T: Scalar>(logits: &Array4<T>) -> Array4<T> {
    let mut out = logits.clone();
    for mut sample in out.outer_iter_mut() {
        let max = sample.fold_axis(Axis(0), T::neg_infinity(), |a, &b| a.max(b));
        for mut plane in sample.outer_iter_mut() {
            plane.zip_mut_with(&max, |v, &m| *v = (*v - m).exp());
        }
        let sum = sample.sum_axis(Axis(0));
        for mut plane in sample.outer_iter_mut() {
            plane.zip_mut_with(&sum, |v, &s| *v /= s);
        }
    }
    out
}

/// Per-pixel winning class, `[n, h, w]`. Ties go to the lower class index.
pub fn argmax_map<T: Scalar>(logits: &Array4<T>) -> Array3<u8> {
    let (n, classes, h, w) = logits.dim();
    Array3::from_shape_fn((n, h, w), |(b, i, j)| {
        let mut best = 0;
        for c in 1..classes {
            if logits[[b, c, i, j]] > logits[[b, best, i, j]] {
                best = c;
            }
        }
        best as u8
    })
}
