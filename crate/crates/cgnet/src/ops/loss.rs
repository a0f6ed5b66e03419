//! Masked softmax cross-entropy over a score map.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossReduction {
    Mean,
    Sum,
}

impl std::fmt::Display for LossReduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossReduction::Mean => write!(f, "mean"),
            LossReduction::Sum => write!(f, "sum"),
        }
    }
}

impl std::str::FromStr for LossReduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LossReduction::Mean),
            "sum" => Ok(LossReduction::Sum),
            _ => Err(Error::Config(format!("unknown loss reduction '{s}'"))),
        }
    }
}

/// Per-pixel cross-entropy of `scores [N,K,H,W]` against integer labels
/// `[N,H,W]`, skipping pixels labelled `ignore_index`. Softmax is computed
/// with max subtraction; the per-pixel loss is `logsumexp(s) - s[label]`.
///
/// Returns the reduced loss and the gradient with respect to the scores:
/// `(softmax - onehot)` at valid pixels (divided by the valid count under
/// mean reduction), zero at ignored pixels.
pub fn softmax_ce_masked<E: Element>(
    scores: &Tensor<E>,
    labels: &[u8],
    ignore_index: u8,
    reduction: LossReduction,
) -> Result<(E, Tensor<E>)> {
    let (n, k, h, w) = scores.dims4()?;
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(Error::Shape(format!(
            "labels length {} does not match {n}x{h}x{w}",
            labels.len()
        )));
    }
    let mut valid: usize = 0;
    for (i, &lbl) in labels.iter().enumerate() {
        if lbl == ignore_index {
            continue;
        }
        if lbl as usize >= k {
            return Err(Error::InvalidArg(format!(
                "label {lbl} at pixel {i} exceeds class count {k}"
            )));
        }
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::AllPixelsIgnored);
    }

    let sd = scores.data();
    let mut grad = vec![E::zero(); sd.len()];
    let mut total = E::zero();
    for ni in 0..n {
        let base = ni * k * plane;
        for p in 0..plane {
            let lbl = labels[ni * plane + p];
            if lbl == ignore_index {
                continue;
            }
            let mut max = sd[base + p];
            for ki in 1..k {
                let v = sd[base + ki * plane + p];
                if v > max {
                    max = v;
                }
            }
            let mut sum = E::zero();
            for ki in 0..k {
                sum = sum + (sd[base + ki * plane + p] - max).exp();
            }
            let lse = max + sum.ln();
            total = total + (lse - sd[base + lbl as usize * plane + p]);
            for ki in 0..k {
                let soft = (sd[base + ki * plane + p] - max).exp() / sum;
                let onehot = if ki == lbl as usize { E::one() } else { E::zero() };
                grad[base + ki * plane + p] = soft - onehot;
            }
        }
    }

    let loss = match reduction {
        LossReduction::Mean => {
            let inv = E::one() / E::from_f64(valid as f64);
            for g in grad.iter_mut() {
                *g = *g * inv;
            }
            total * inv
        }
        LossReduction::Sum => total,
    };
    Ok((loss, Tensor::from_vec(scores.dims(), grad)?))
}
