//! Dice + cross-entropy segmentation loss and the consistency weight ramp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-5;
/// Probabilities are floored here before the logarithm.
pub const CE_FLOOR: f64 = 1e-12;

/// `0.5 * (soft dice loss + cross-entropy)` over the pixels marked valid.
///
/// `probs` is an `N, C, H, W` softmax output on `tape`; `targets` and
/// `valid` are in `N, H, W` order. Soft dice is computed per class over the
/// whole batch and averaged over the classes present in the valid targets.
/// With no valid pixel the result is an exact zero constant.
pub fn dice_ce_loss<T: Real>(tape: &mut Tape<T>, probs: Var, targets: &[u8], valid: &[bool]) -> Result<Var> {
    let (n, c, h, w) = tape.value(probs).dims4()?;
    let plane = h * w;
    if targets.len() != n * plane || valid.len() != n * plane {
        return Err(Error::ShapeMismatch {
            op: "dice_ce_loss",
            lhs: vec![n, h, w],
            rhs: vec![targets.len(), valid.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(Error::invalid(format!("target class {bad} out of range for {c} classes")));
    }
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }

    let mut mask = vec![T::zero(); n * c * plane];
    let mut onehot = vec![T::zero(); n * c * plane];
    let mut tsum = vec![T::zero(); c];
    for ni in 0..n {
        for p in 0..plane {
            let i = ni * plane + p;
            if !valid[i] {
                continue;
            }
            let t = targets[i] as usize;
            for ci in 0..c {
                mask[(ni * c + ci) * plane + p] = T::one();
            }
            onehot[(ni * c + t) * plane + p] = T::one();
            tsum[t] += T::one();
        }
    }
    let shape = [n, c, h, w];
    let mask = tape.constant(Tensor::new(&shape, mask)?);
    let onehot = tape.constant(Tensor::new(&shape, onehot)?);

    // Dice.
    let eps = T::lit(DICE_EPS);
    let present = tsum.iter().filter(|&&t| t > T::zero()).count();
    let class_weight: Vec<T> = tsum
        .iter()
        .map(|&t| if t > T::zero() { T::one() / T::lit(present as f64) } else { T::zero() })
        .collect();
    let p_valid = tape.mul(probs, mask)?;
    let overlap = tape.mul(p_valid, onehot)?;
    let inter = tape.sum_per_channel(overlap)?;
    let psum = tape.sum_per_channel(p_valid)?;
    let num = tape.scale(inter, T::lit(2.0))?;
    let num = tape.add_scalar(num, eps)?;
    let tsum_eps = tape.constant(Tensor::new(&[c], tsum.iter().map(|&t| t + eps).collect())?);
    let den = tape.add(psum, tsum_eps)?;
    let ratio = tape.div(num, den)?;
    let class_weight = tape.constant(Tensor::new(&[c], class_weight)?);
    let weighted = tape.mul(ratio, class_weight)?;
    let mean_ratio = tape.sum(weighted)?;
    let dice = tape.scale(mean_ratio, -T::one())?;
    let dice = tape.add_scalar(dice, T::one())?;

    // Cross-entropy; the one-hot tensor is already zero on invalid pixels.
    let logp = tape.ln_clamped(probs, T::lit(CE_FLOOR))?;
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked)?;
    let ce = tape.scale(total, -T::one() / T::lit(n_valid as f64))?;

    let both = tape.add(dice, ce)?;
    tape.scale(both, T::lit(0.5))
}

/// Consistency-loss weighting and the pseudo-label confidence threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_u_max: f64,
    pub ramp_iters: usize,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_u_max: 2.0,
            ramp_iters: 0,
            tau: 0.95,
        }
    }
}

/// Sigmoid-shaped ramp `lambda_max * exp(-5 (1 - t)^2)` with
/// `t = min(iter, ramp) / ramp`; a zero-length ramp is flat at the maximum.
pub fn lambda_t(iter: usize, weights: &LossWeights) -> f64 {
    if weights.ramp_iters == 0 {
        return weights.lambda_u_max;
    }
    let t = iter.min(weights.ramp_iters) as f64 / weights.ramp_iters as f64;
    weights.lambda_u_max * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}
