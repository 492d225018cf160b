//! Masked reconstruction, background and semantic losses over denoised
//! latent predictions.
//!
//! Every loss is a mean over all `C * H * W` latent elements, so an all-ones
//! mask turns the foreground loss into plain MSE and the foreground and
//! background terms partition that MSE exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentTensor, SpatialMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Background-loss weight.
    pub gamma: f64,
    /// Semantic-loss weight.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            eta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(gamma: f64, eta: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) || !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative (gamma={gamma}, eta={eta})"
            )));
        }
        Ok(Self { gamma, eta })
    }
}

fn weighted_sq(
    a: &LatentTensor,
    b: &LatentTensor,
    weight: Option<&SpatialMap>,
) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let shape = a.shape();
    if let Some(w) = weight {
        w.ensure_matches(shape)?;
    }
    let plane = shape.spatial();
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (x, y))| {
            let d = x - y;
            let m = weight.map_or(1.0, |w| w.data[i % plane]);
            m * d * d
        })
        .sum();
    Ok(sum / shape.len() as f64)
}

/// Gradient of [`weighted_sq`] with respect to `a`, scaled by `scale` and
/// accumulated into `out`.
fn weighted_sq_grad(
    a: &LatentTensor,
    b: &LatentTensor,
    weight: Option<&SpatialMap>,
    scale: f64,
    out: &mut [f64],
) {
    let plane = a.shape().spatial();
    let k = 2.0 * scale / a.shape().len() as f64;
    for (i, ((x, y), g)) in a.data().iter().zip(b.data()).zip(out.iter_mut()).enumerate() {
        let m = weight.map_or(1.0, |w| w.data[i % plane]);
        *g += k * m * (x - y);
    }
}

/// Mean of `m_f * (x_pred - x0)^2`, with `m_f` broadcast across channels.
pub fn foreground_loss(x_pred: &LatentTensor, x0: &LatentTensor, m_f: &SpatialMap) -> Result<f64> {
    weighted_sq(x_pred, x0, Some(m_f))
}

/// Mean of `(1 - m_f) * (x_pred_star - x_pred_class)^2`. The class-prompt
/// prediction is a constant target.
pub fn background_loss(
    x_pred_star: &LatentTensor,
    x_pred_class: &LatentTensor,
    m_f: &SpatialMap,
) -> Result<f64> {
    let bg = crate::masks::complement(m_f);
    weighted_sq(x_pred_star, x_pred_class, Some(&bg))
}

/// Mean of `(x_open - x_fixed)^2`. The frozen-copy prediction is a constant
/// target.
pub fn semantic_loss(x_open: &LatentTensor, x_fixed: &LatentTensor) -> Result<f64> {
    weighted_sq(x_open, x_fixed, None)
}

/// Unmasked reconstruction over the whole latent.
pub fn reconstruction_loss(x_pred: &LatentTensor, x0: &LatentTensor) -> Result<f64> {
    weighted_sq(x_pred, x0, None)
}

pub fn stage1_total(l_fg: f64, l_bg: f64, w: LossWeights) -> f64 {
    l_fg + w.gamma * l_bg
}

pub fn stage2_total(l_fg: f64, l_bg: f64, l_sm: f64, w: LossWeights) -> f64 {
    l_fg + w.gamma * l_bg + w.eta * l_sm
}

/// Accumulates `scale * d(loss)/d(first argument)` into `out`.
pub(crate) mod grad {
    use super::*;

    pub fn foreground(x: &LatentTensor, x0: &LatentTensor, m: &SpatialMap, scale: f64, out: &mut [f64]) {
        weighted_sq_grad(x, x0, Some(m), scale, out);
    }

    pub fn background(x: &LatentTensor, target: &LatentTensor, bg: &SpatialMap, scale: f64, out: &mut [f64]) {
        weighted_sq_grad(x, target, Some(bg), scale, out);
    }

    pub fn unmasked(x: &LatentTensor, target: &LatentTensor, scale: f64, out: &mut [f64]) {
        weighted_sq_grad(x, target, None, scale, out);
    }
}
