//! Compound BCE + Dice segmentation loss on mask logits.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::raster::MaskBitmap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_bce: 1.0,
            lambda_dice: 1.0,
            epsilon: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.lambda_bce >= 0.0
            && self.lambda_dice >= 0.0
            && self.lambda_bce + self.lambda_dice > 0.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn target_matrix(y: &MaskBitmap) -> Array2<f64> {
    Array2::from_shape_fn(y.dims(), |(r, c)| y.get(r, c) as u8 as f64)
}

/// `λ1·BCE + λ2·DiceLoss` on sigmoid probabilities of `logits`. BCE is the
/// per-pixel mean; the Dice term uses additive smoothing `ε`.
pub fn segmentation_loss(
    y: &MaskBitmap,
    logits: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<LossBreakdown, ModelError> {
    Ok(loss_and_grad(&target_matrix(y), logits, cfg, false)?.0)
}

/// Loss and its gradient with respect to the logits.
pub(crate) fn loss_and_grad(
    target: &Array2<f64>,
    logits: &Array2<f64>,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Array2<f64>>), ModelError> {
    if target.dim() != logits.dim() {
        return Err(ModelError::DimensionMismatch(format!(
            "mask {:?} vs logits {:?}",
            target.dim(),
            logits.dim()
        )));
    }
    let n = logits.len() as f64;
    let probs = logits.mapv(sigmoid);
    let mut bce = 0.0;
    let (mut inter, mut sum_y, mut sum_p) = (0.0, 0.0, 0.0);
    for ((&z, &t), &p) in logits.iter().zip(target.iter()).zip(probs.iter()) {
        bce += softplus(z) - t * z;
        inter += t * p;
        sum_y += t;
        sum_p += p;
    }
    bce /= n;
    let denom = sum_y + sum_p + cfg.epsilon;
    let numer = 2.0 * inter + cfg.epsilon;
    let dice = 1.0 - numer / denom;
    let breakdown = LossBreakdown {
        bce,
        dice,
        total: cfg.lambda_bce * bce + cfg.lambda_dice * dice,
    };
    if !want_grad {
        return Ok((breakdown, None));
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    for ((g, &t), &p) in grad.iter_mut().zip(target.iter()).zip(probs.iter()) {
        let d_bce = (p - t) / n;
        let d_dice_dp = -(2.0 * t * denom - numer) / (denom * denom);
        *g = cfg.lambda_bce * d_bce + cfg.lambda_dice * d_dice_dp * p * (1.0 - p);
    }
    Ok((breakdown, Some(grad)))
}
