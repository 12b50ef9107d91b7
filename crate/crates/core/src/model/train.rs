//! Mini-batch Adam training with deterministic gradient accumulation.

use std::ops::ControlFlow;

use image::RgbImage;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::LossConfig;
use super::network::{mask_target, ModelParams, Prepared, SegModel};
use super::ModelError;
use crate::optim::Adam;
use crate::raster::MaskBitmap;

/// One image, its binary mask and the text prompt naming the masked object.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: MaskBitmap,
    pub prompt: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub epsilon: f64,
    /// Weight of the `1 - cos(e_cls_j, global text)` alignment term.
    pub align_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_bce: 1.0,
            lambda_dice: 1.0,
            epsilon: 1.0,
            align_weight: 0.1,
            learning_rate: 1e-2,
            epochs: 100,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_bce: self.lambda_bce,
            lambda_dice: self.lambda_dice,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.loss_config().validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || !(self.align_weight >= 0.0) {
            return Err(ModelError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean total objective over the epoch's samples, evaluated during the updates.
    pub loss: f64,
    pub bce: f64,
    pub dice_loss: f64,
    pub alignment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

type SampleOutput = Result<(super::network::Objective, ModelParams), ModelError>;

fn batch_outputs(model: &SegModel, prepared: &[(Prepared, Array2<f64>)], batch: &[usize], cfg: &TrainConfig) -> Vec<SampleOutput> {
    let run = |&i: &usize| -> SampleOutput {
        let (prep, target) = &prepared[i];
        let (obj, grads) = model.objective(prep, target, cfg, true, None)?;
        Ok((obj, grads.expect("gradient requested")))
    };
    #[cfg(feature = "parallel")]
    {
        batch.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch.iter().map(run).collect()
    }
}

/// Trains a copy of `model` and returns it with the per-epoch loss curve.
pub fn train(model: &SegModel, data: &[Sample], cfg: &TrainConfig) -> Result<(SegModel, TrainReport), ModelError> {
    train_with(model, data, cfg, |_, _| ControlFlow::Continue(()))
}

/// Like [`train`], calling `on_epoch` after every epoch; returning
/// `ControlFlow::Break` stops early.
///
/// Per-sample gradients may be computed in parallel but are always summed in
/// batch order, so results are bitwise reproducible for a fixed seed.
pub fn train_with(
    model: &SegModel,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &SegModel) -> ControlFlow<()>,
) -> Result<(SegModel, TrainReport), ModelError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let prepared: Vec<(Prepared, Array2<f64>)> = data
        .iter()
        .map(|s| {
            let prep = model.prepare(&s.image, &s.prompt)?;
            let target = mask_target(&s.mask, prep.size)?;
            Ok((prep, target))
        })
        .collect::<Result<_, ModelError>>()?;

    let mut model = model.clone();
    let mut adam = Adam::new(model.params.tensors().into_iter().map(|(_, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport { epochs: Vec::new() };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for batch in order.chunks(cfg.batch_size) {
            let outputs = batch_outputs(&model, &prepared, batch, cfg);
            let mut total = model.params.zeros_like();
            for out in outputs {
                let (obj, grads) = out?;
                sums[0] += obj.total;
                sums[1] += obj.segmentation.bce;
                sums[2] += obj.segmentation.dice;
                sums[3] += obj.alignment;
                total.add_assign(&grads);
            }
            total.scale(1.0 / batch.len() as f64);
            adam.step(
                model.params.tensors_mut().into_iter().map(|(_, t)| t),
                total.tensors().into_iter().map(|(_, t)| t),
                cfg.learning_rate,
            );
        }
        let n = data.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: sums[0] / n,
            bce: sums[1] / n,
            dice_loss: sums[2] / n,
            alignment: sums[3] / n,
        };
        if !stats.loss.is_finite() || !model.params.is_finite() {
            return Err(ModelError::DivergedLoss(epoch, stats.loss));
        }
        report.epochs.push(stats);
        if on_epoch(&stats, &model).is_break() {
            break;
        }
    }
    Ok((model, report))
}
