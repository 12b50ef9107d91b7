use std::ops::ControlFlow;
use std::path::Path;

use anyhow::{bail, Result};
use pathsegkit::metrics::dice;
use pathsegkit::model::checkpoint::to_json;
use pathsegkit::model::{train_with, Sample, SegModel, Vocab};
use pathsegkit::pipeline::Split;
use pathsegkit::taxonomy::render_prompt;
use rayon::prelude::*;

use super::print_summary;
use crate::io::{read_manifest, read_mask, read_rgb, resolve};
use crate::{Ctx, Outcome};

pub fn run(ctx: &Ctx, manifest_path: &Path) -> Result<Outcome> {
    let manifest = read_manifest(manifest_path)?;
    if manifest.is_empty() {
        bail!("empty manifest {}", manifest_path.display());
    }
    let has_split = manifest.entries.iter().any(|e| e.split.is_some());
    let entries: Vec<_> = manifest.entries.iter().filter(|e| !has_split || e.split == Some(Split::Train)).collect();
    if entries.is_empty() {
        bail!("no training entries");
    }
    let mut outcome = Outcome::default();
    let loaded: Vec<Result<Sample>> = entries
        .par_iter()
        .map(|e| {
            Ok(Sample {
                image: read_rgb(&resolve(manifest_path, &e.image_path))?,
                mask: read_mask(&resolve(manifest_path, &e.mask_path))?,
                prompt: render_prompt(&e.label),
            })
        })
        .collect();
    let mut samples = Vec::new();
    for (e, s) in entries.iter().zip(loaded) {
        match s {
            Ok(s) => samples.push(s),
            Err(err) => outcome.fail(&e.image_path, format!("{err:#}")),
        }
    }
    if !outcome.failures.is_empty() {
        return Ok(outcome);
    }

    let vocab = Vocab::from_labels(manifest.entries.iter().map(|e| &e.label));
    let model = SegModel::new(ctx.cfg.model, vocab, ctx.cfg.seed)?;
    log::info!("training {} parameters on {} samples", model.params.num_parameters(), samples.len());
    let (model, report) = train_with(&model, &samples, &ctx.cfg.train, |s, _| {
        if s.epoch % 10 == 0 {
            log::info!("epoch {} loss {:.5} (bce {:.5}, dice {:.5}, align {:.5})", s.epoch, s.loss, s.bce, s.dice_loss, s.alignment);
        }
        ControlFlow::Continue(())
    })?;

    let threshold = ctx.cfg.predict.threshold;
    let dices: Vec<f64> = samples
        .par_iter()
        .map(|s| Ok(dice(&model.forward(&s.image, &s.prompt)?.mask(threshold), &s.mask)?))
        .collect::<Result<_>>()?;
    let train_dice = dices.iter().sum::<f64>() / dices.len() as f64;

    let checkpoint: serde_json::Value = serde_json::from_str(&to_json(&model))?;
    ctx.prov.write_json(&ctx.out.join("model.json"), checkpoint)?;
    ctx.prov.write_csv(&ctx.out.join("train_log.csv"), &report.epochs)?;
    log::info!("final loss {:?}, training Dice {train_dice:.4}", report.final_loss());
    print_summary(serde_json::json!({
        "samples": samples.len(),
        "epochs": report.epochs.len(),
        "final_loss": report.final_loss(),
        "train_dice": train_dice,
    }));
    Ok(outcome)
}
