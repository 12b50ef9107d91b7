use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Result};
use pathsegkit::metrics::{bootstrap_ci, dice};
use pathsegkit::pipeline::{DatasetManifest, ManifestEntry, Split};
use rayon::prelude::*;
use serde::Serialize;

use super::print_summary;
use crate::io::{read_manifest, read_mask, resolve, stem};
use crate::{Ctx, Outcome, SplitArg};

#[derive(Debug, Serialize)]
struct DiceRow {
    level: &'static str,
    group: String,
    n: usize,
    mean_dice: f64,
    ci_lo: f64,
    ci_hi: f64,
}

#[derive(Debug, Serialize)]
struct SampleDice {
    sample_id: String,
    label: String,
    dice: f64,
}

/// Entries of the requested split; entries without a split count for `all` only.
pub fn select(manifest: &DatasetManifest, split: SplitArg) -> Vec<&ManifestEntry> {
    let want = match split {
        SplitArg::All => return manifest.entries.iter().collect(),
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    manifest.with_split(want).collect()
}

/// Prediction for a manifest entry: `<pred_dir>/<mask stem>.png`.
pub fn prediction_path(pred_dir: &Path, e: &ManifestEntry) -> std::path::PathBuf {
    pred_dir.join(format!("{}.png", stem(&e.mask_path)))
}

pub fn groups(e: &ManifestEntry) -> [(&'static str, String); 5] {
    [
        ("overall", "all".to_string()),
        ("dataset", e.dataset.clone().unwrap_or_else(|| "unspecified".into())),
        ("region", e.label.region().to_string()),
        ("structure", e.label.structure().to_string()),
        ("object", e.label.to_string()),
    ]
}

pub fn run(ctx: &Ctx, pred_dir: &Path, manifest_path: &Path, split: SplitArg) -> Result<Outcome> {
    let manifest = read_manifest(manifest_path)?;
    let entries = select(&manifest, split);
    if entries.is_empty() {
        bail!("no entries in split {split:?}");
    }
    let scores: Vec<Result<f64>> = entries
        .par_iter()
        .map(|e| {
            let pred_path = prediction_path(pred_dir, e);
            if !pred_path.exists() {
                bail!("missing prediction {}", pred_path.display());
            }
            let gt = read_mask(&resolve(manifest_path, &e.mask_path))?;
            Ok(dice(&read_mask(&pred_path)?, &gt)?)
        })
        .collect();

    let mut outcome = Outcome::default();
    let mut per_sample = Vec::new();
    let mut grouped: BTreeMap<(&'static str, String), Vec<f64>> = BTreeMap::new();
    for (e, score) in entries.iter().zip(scores) {
        match score {
            Ok(d) => {
                per_sample.push(SampleDice {
                    sample_id: stem(&e.mask_path),
                    label: e.label.to_string(),
                    dice: d,
                });
                for key in groups(e) {
                    grouped.entry(key).or_default().push(d);
                }
            }
            Err(err) => outcome.fail(&e.mask_path, format!("{err:#}")),
        }
    }
    let cfg = ctx.cfg.evaluate;
    let order = ["overall", "dataset", "region", "structure", "object"];
    let mut rows = Vec::new();
    for level in order {
        for ((l, group), scores) in grouped.iter().filter(|((l, _), _)| *l == level) {
            let ci = bootstrap_ci(scores, cfg.resamples, cfg.level, ctx.cfg.seed)?;
            rows.push(DiceRow {
                level: l,
                group: group.clone(),
                n: scores.len(),
                mean_dice: ci.mean,
                ci_lo: ci.lo,
                ci_hi: ci.hi,
            });
        }
    }
    ctx.prov.write_csv(&ctx.out.join("evaluation.csv"), &rows)?;
    ctx.prov.write_csv(&ctx.out.join("dice_per_sample.csv"), &per_sample)?;
    let overall = rows.first().map(|r| r.mean_dice);
    log::info!("{} samples scored, overall mean Dice {overall:?}", per_sample.len());
    print_summary(serde_json::json!({
        "samples": per_sample.len(),
        "mean_dice": overall,
        "failures": outcome.failures.len(),
    }));
    Ok(outcome)
}
