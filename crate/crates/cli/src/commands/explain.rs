use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};
use pathsegkit::explain::{
    build_object_model, feature_importance, object_bags, object_cam, paint_object_cam, slide_features, train_standard,
    FeatureExtractor, ObjectActivation, ObjectMasks, Slide,
};
use pathsegkit::model::checkpoint::from_json;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::print_summary;
use crate::io::{read_mask, read_rgb, resolve, rgb_png, write_if_changed};
use crate::{Ctx, ExplainMode, Outcome};

/// One line of `slides.jsonl`. Paths are relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideEntry {
    pub id: String,
    pub label: usize,
    pub grid: (usize, usize),
    pub patches: Vec<String>,
    pub objects: Vec<ObjectEntry>,
}

/// Per-patch masks of one object type, in patch order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    pub label: String,
    pub masks: Vec<String>,
}

fn read_entries(path: &Path) -> Result<Vec<SlideEntry>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).with_context(|| format!("line {}", i + 1))?;
        if value.get("provenance").is_none() {
            out.push(serde_json::from_value(value).with_context(|| format!("line {}", i + 1))?);
        }
    }
    Ok(out)
}

fn load(path: &Path, e: &SlideEntry) -> Result<(Slide, ObjectMasks)> {
    let slide = Slide {
        patches: e.patches.iter().map(|p| read_rgb(&resolve(path, p))).collect::<Result<_>>()?,
        grid: e.grid,
        label: e.label,
    };
    slide.validate()?;
    let objects = ObjectMasks {
        labels: e.objects.iter().map(|o| o.label.clone()).collect(),
        masks: e
            .objects
            .iter()
            .map(|o| o.masks.iter().map(|m| read_mask(&resolve(path, m))).collect::<Result<_>>())
            .collect::<Result<_>>()?,
    };
    objects.validate(&slide)?;
    Ok((slide, objects))
}

#[derive(Debug, Serialize)]
struct ImportanceRow {
    object_label: String,
    class: usize,
    mean_imp: f64,
    n_slides: usize,
}

#[derive(Debug, Serialize)]
struct SlideImportanceRow {
    slide: String,
    object_label: String,
    class: usize,
    loss_orig: f64,
    loss_pert: f64,
    imp: f64,
    floored: bool,
}

#[derive(Debug, Serialize)]
struct CamRecord {
    slide: String,
    label: usize,
    predicted_class: usize,
    probs: Vec<f64>,
    activations: Vec<ObjectActivation>,
}

/// Blends a blue-to-red ramp over `base` where the row-major map is defined.
fn heat_overlay(base: &RgbImage, map: &[f64]) -> RgbImage {
    let finite = map.iter().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = finite.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(base.width(), base.height(), |x, y| {
        let v = map[y as usize * base.width() as usize + x as usize];
        let px = base.get_pixel(x, y);
        if !v.is_finite() {
            return *px;
        }
        let t = (v - lo) / span;
        let heat: [f64; 3] = [255.0 * t, 64.0 * (1.0 - (2.0 * t - 1.0).abs()), 255.0 * (1.0 - t)];
        Rgb([0, 1, 2].map(|k| (0.5 * px[k] as f64 + 0.5 * heat[k]).round() as u8))
    })
}

pub fn run(ctx: &Ctx, slides_path: &Path, checkpoint: Option<&Path>, mode: ExplainMode) -> Result<Outcome> {
    let entries = read_entries(slides_path)?;
    if entries.is_empty() {
        bail!("no slides in {}", slides_path.display());
    }
    let cfg = ctx.cfg.explain;
    let extractor = match checkpoint {
        Some(p) => FeatureExtractor::from_model(&from_json(&std::fs::read_to_string(p)?)?),
        None => FeatureExtractor::random(cfg.feature_dim, cfg.patch_size, ctx.cfg.seed),
    };
    let mut outcome = Outcome::default();
    let loaded: Vec<Result<(Slide, ObjectMasks)>> = entries.par_iter().map(|e| load(slides_path, e)).collect();
    let mut ids = Vec::new();
    let mut slides = Vec::new();
    let mut masks = Vec::new();
    for (e, r) in entries.iter().zip(loaded) {
        match r {
            Ok((s, m)) => {
                ids.push(e.id.clone());
                slides.push(s);
                masks.push(m);
            }
            Err(err) => outcome.fail(&e.id, format!("{err:#}")),
        }
    }
    if slides.is_empty() {
        return Ok(outcome);
    }
    let mut summary = serde_json::Map::new();
    summary.insert("slides".into(), slides.len().into());

    if matches!(mode, ExplainMode::Importance | ExplainMode::All) {
        let bags: Vec<_> = slides
            .par_iter()
            .map(|s| Ok((slide_features(&extractor, s)?, s.label)))
            .collect::<Result<_>>()?;
        let (model, curve) = train_standard(&bags, cfg.classes, &cfg.mil)?;
        log::info!("standard classifier loss {:.4} -> {:.4}", curve[0], curve.last().copied().unwrap_or(f64::NAN));
        let per_slide: Vec<_> = slides
            .par_iter()
            .zip(&masks)
            .map(|(s, m)| feature_importance(&model, &extractor, s, m, cfg.blur_radius))
            .collect();
        let mut rows = Vec::new();
        let mut grouped: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
        for ((id, slide), r) in ids.iter().zip(&slides).zip(per_slide) {
            match r {
                Ok(imps) => {
                    for imp in imps {
                        grouped.entry((imp.object.clone(), slide.label)).or_default().push(imp.importance.value);
                        rows.push(SlideImportanceRow {
                            slide: id.clone(),
                            object_label: imp.object,
                            class: slide.label,
                            loss_orig: imp.loss_orig,
                            loss_pert: imp.loss_pert,
                            imp: imp.importance.value,
                            floored: imp.importance.floored,
                        });
                    }
                }
                Err(err) => outcome.fail(id, err),
            }
        }
        let summary_rows: Vec<ImportanceRow> = grouped
            .into_iter()
            .map(|((object_label, class), v)| ImportanceRow {
                object_label,
                class,
                mean_imp: v.iter().sum::<f64>() / v.len() as f64,
                n_slides: v.len(),
            })
            .collect();
        ctx.prov.write_csv(&ctx.out.join("importance.csv"), &summary_rows)?;
        ctx.prov.write_csv(&ctx.out.join("importance_per_slide.csv"), &rows)?;
        summary.insert("importance".into(), serde_json::to_value(&summary_rows)?);
    }

    if matches!(mode, ExplainMode::Cam | ExplainMode::All) {
        let (model, _) = build_object_model(&extractor, &slides, &masks, cfg.classes, &cfg.mil)?;
        let (_, bags) = object_bags(&extractor, &slides, &masks)?;
        let cam_dir = ctx.out.join("cam");
        std::fs::create_dir_all(&cam_dir)?;
        let mut correct = 0;
        for (((id, slide), objs), bag) in ids.iter().zip(&slides).zip(&masks).zip(&bags) {
            let out = model.forward(&bag.objects)?;
            let class = out.predicted_class();
            correct += usize::from(class == slide.label);
            let acts = object_cam(&out.object_features, &model.classifier, class)?;
            let full = objs.clone().with_other()?;
            let slide_masks: Vec<_> = (0..full.labels.len()).map(|j| full.assemble(j, slide.grid)).collect();
            let map = paint_object_cam(acts.as_slice().expect("contiguous"), &slide_masks)?;
            write_if_changed(&cam_dir.join(format!("{id}.png")), &rgb_png(&heat_overlay(&slide.assemble(), map.as_slice().expect("standard layout")))?)?;
            let record = CamRecord {
                slide: id.clone(),
                label: slide.label,
                predicted_class: class,
                probs: out.probs.to_vec(),
                activations: model
                    .objects
                    .iter()
                    .zip(acts.iter())
                    .map(|(o, &a)| ObjectActivation { object: o.clone(), activation: a })
                    .collect(),
            };
            ctx.prov.write_json(&cam_dir.join(format!("{id}.json")), &record)?;
        }
        summary.insert("object_model_accuracy".into(), (correct as f64 / slides.len() as f64).into());
    }
    summary.insert("failures".into(), outcome.failures.len().into());
    print_summary(summary);
    Ok(outcome)
}
