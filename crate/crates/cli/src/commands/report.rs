use std::path::Path;

use anyhow::{bail, Result};
use pathsegkit::metrics::{binned_trend, dice, SampleMetrics};
use pathsegkit::prompts::{boxes_as_mask, instance_boxes, prompt_efficiency, union_box, EfficiencyRecord};
use pathsegkit::taxonomy::Structure;
use rayon::prelude::*;
use serde::Serialize;

use super::evaluate::prediction_path;
use super::print_summary;
use crate::io::{read_manifest, read_mask, resolve, stem};
use crate::{Ctx, Outcome};

const IRREGULARITY_EDGES: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
const INSTANCE_COUNT_EDGES: [f64; 6] = [0.0, 1.5, 2.5, 5.5, 10.5, 1e9];

#[derive(Debug, Serialize)]
struct EfficiencyCsv {
    method: &'static str,
    group: String,
    mean_prompts: f64,
    mean_dice: f64,
    n: usize,
}

#[derive(Debug, Serialize)]
struct TrendCsv {
    characteristic: &'static str,
    lo: f64,
    hi: f64,
    avg_x: f64,
    avg_dice: f64,
    n: usize,
}

struct Scored {
    metrics: SampleMetrics,
    structure: Structure,
    /// `(prompts, dice)` for union and instance box prompts; None for empty ground truth.
    boxes: Option<[(usize, f64); 2]>,
}

pub fn run(ctx: &Ctx, manifest_path: &Path, pred_dir: &Path) -> Result<Outcome> {
    let manifest = read_manifest(manifest_path)?;
    if manifest.is_empty() {
        bail!("empty manifest {}", manifest_path.display());
    }
    let results: Vec<Result<Scored>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let pred_path = prediction_path(pred_dir, e);
            if !pred_path.exists() {
                bail!("missing prediction {}", pred_path.display());
            }
            let gt = read_mask(&resolve(manifest_path, &e.mask_path))?;
            let pred = read_mask(&pred_path)?;
            let metrics = SampleMetrics::compute(&stem(&e.mask_path), &e.label.to_string(), &pred, &gt)?;
            let boxes = if gt.is_blank() {
                None
            } else {
                let union = vec![union_box(&gt)?];
                let inst = instance_boxes(&gt)?;
                Some([
                    (union.len(), dice(&boxes_as_mask(&union, gt.dims())?, &gt)?),
                    (inst.len(), dice(&boxes_as_mask(&inst, gt.dims())?, &gt)?),
                ])
            };
            Ok(Scored {
                metrics,
                structure: e.label.structure(),
                boxes,
            })
        })
        .collect();
    let mut outcome = Outcome::default();
    let mut scored = Vec::new();
    for (e, r) in manifest.entries.iter().zip(results) {
        match r {
            Ok(s) => scored.push(s),
            Err(err) => outcome.fail(&e.mask_path, format!("{err:#}")),
        }
    }
    if scored.is_empty() {
        return Ok(outcome);
    }

    let mut efficiency = Vec::new();
    let methods: [(&'static str, Box<dyn Fn(&Scored) -> Option<EfficiencyRecord>>); 3] = [
        ("text", Box::new(|s| Some(EfficiencyRecord::text_prompt(s.structure, s.metrics.dice)))),
        ("union_box", Box::new(|s| s.boxes.map(|b| EfficiencyRecord { structure: s.structure, n_prompts: b[0].0, dice: b[0].1 }))),
        ("instance_box", Box::new(|s| s.boxes.map(|b| EfficiencyRecord { structure: s.structure, n_prompts: b[1].0, dice: b[1].1 }))),
    ];
    for (method, record) in &methods {
        let records: Vec<EfficiencyRecord> = scored.iter().filter_map(|s| record(s)).collect();
        if records.is_empty() {
            continue;
        }
        for row in prompt_efficiency(&records)? {
            efficiency.push(EfficiencyCsv {
                method,
                group: row.group,
                mean_prompts: row.mean_prompts,
                mean_dice: row.mean_dice,
                n: row.n,
            });
        }
    }

    let mut trends = Vec::new();
    let characteristics: [(&'static str, &[f64], fn(&SampleMetrics) -> f64); 2] = [
        ("irregularity", &IRREGULARITY_EDGES, |m| m.irregularity),
        ("instance_count", &INSTANCE_COUNT_EDGES, |m| m.instance_count as f64),
    ];
    for (name, edges, x) in characteristics {
        let points: Vec<(f64, f64)> = scored.iter().map(|s| (x(&s.metrics), s.metrics.dice)).filter(|p| p.0.is_finite()).collect();
        for b in binned_trend(&points, edges)? {
            trends.push(TrendCsv {
                characteristic: name,
                lo: b.lo,
                hi: b.hi,
                avg_x: b.avg_x,
                avg_dice: b.avg_dice,
                n: b.n,
            });
        }
    }

    ctx.prov.write_csv(&ctx.out.join("sample_metrics.csv"), scored.iter().map(|s| &s.metrics))?;
    ctx.prov.write_csv(&ctx.out.join("prompt_efficiency.csv"), &efficiency)?;
    ctx.prov.write_csv(&ctx.out.join("trends.csv"), &trends)?;
    print_summary(serde_json::json!({
        "samples": scored.len(),
        "failures": outcome.failures.len(),
    }));
    Ok(outcome)
}
