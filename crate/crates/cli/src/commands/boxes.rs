use std::path::Path;

use anyhow::{bail, Result};
use pathsegkit::prompts::{instance_boxes_with, union_box, BoxKind, BoxRecord};
use rayon::prelude::*;

use super::print_summary;
use crate::io::{read_manifest, read_mask, resolve, stem};
use crate::{BoxKindArg, Ctx, Outcome};

pub fn run(ctx: &Ctx, manifest_path: &Path, kind: Option<BoxKindArg>) -> Result<Outcome> {
    let manifest = read_manifest(manifest_path)?;
    if manifest.is_empty() {
        bail!("empty manifest {}", manifest_path.display());
    }
    let kind = match kind {
        Some(BoxKindArg::Union) => BoxKind::Union,
        Some(BoxKindArg::Instance) => BoxKind::Instance,
        None => ctx.cfg.boxes.kind,
    };
    let min_size = ctx.cfg.boxes.min_size;
    let results: Vec<Result<BoxRecord>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let mask = read_mask(&resolve(manifest_path, &e.mask_path))?;
            // An empty mask needs no prompt.
            let boxes = if mask.is_blank() {
                Vec::new()
            } else {
                match kind {
                    BoxKind::Union => vec![union_box(&mask)?],
                    BoxKind::Instance => instance_boxes_with(&mask, min_size)?,
                }
            };
            Ok(BoxRecord {
                sample_id: stem(&e.mask_path),
                label: e.label.to_string(),
                kind,
                boxes,
            })
        })
        .collect();
    let mut outcome = Outcome::default();
    let mut records = Vec::new();
    for (e, r) in manifest.entries.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(err) => outcome.fail(&e.mask_path, format!("{err:#}")),
        }
    }
    ctx.prov.write_jsonl(&ctx.out.join("boxes.jsonl"), &records)?;
    let total: usize = records.iter().map(|r| r.boxes.len()).sum();
    print_summary(serde_json::json!({
        "samples": records.len(),
        "boxes": total,
        "failures": outcome.failures.len(),
    }));
    Ok(outcome)
}
