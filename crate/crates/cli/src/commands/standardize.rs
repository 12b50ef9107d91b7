use std::path::Path;

use anyhow::{bail, Result};
use pathsegkit::pipeline::{split_dataset, standardize_sample, DatasetManifest, GridConfig, ManifestEntry};
use pathsegkit::raster::RasterImage;
use rayon::prelude::*;

use super::print_summary;
use crate::io::{mask_png, read_manifest, read_mask, read_rgb, resolve, rgb_png, stem, write_if_changed};
use crate::{Ctx, Outcome};

struct Encoded {
    entry: ManifestEntry,
    image: Vec<u8>,
    mask: Vec<u8>,
}

fn process(manifest_path: &Path, index: usize, e: &ManifestEntry, target: f64, ctx: &Ctx) -> Result<Vec<Encoded>> {
    let cfg = ctx.cfg.standardize;
    let image = RasterImage::new(read_rgb(&resolve(manifest_path, &e.image_path))?, e.magnification)?;
    let mask = read_mask(&resolve(manifest_path, &e.mask_path))?;
    let grid = GridConfig {
        window: cfg.window,
        threshold: cfg.threshold,
    };
    let name = stem(&e.image_path);
    standardize_sample(&image, &mask, target, grid, cfg.size)?
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            let file = format!("{index:05}_{name}_{k:02}.png");
            Ok(Encoded {
                entry: ManifestEntry {
                    image_path: format!("images/{file}"),
                    mask_path: format!("masks/{file}"),
                    magnification: target,
                    ..e.clone()
                },
                image: rgb_png(&p.image)?,
                mask: mask_png(&p.mask)?,
            })
        })
        .collect()
}

pub fn run(ctx: &Ctx, manifest_path: &Path, target_mag: Option<f64>) -> Result<Outcome> {
    let manifest = read_manifest(manifest_path)?;
    if manifest.is_empty() {
        bail!("empty manifest {}", manifest_path.display());
    }
    let target = target_mag.unwrap_or(ctx.cfg.standardize.target_magnification);
    // Split sources before tiling so patches of one image share a split.
    let manifest = split_dataset(&manifest, ctx.cfg.standardize.train_ratio, ctx.cfg.seed)?;
    let results: Vec<Result<Vec<Encoded>>> = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| process(manifest_path, i, e, target, ctx))
        .collect();

    let mut outcome = Outcome::default();
    let mut out_manifest = DatasetManifest::default();
    let (mut written, mut unchanged) = (0usize, 0usize);
    for (e, result) in manifest.entries.iter().zip(results) {
        match result {
            Ok(patches) => {
                for p in patches {
                    for (rel, bytes) in [(&p.entry.image_path, &p.image), (&p.entry.mask_path, &p.mask)] {
                        if write_if_changed(&ctx.out.join(rel), bytes)? {
                            written += 1;
                        } else {
                            unchanged += 1;
                        }
                    }
                    out_manifest.entries.push(p.entry);
                }
            }
            Err(err) => outcome.fail(&e.image_path, format!("{err:#}")),
        }
    }
    let text = ctx.prov.jsonl_line() + &out_manifest.to_jsonl();
    if write_if_changed(&ctx.out.join("manifest.jsonl"), text.as_bytes())? {
        written += 1;
    } else {
        unchanged += 1;
    }
    log::info!("{} patches from {} samples; {written} files written, {unchanged} unchanged", out_manifest.len(), manifest.len());
    print_summary(serde_json::json!({
        "samples": manifest.len(),
        "patches": out_manifest.len(),
        "written": written,
        "unchanged": unchanged,
        "failures": outcome.failures.len(),
    }));
    Ok(outcome)
}
