use anyhow::Result;
use pathsegkit::pipeline::{DatasetManifest, ManifestEntry, TARGET_MAGNIFICATION};
use pathsegkit::synthetic::{default_categories, generate_corpus, generate_slides};

use super::explain::{ObjectEntry, SlideEntry};
use super::print_summary;
use crate::io::{mask_png, rgb_png, write_if_changed};
use crate::{Ctx, Outcome, SyntheticKind};

pub fn run(ctx: &Ctx, kind: SyntheticKind) -> Result<Outcome> {
    match kind {
        SyntheticKind::Segmentation => segmentation(ctx),
        SyntheticKind::Slides => slides(ctx),
    }
}

fn segmentation(ctx: &Ctx) -> Result<Outcome> {
    let corpus = generate_corpus(&default_categories(), &ctx.cfg.synthetic.corpus);
    let mut manifest = DatasetManifest::default();
    for (i, s) in corpus.iter().enumerate() {
        let file = format!("s{i:04}.png");
        let entry = ManifestEntry {
            image_path: format!("images/{file}"),
            mask_path: format!("masks/{file}"),
            label: s.label.clone(),
            magnification: TARGET_MAGNIFICATION,
            split: None,
            dataset: Some("synthetic".into()),
        };
        write_if_changed(&ctx.out.join(&entry.image_path), &rgb_png(&s.image)?)?;
        write_if_changed(&ctx.out.join(&entry.mask_path), &mask_png(&s.mask)?)?;
        manifest.entries.push(entry);
    }
    let text = ctx.prov.jsonl_line() + &manifest.to_jsonl();
    write_if_changed(&ctx.out.join("manifest.jsonl"), text.as_bytes())?;
    print_summary(serde_json::json!({ "samples": manifest.len() }));
    Ok(Outcome::default())
}

fn slides(ctx: &Ctx) -> Result<Outcome> {
    let slides = generate_slides(&ctx.cfg.synthetic.slides);
    let mut entries = Vec::with_capacity(slides.len());
    for (s, (slide, objects)) in slides.iter().enumerate() {
        let id = format!("slide{s:03}");
        let mut patches = Vec::new();
        for (k, p) in slide.patches.iter().enumerate() {
            let rel = format!("slides/{id}/patch{k:02}.png");
            write_if_changed(&ctx.out.join(&rel), &rgb_png(p)?)?;
            patches.push(rel);
        }
        let mut objs = Vec::new();
        for (label, masks) in objects.labels.iter().zip(&objects.masks) {
            let mut rels = Vec::new();
            for (k, m) in masks.iter().enumerate() {
                let rel = format!("slides/{id}/{label}{k:02}.png");
                write_if_changed(&ctx.out.join(&rel), &mask_png(m)?)?;
                rels.push(rel);
            }
            objs.push(ObjectEntry { label: label.clone(), masks: rels });
        }
        entries.push(SlideEntry {
            id,
            label: slide.label,
            grid: slide.grid,
            patches,
            objects: objs,
        });
    }
    ctx.prov.write_jsonl(&ctx.out.join("slides.jsonl"), &entries)?;
    print_summary(serde_json::json!({ "slides": entries.len() }));
    Ok(Outcome::default())
}
