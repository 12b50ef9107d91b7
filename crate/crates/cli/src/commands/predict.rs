use std::path::Path;

use anyhow::{Context, Result};
use pathsegkit::model::checkpoint::from_json;

use super::print_summary;
use crate::io::{mask_png, read_rgb, stem, write_if_changed};
use crate::{Ctx, Outcome};

pub fn run(ctx: &Ctx, checkpoint: &Path, image: &Path, prompt: &str) -> Result<Outcome> {
    let text = std::fs::read_to_string(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let model = from_json(&text)?;
    let pred = model.forward(&read_rgb(image)?, prompt)?;
    let mask = pred.mask(ctx.cfg.predict.threshold);
    let out = ctx.out.join(format!("{}.png", stem(&image.to_string_lossy())));
    write_if_changed(&out, &mask_png(&mask)?)?;
    print_summary(serde_json::json!({
        "mask": out,
        "selected": pred.selected,
        "similarity": pred.similarities[pred.selected],
        "foreground": mask.count(),
    }));
    Ok(Outcome::default())
}
