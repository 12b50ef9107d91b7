//! Browser bindings. Each export takes plain numbers or pixel buffers and returns
//! JSON (or RGBA bytes) so the page needs no bundler.

use pathsegkit::explain::{build_object_model, object_bags, object_cam, paint_object_cam, FeatureExtractor, MilConfig};
use pathsegkit::metrics::{instance_count, instance_dispersion, irregularity, instances, MIN_INSTANCE_SIZE};
use pathsegkit::pipeline::{compute_patch_grid, AxisGrid};
use pathsegkit::prompts::{instance_boxes, union_box, BBox};
use pathsegkit::raster::MaskBitmap;
use pathsegkit::synthetic::{generate_slides, SlideConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct GridPlan {
    pub y: AxisGrid,
    pub x: AxisGrid,
    pub patches: usize,
}

pub fn plan_grid(height: usize, width: usize) -> GridPlan {
    let (y, x) = (compute_patch_grid(height), compute_patch_grid(width));
    GridPlan {
        patches: y.starts.len() * x.starts.len(),
        y,
        x,
    }
}

/// Sliding-window plan for a `height x width` image at target magnification.
#[wasm_bindgen]
pub fn patch_grid(height: usize, width: usize) -> String {
    serde_json::to_string(&plan_grid(height, width)).expect("plan serializes")
}

#[derive(Debug, Serialize)]
pub struct MaskReport {
    pub foreground: usize,
    pub components: usize,
    pub instance_count: usize,
    pub irregularity: Option<f64>,
    pub dispersion: Option<f64>,
    pub union_box: Option<BBox>,
    pub instance_boxes: Vec<BBox>,
}

/// Any pixel with alpha above 127 is foreground.
pub fn mask_from_rgba(width: usize, height: usize, rgba: &[u8]) -> Result<MaskBitmap, String> {
    if rgba.len() != width * height * 4 {
        return Err(format!("{} bytes for {width}x{height} RGBA", rgba.len()));
    }
    Ok(MaskBitmap::from_fn(height, width, |r, c| rgba[(r * width + c) * 4 + 3] > 127))
}

pub fn analyze(mask: &MaskBitmap) -> MaskReport {
    let dispersion = instance_dispersion(mask);
    MaskReport {
        foreground: mask.count(),
        components: instances(mask, 1).len(),
        instance_count: instance_count(mask),
        irregularity: irregularity(mask).ok(),
        dispersion: (!dispersion.degenerate).then_some(dispersion.value),
        union_box: union_box(mask).ok(),
        instance_boxes: instance_boxes(mask).unwrap_or_default(),
    }
}

/// Metrics and box prompts for a drawn mask given as canvas RGBA data.
#[wasm_bindgen]
pub fn analyze_mask(width: usize, height: usize, rgba: &[u8]) -> Result<String, JsError> {
    let mask = mask_from_rgba(width, height, rgba).map_err(|e| JsError::new(&e))?;
    Ok(serde_json::to_string(&analyze(&mask)).expect("report serializes"))
}

#[wasm_bindgen]
pub fn min_instance_size() -> usize {
    MIN_INSTANCE_SIZE
}

#[derive(Debug, Serialize)]
pub struct CamDemo {
    pub width: usize,
    pub height: usize,
    /// Slide pixels followed by the CAM overlay, both RGBA.
    #[serde(skip)]
    pub rgba: Vec<u8>,
    pub label: usize,
    pub predicted_class: usize,
    pub objects: Vec<String>,
    pub activations: Vec<f64>,
    pub accuracy: f64,
}

fn rgba(img: &image::RgbImage) -> Vec<u8> {
    img.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Trains an object-aware classifier on seeded synthetic slides and renders the
/// object CAM of slide `index` for its predicted class.
pub fn cam_demo(seed: u64, index: usize) -> Result<CamDemo, String> {
    let data = generate_slides(&SlideConfig { count: 16, seed, ..SlideConfig::default() });
    let (slides, masks): (Vec<_>, Vec<_>) = data.into_iter().unzip();
    let index = index % slides.len();
    let extractor = FeatureExtractor::random(8, 4, seed);
    let cfg = MilConfig { epochs: 150, learning_rate: 3e-2, seed, ..MilConfig::default() };
    let err = |e: pathsegkit::explain::ExplainError| e.to_string();
    let (model, _) = build_object_model(&extractor, &slides, &masks, 2, &cfg).map_err(err)?;
    let (_, bags) = object_bags(&extractor, &slides, &masks).map_err(err)?;
    let correct = bags
        .iter()
        .filter(|b| model.forward(&b.objects).map(|o| o.predicted_class() == b.label).unwrap_or(false))
        .count();
    let out = model.forward(&bags[index].objects).map_err(err)?;
    let class = out.predicted_class();
    let acts = object_cam(&out.object_features, &model.classifier, class).map_err(err)?;
    let full = masks[index].clone().with_other().map_err(err)?;
    let slide = &slides[index];
    let layers: Vec<MaskBitmap> = (0..full.labels.len()).map(|j| full.assemble(j, slide.grid)).collect();
    let map = paint_object_cam(acts.as_slice().expect("contiguous"), &layers).map_err(err)?;
    let image = slide.assemble();
    let (lo, hi) = acts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let overlay: Vec<u8> = map
        .iter()
        .flat_map(|&v| {
            let t = if v.is_finite() { (v - lo) / span } else { 0.0 };
            [(255.0 * t) as u8, (64.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8, (255.0 * (1.0 - t)) as u8, 255]
        })
        .collect();
    let mut bytes = rgba(&image);
    bytes.extend(overlay);
    Ok(CamDemo {
        width: image.width() as usize,
        height: image.height() as usize,
        rgba: bytes,
        label: slide.label,
        predicted_class: class,
        objects: model.objects.clone(),
        activations: acts.to_vec(),
        accuracy: correct as f64 / bags.len() as f64,
    })
}

/// JS handle for [`cam_demo`]: metadata as JSON plus the two RGBA layers.
#[wasm_bindgen]
pub struct CamView {
    json: String,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl CamView {
    #[wasm_bindgen(getter)]
    pub fn json(&self) -> String {
        self.json.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

#[wasm_bindgen]
pub fn object_cam_view(seed: u64, index: usize) -> Result<CamView, JsError> {
    let demo = cam_demo(seed, index).map_err(|e| JsError::new(&e))?;
    Ok(CamView {
        json: serde_json::to_string(&demo).expect("demo serializes"),
        rgba: demo.rgba,
    })
}
