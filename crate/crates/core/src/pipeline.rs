//! Data standardization: magnification normalization, sliding-window patching,
//! resolution standardization and train/test splitting.

use std::collections::BTreeMap;

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{MaskBitmap, RasterError, RasterImage};
use crate::taxonomy::HierLabel;

/// Magnification every sample is normalized to.
pub const TARGET_MAGNIFICATION: f64 = 40.0;
/// Sliding-window edge length.
pub const WINDOW: usize = 1024;
/// Axes longer than this are tiled.
pub const TILE_THRESHOLD: usize = 1500;
/// Output edge length of a standardized patch.
pub const STANDARD_SIZE: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("non-positive magnification {0}")]
    NonPositiveMagnification(f64),
    #[error("rescaling {0}x{1} by {2} yields a zero-sized output")]
    ZeroOutputDimension(usize, usize, f64),
    #[error("grid covers {grid_h}x{grid_w} but image is {image_h}x{image_w}")]
    GridMismatch {
        grid_h: usize,
        grid_w: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("empty patch")]
    EmptyPatch,
    #[error("empty manifest")]
    EmptyManifest,
    #[error("split ratio {0} outside (0, 1)")]
    BadRatio(f64),
    #[error("invalid grid configuration: threshold {threshold} < window {window}")]
    BadGridConfig { window: usize, threshold: usize },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Resamples image (bilinear) and mask (nearest) from the image's magnification to `target_mag`.
pub fn rescale_to_target(
    image: &RasterImage,
    mask: &MaskBitmap,
    target_mag: f64,
) -> Result<(RasterImage, MaskBitmap), PipelineError> {
    if !(target_mag > 0.0 && target_mag.is_finite()) {
        return Err(PipelineError::NonPositiveMagnification(target_mag));
    }
    if image.dims() != mask.dims() {
        let (h, w) = image.dims();
        return Err(RasterError::DimensionMismatch(h, w, mask.height(), mask.width()).into());
    }
    let scale = target_mag / image.magnification();
    let (h, w) = image.dims();
    let out_h = (h as f64 * scale).round() as usize;
    let out_w = (w as f64 * scale).round() as usize;
    if out_h == 0 || out_w == 0 {
        return Err(PipelineError::ZeroOutputDimension(h, w, scale));
    }
    let pixels = resize_bilinear(image.pixels(), out_h, out_w);
    let mask = mask.resize_nearest(out_h, out_w)?;
    Ok((RasterImage::new(pixels, target_mag)?, mask))
}

fn resize_bilinear(img: &RgbImage, height: usize, width: usize) -> RgbImage {
    if img.height() as usize == height && img.width() as usize == width {
        return img.clone();
    }
    imageops::resize(img, width as u32, height as u32, FilterType::Triangle)
}

/// Window placement along one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisGrid {
    /// Axis length the grid was computed for.
    pub dim: usize,
    /// Extent of each window along this axis (`dim` when untiled).
    pub window: usize,
    pub starts: Vec<usize>,
    /// Real-valued overlap between consecutive windows from the closed form.
    pub overlap: f64,
}

impl AxisGrid {
    pub fn is_tiled(&self) -> bool {
        self.starts.len() > 1 || self.window != self.dim
    }

    pub fn windows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.starts.iter().map(move |&s| (s, s + self.window))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridConfig {
    pub window: usize,
    pub threshold: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            window: WINDOW,
            threshold: TILE_THRESHOLD,
        }
    }
}

/// Per-axis sliding-window grid with the default 1024 window and 1500 threshold.
pub fn compute_patch_grid(dim: usize) -> AxisGrid {
    compute_patch_grid_with(dim, GridConfig::default()).expect("default config is valid")
}

/// Axes up to `threshold` are kept whole. Longer axes get `k = ceil(D / window)`
/// windows with uniform real overlap `(window*k - D) / (k - 1)`; interior starts are
/// rounded and the final window is pinned to end exactly at `D`.
pub fn compute_patch_grid_with(dim: usize, cfg: GridConfig) -> Result<AxisGrid, PipelineError> {
    if cfg.threshold < cfg.window || cfg.window == 0 {
        return Err(PipelineError::BadGridConfig {
            window: cfg.window,
            threshold: cfg.threshold,
        });
    }
    if dim <= cfg.threshold {
        return Ok(AxisGrid {
            dim,
            window: dim,
            starts: vec![0],
            overlap: 0.0,
        });
    }
    let k = dim.div_ceil(cfg.window);
    let overlap = (cfg.window * k - dim) as f64 / (k - 1) as f64;
    let stride = cfg.window as f64 - overlap;
    let mut starts: Vec<usize> = (0..k - 1)
        .map(|i| (i as f64 * stride).round() as usize)
        .collect();
    starts.push(dim - cfg.window);
    Ok(AxisGrid {
        dim,
        window: cfg.window,
        starts,
        overlap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub y: AxisGrid,
    pub x: AxisGrid,
}

impl PatchGrid {
    pub fn for_dims(height: usize, width: usize, cfg: GridConfig) -> Result<Self, PipelineError> {
        Ok(Self {
            y: compute_patch_grid_with(height, cfg)?,
            x: compute_patch_grid_with(width, cfg)?,
        })
    }

    pub fn len(&self) -> usize {
        self.y.starts.len() * self.x.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Patch {
    pub image: RgbImage,
    pub mask: MaskBitmap,
    /// (row, col) of the patch's top-left corner in the source image.
    pub offset: (usize, usize),
}

/// Crops image and mask identically at every window of the grid, row-major.
pub fn tile(
    image: &RgbImage,
    mask: &MaskBitmap,
    grid: &PatchGrid,
) -> Result<Vec<Patch>, PipelineError> {
    let (h, w) = (image.height() as usize, image.width() as usize);
    if grid.y.dim != h || grid.x.dim != w || mask.dims() != (h, w) {
        return Err(PipelineError::GridMismatch {
            grid_h: grid.y.dim,
            grid_w: grid.x.dim,
            image_h: h,
            image_w: w,
        });
    }
    let mut patches = Vec::with_capacity(grid.len());
    for &row in &grid.y.starts {
        for &col in &grid.x.starts {
            let img = imageops::crop_imm(
                image,
                col as u32,
                row as u32,
                grid.x.window as u32,
                grid.y.window as u32,
            )
            .to_image();
            patches.push(Patch {
                image: img,
                mask: mask.crop(row, col, grid.y.window, grid.x.window),
                offset: (row, col),
            });
        }
    }
    Ok(patches)
}

/// Resizes a patch to `size`x`size`: bilinear for the image, nearest for the mask.
pub fn standardize_patch(
    image: &RgbImage,
    mask: &MaskBitmap,
    size: usize,
) -> Result<(RgbImage, MaskBitmap), PipelineError> {
    if image.width() == 0 || image.height() == 0 || mask.is_empty() || size == 0 {
        return Err(PipelineError::EmptyPatch);
    }
    Ok((
        resize_bilinear(image, size, size),
        mask.resize_nearest(size, size)?,
    ))
}

/// Full standardization of one sample: rescale to `target_mag`, tile with `grid`
/// and resize every patch to `size`. Offsets refer to the rescaled image.
pub fn standardize_sample(
    image: &RasterImage,
    mask: &MaskBitmap,
    target_mag: f64,
    grid: GridConfig,
    size: usize,
) -> Result<Vec<Patch>, PipelineError> {
    let (scaled, scaled_mask) = rescale_to_target(image, mask, target_mag)?;
    let (h, w) = scaled.dims();
    let patch_grid = PatchGrid::for_dims(h, w, grid)?;
    tile(scaled.pixels(), &scaled_mask, &patch_grid)?
        .into_iter()
        .map(|p| {
            let (image, mask) = standardize_patch(&p.image, &p.mask, size)?;
            Ok(Patch {
                image,
                mask,
                offset: p.offset,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub mask_path: String,
    pub label: HierLabel,
    pub magnification: f64,
    #[serde(default)]
    pub split: Option<Split>,
    /// Source dataset; splits are stratified over this key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: empty image or mask path")]
    EmptyPath { line: usize },
}

impl DatasetManifest {
    /// Parses JSON-lines. Blank lines and provenance header objects are skipped.
    pub fn from_jsonl(text: &str) -> Result<Self, ManifestError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(line)
                .map_err(|source| ManifestError::Json { line: i + 1, source })?;
            if value.get("provenance").is_some() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_value(value)
                .map_err(|source| ManifestError::Json { line: i + 1, source })?;
            if entry.image_path.is_empty() || entry.mask_path.is_empty() {
                return Err(ManifestError::EmptyPath { line: i + 1 });
            }
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn with_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }
}

/// Assigns train/test to every entry lacking a split.
///
/// Entries that already carry a split (an official one) keep it. The rest are
/// grouped by source dataset and each group is shuffled with a seeded ChaCha8
/// stream; the first `round(ratio * n)` of each group go to training.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
) -> Result<DatasetManifest, PipelineError> {
    if manifest.is_empty() {
        return Err(PipelineError::EmptyManifest);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(PipelineError::BadRatio(ratio));
    }
    let mut groups: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.split.is_none() {
            groups.entry(e.dataset.as_deref()).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = manifest.clone();
    for indices in groups.values_mut() {
        indices.shuffle(&mut rng);
        let n_train = (ratio * indices.len() as f64).round() as usize;
        for (rank, &i) in indices.iter().enumerate() {
            out.entries[i].split = Some(if rank < n_train {
                Split::Train
            } else {
                Split::Test
            });
        }
    }
    Ok(out)
}
