//! Perturbation-based object importance: blur one object's region and compare
//! the classification loss with the unperturbed loss.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::features::{slide_features, FeatureExtractor, ObjectMasks, Slide};
use super::mil::MilModel;
use super::ExplainError;
use crate::raster::MaskBitmap;

pub const DEFAULT_BLUR_RADIUS: usize = 15;
/// Floor applied to the original loss before dividing.
pub const LOSS_FLOOR: f64 = 1e-8;

fn gaussian_kernel(radius: usize) -> Vec<f64> {
    let sigma = (radius as f64 / 3.0).max(1e-12);
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with `sigma = radius / 3`, truncated at `radius` and
/// clamped at the borders.
pub fn gaussian_blur(image: &RgbImage, radius: usize) -> RgbImage {
    if radius == 0 {
        return image.clone();
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    let k = gaussian_kernel(radius);
    let src: Vec<[f64; 3]> = image.pixels().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
    let pass = |src: &[[f64; 3]], horizontal: bool| -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (i, &wt) in k.iter().enumerate() {
                    let off = i as isize - radius as isize;
                    let (sx, sy) = if horizontal {
                        ((x as isize + off).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + off).clamp(0, h as isize - 1) as usize)
                    };
                    let p = src[sy * w + sx];
                    for c in 0..3 {
                        acc[c] += wt * p[c];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let blurred = pass(&pass(&src, true), false);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = blurred[y as usize * w + x as usize];
        image::Rgb(p.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

/// Blurred pixels inside `mask`; everything outside is copied untouched.
pub fn blur_region(image: &RgbImage, mask: &MaskBitmap, radius: usize) -> Result<RgbImage, ExplainError> {
    let dims = (image.height() as usize, image.width() as usize);
    if mask.dims() != dims {
        return Err(ExplainError::DimensionMismatch(format!("mask {:?} vs image {dims:?}", mask.dims())));
    }
    if mask.is_blank() {
        return Ok(image.clone());
    }
    let blurred = gaussian_blur(image, radius);
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        if mask.get(y as usize, x as usize) {
            *blurred.get_pixel(x, y)
        } else {
            *image.get_pixel(x, y)
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub value: f64,
    /// The original loss was below [`LOSS_FLOOR`] and was replaced by it.
    pub floored: bool,
}

/// `IMP = loss_pert / loss_orig`.
pub fn importance_from_losses(loss_orig: f64, loss_pert: f64) -> Importance {
    let floored = loss_orig < LOSS_FLOOR;
    Importance {
        value: loss_pert / loss_orig.max(LOSS_FLOOR),
        floored,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectImportance {
    pub object: String,
    pub loss_orig: f64,
    pub loss_pert: f64,
    pub importance: Importance,
}

/// Importance of every object for one slide under a trained standard classifier.
/// Blurring is applied to the stitched slide so patch borders see real neighbours.
pub fn feature_importance(
    model: &MilModel,
    extractor: &FeatureExtractor,
    slide: &Slide,
    objects: &ObjectMasks,
    radius: usize,
) -> Result<Vec<ObjectImportance>, ExplainError> {
    objects.validate(slide)?;
    let loss_orig = model.loss(&[slide_features(extractor, slide)?], slide.label)?;
    let whole = slide.assemble();
    let (ph, pw) = slide.patch_dims();
    (0..objects.labels.len())
        .map(|j| {
            let mask = objects.assemble(j, slide.grid);
            let blurred = blur_region(&whole, &mask, radius)?;
            let patches = (0..slide.patches.len())
                .map(|i| {
                    let (gy, gx) = (i / slide.grid.1, i % slide.grid.1);
                    image::imageops::crop_imm(&blurred, (gx * pw) as u32, (gy * ph) as u32, pw as u32, ph as u32).to_image()
                })
                .collect();
            let perturbed = Slide {
                patches,
                grid: slide.grid,
                label: slide.label,
            };
            let loss_pert = model.loss(&[slide_features(extractor, &perturbed)?], slide.label)?;
            Ok(ObjectImportance {
                object: objects.labels[j].clone(),
                loss_orig,
                loss_pert,
                importance: importance_from_losses(loss_orig, loss_pert),
            })
        })
        .collect()
}
