//! Frozen patch feature extraction and per-object feature decomposition.

use image::RgbImage;
use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ExplainError;
use crate::model::network::{image_tensor, patchify};
use crate::model::{Linear, SegModel};
use crate::raster::MaskBitmap;

/// Frozen patch-embedding encoder mapping an image to an `h x w x d` feature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub patch_size: usize,
    pub embed: Linear,
}

impl FeatureExtractor {
    /// Reuses the image encoder of a segmentation model.
    pub fn from_model(model: &SegModel) -> Self {
        Self {
            patch_size: model.config.patch_size,
            embed: model.params.patch_embed.clone(),
        }
    }

    pub fn random(dim: usize, patch_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            patch_size,
            embed: Linear::init(&mut rng, patch_size * patch_size * 3, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.embed.weight.ncols()
    }

    pub fn extract(&self, image: &RgbImage) -> Result<Array3<f64>, ExplainError> {
        let (patches, (gh, gw)) = patchify(&image_tensor(image), self.patch_size)?;
        let f = self.embed.forward(&patches.view());
        Ok(f.into_shape_with_order((gh, gw, self.dim())).expect("grid size"))
    }
}

/// Plain spatial mean of an `h x w x d` feature grid.
pub fn spatial_avg_pool(features: &Array3<f64>) -> Array1<f64> {
    let (h, w, d) = features.dim();
    features
        .view()
        .into_shape_with_order((h * w, d))
        .expect("contiguous grid")
        .mean_axis(Axis(0))
        .expect("non-empty grid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    pub vector: Array1<f64>,
    /// The mask had no foreground; `vector` is zero.
    pub empty: bool,
}

/// Mean feature vector over mask-on positions.
pub fn masked_avg_pool(features: &Array3<f64>, mask: &MaskBitmap) -> Result<PooledFeature, ExplainError> {
    let (h, w, d) = features.dim();
    if mask.dims() != (h, w) {
        return Err(ExplainError::DimensionMismatch(format!("mask {:?} vs features {h}x{w}", mask.dims())));
    }
    let mut sum = Array1::zeros(d);
    let mut n = 0usize;
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                sum += &features.slice(ndarray::s![r, c, ..]);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Ok(PooledFeature { vector: sum, empty: true });
    }
    Ok(PooledFeature {
        vector: sum / n as f64,
        empty: false,
    })
}

/// A slide cut into equally sized patches on a `rows x cols` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slide {
    pub patches: Vec<RgbImage>,
    pub grid: (usize, usize),
    pub label: usize,
}

impl Slide {
    pub fn patch_dims(&self) -> (usize, usize) {
        let p = &self.patches[0];
        (p.height() as usize, p.width() as usize)
    }

    pub fn dims(&self) -> (usize, usize) {
        let (ph, pw) = self.patch_dims();
        (self.grid.0 * ph, self.grid.1 * pw)
    }

    pub fn validate(&self) -> Result<(), ExplainError> {
        if self.patches.is_empty() {
            return Err(ExplainError::EmptyBag);
        }
        if self.grid.0 * self.grid.1 != self.patches.len() {
            return Err(ExplainError::DimensionMismatch(format!(
                "grid {:?} vs {} patches",
                self.grid,
                self.patches.len()
            )));
        }
        let dims = self.patches[0].dimensions();
        if self.patches.iter().any(|p| p.dimensions() != dims) {
            return Err(ExplainError::DimensionMismatch("patches differ in size".into()));
        }
        Ok(())
    }

    /// Stitches the patches into one image.
    pub fn assemble(&self) -> RgbImage {
        let (ph, pw) = self.patch_dims();
        let (h, w) = self.dims();
        let mut out = RgbImage::new(w as u32, h as u32);
        for (i, p) in self.patches.iter().enumerate() {
            let (gy, gx) = (i / self.grid.1, i % self.grid.1);
            image::imageops::replace(&mut out, p, (gx * pw) as i64, (gy * ph) as i64);
        }
        out
    }
}

/// Object masks per patch at patch pixel resolution: `masks[j][i]` is object `j`
/// in patch `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMasks {
    pub labels: Vec<String>,
    pub masks: Vec<Vec<MaskBitmap>>,
}

pub const OTHER_OBJECT: &str = "other";

impl ObjectMasks {
    /// Appends the "other" object: the complement of the union of all objects.
    pub fn with_other(mut self) -> Result<Self, ExplainError> {
        let n = self.masks.first().map(Vec::len).ok_or(ExplainError::MissingObjectMasks("no objects".into()))?;
        let mut other = Vec::with_capacity(n);
        for i in 0..n {
            let mut union = MaskBitmap::new(self.masks[0][i].height(), self.masks[0][i].width());
            for obj in &self.masks {
                union = union.union(&obj[i]).map_err(|e| ExplainError::DimensionMismatch(e.to_string()))?;
            }
            other.push(union.complement());
        }
        self.labels.push(OTHER_OBJECT.into());
        self.masks.push(other);
        Ok(self)
    }

    pub fn validate(&self, slide: &Slide) -> Result<(), ExplainError> {
        if self.masks.is_empty() || self.labels.len() != self.masks.len() {
            return Err(ExplainError::MissingObjectMasks("label and mask lists differ".into()));
        }
        let (ph, pw) = slide.patch_dims();
        for (label, per_patch) in self.labels.iter().zip(&self.masks) {
            if per_patch.len() != slide.patches.len() {
                return Err(ExplainError::MissingObjectMasks(format!(
                    "{label}: {} masks for {} patches",
                    per_patch.len(),
                    slide.patches.len()
                )));
            }
            if per_patch.iter().any(|m| m.dims() != (ph, pw)) {
                return Err(ExplainError::DimensionMismatch(format!("{label}: mask size differs from patch")));
            }
        }
        Ok(())
    }

    /// Stitches object `j`'s patch masks into one slide-level mask.
    pub fn assemble(&self, j: usize, grid: (usize, usize)) -> MaskBitmap {
        let (ph, pw) = self.masks[j][0].dims();
        MaskBitmap::from_fn(grid.0 * ph, grid.1 * pw, |r, c| {
            self.masks[j][(r / ph) * grid.1 + c / pw].get(r % ph, c % pw)
        })
    }
}

/// Average-pooled patch features, `N x d`.
pub fn slide_features(extractor: &FeatureExtractor, slide: &Slide) -> Result<Array2<f64>, ExplainError> {
    slide.validate()?;
    let rows: Vec<Array1<f64>> = slide
        .patches
        .iter()
        .map(|p| extractor.extract(p).map(|f| spatial_avg_pool(&f)))
        .collect::<Result<_, _>>()?;
    Ok(stack_rows(&rows))
}

/// Per-object masked-average-pooled patch features: one `N x d` matrix per object.
/// Masks are resized (nearest) to the feature grid first.
pub fn object_features(
    extractor: &FeatureExtractor,
    slide: &Slide,
    objects: &ObjectMasks,
) -> Result<Vec<Array2<f64>>, ExplainError> {
    slide.validate()?;
    objects.validate(slide)?;
    let grids: Vec<Array3<f64>> = slide.patches.iter().map(|p| extractor.extract(p)).collect::<Result<_, _>>()?;
    objects
        .masks
        .iter()
        .map(|per_patch| {
            let rows: Vec<Array1<f64>> = grids
                .iter()
                .zip(per_patch)
                .map(|(g, m)| {
                    let (h, w, _) = g.dim();
                    let small = m.resize_nearest(h, w).map_err(|e| ExplainError::DimensionMismatch(e.to_string()))?;
                    Ok(masked_avg_pool(g, &small)?.vector)
                })
                .collect::<Result<_, ExplainError>>()?;
            Ok(stack_rows(&rows))
        })
        .collect()
}

pub(crate) fn stack_rows(rows: &[Array1<f64>]) -> Array2<f64> {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal lengths")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn grid() -> Array3<f64> {
        Array3::from_shape_fn((3, 4, 2), |(r, c, k)| (r * 4 + c) as f64 + 100.0 * k as f64)
    }

    #[test]
    fn masked_pool_cases() {
        let f = grid();
        let full = masked_avg_pool(&f, &MaskBitmap::filled(3, 4)).unwrap();
        let plain = spatial_avg_pool(&f);
        assert!(!full.empty);
        assert!(full.vector.iter().zip(plain.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        let mut one = MaskBitmap::new(3, 4);
        one.set(2, 1, true);
        assert_eq!(masked_avg_pool(&f, &one).unwrap().vector, array![9.0, 109.0]);
        let none = masked_avg_pool(&f, &MaskBitmap::new(3, 4)).unwrap();
        assert!(none.empty);
        assert_eq!(none.vector, array![0.0, 0.0]);
        assert!(masked_avg_pool(&f, &MaskBitmap::new(4, 3)).is_err());
    }

    #[test]
    fn extractor_grid_shape() {
        let ex = FeatureExtractor::random(5, 4, 1);
        let f = ex.extract(&RgbImage::new(16, 24)).unwrap();
        assert_eq!(f.dim(), (6, 4, 5));
        assert!(ex.extract(&RgbImage::new(10, 16)).is_err());
    }

    #[test]
    fn other_object_is_complement() {
        let mut a = MaskBitmap::new(4, 4);
        a.set(0, 0, true);
        let mut b = MaskBitmap::new(4, 4);
        b.set(3, 3, true);
        let objs = ObjectMasks {
            labels: vec!["a".into(), "b".into()],
            masks: vec![vec![a], vec![b]],
        }
        .with_other()
        .unwrap();
        assert_eq!(objs.labels.last().unwrap(), OTHER_OBJECT);
        assert_eq!(objs.masks[2][0].count(), 14);
    }

    #[test]
    fn slide_assembly_round_trip() {
        let patches: Vec<RgbImage> = (0..6).map(|i| RgbImage::from_pixel(4, 4, image::Rgb([i as u8 * 10, 0, 0]))).collect();
        let slide = Slide { patches, grid: (2, 3), label: 0 };
        let img = slide.assemble();
        assert_eq!(img.dimensions(), (12, 8));
        assert_eq!(img.get_pixel(5, 6)[0], 40);
        let objs = ObjectMasks {
            labels: vec!["x".into()],
            masks: vec![(0..6).map(|i| if i == 4 { MaskBitmap::filled(4, 4) } else { MaskBitmap::new(4, 4) }).collect()],
        };
        objs.validate(&slide).unwrap();
        let m = objs.assemble(0, slide.grid);
        assert_eq!(m.count(), 16);
        assert!(m.get(5, 6));
    }
}
