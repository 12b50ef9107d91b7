//! Patch-level and object-aware class activation maps.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::ExplainError;
use crate::raster::MaskBitmap;

fn class_column(weight: &Array2<f64>, class: usize, d: usize) -> Result<ndarray::ArrayView1<'_, f64>, ExplainError> {
    if class >= weight.ncols() {
        return Err(ExplainError::InvalidConfig(format!("class {class} >= {}", weight.ncols())));
    }
    if weight.nrows() != d {
        return Err(ExplainError::DimensionMismatch(format!("classifier has {} rows, features {d}", weight.nrows())));
    }
    Ok(weight.column(class))
}

/// `A_i = <W^c, α_i P_i>` for every patch. With a bias-free classifier these sum
/// to the class logit.
pub fn patch_cam(features: &Array2<f64>, alpha: &Array1<f64>, weight: &Array2<f64>, class: usize) -> Result<Array1<f64>, ExplainError> {
    if features.nrows() != alpha.len() {
        return Err(ExplainError::DimensionMismatch(format!(
            "{} patches vs {} attention weights",
            features.nrows(),
            alpha.len()
        )));
    }
    let wc = class_column(weight, class, features.ncols())?;
    Ok(features.dot(&wc) * alpha)
}

/// Paints patch activations over a `rows x cols` grid of `ph x pw` patches.
pub fn paint_patch_cam(acts: &[f64], grid: (usize, usize), patch_dims: (usize, usize)) -> Result<Array2<f64>, ExplainError> {
    if acts.len() != grid.0 * grid.1 {
        return Err(ExplainError::DimensionMismatch(format!("{} activations for grid {grid:?}", acts.len())));
    }
    let (ph, pw) = patch_dims;
    Ok(Array2::from_shape_fn((grid.0 * ph, grid.1 * pw), |(r, c)| acts[(r / ph) * grid.1 + c / pw]))
}

/// `A_j = <W^c, S^j>` for every object's slide-level feature.
pub fn object_cam(object_features: &[Array1<f64>], weight: &Array2<f64>, class: usize) -> Result<Array1<f64>, ExplainError> {
    let d = object_features.first().map(Array1::len).ok_or(ExplainError::EmptyBag)?;
    let wc = class_column(weight, class, d)?;
    object_features
        .iter()
        .map(|s| {
            if s.len() != d {
                return Err(ExplainError::DimensionMismatch("object features differ in width".into()));
            }
            Ok(s.dot(&wc))
        })
        .collect::<Result<Vec<f64>, _>>()
        .map(Array1::from)
}

/// Paints each object's activation over its pixels. Overlaps take the maximum;
/// pixels covered by no object are NaN.
pub fn paint_object_cam(acts: &[f64], masks: &[MaskBitmap]) -> Result<Array2<f64>, ExplainError> {
    if acts.len() != masks.len() || masks.is_empty() {
        return Err(ExplainError::DimensionMismatch(format!("{} activations for {} masks", acts.len(), masks.len())));
    }
    let dims = masks[0].dims();
    if masks.iter().any(|m| m.dims() != dims) {
        return Err(ExplainError::DimensionMismatch("object masks differ in size".into()));
    }
    let mut map = Array2::from_elem(dims, f64::NAN);
    for (&a, m) in acts.iter().zip(masks) {
        for ((r, c), v) in map.indexed_iter_mut() {
            if m.get(r, c) && (v.is_nan() || a > *v) {
                *v = a;
            }
        }
    }
    Ok(map)
}

/// Per-object activation record for JSON export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectActivation {
    pub object: String,
    pub activation: f64,
}
