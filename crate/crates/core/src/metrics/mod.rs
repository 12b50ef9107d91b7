//! Segmentation score and object-characteristic metrics.

mod stats;

pub use stats::{binned_trend, bootstrap_ci, BootstrapCi, StatsError, TrendBin};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::MaskBitmap;

/// Instances smaller than this many pixels are treated as annotation noise.
pub const MIN_INSTANCE_SIZE: usize = 36;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("mask has no foreground (after instance filtering)")]
    EmptyMask,
}

/// Dice overlap `2|P ∩ G| / (|P| + |G|)`. Two empty masks score 1.
pub fn dice(pred: &MaskBitmap, gt: &MaskBitmap) -> Result<f64, MetricsError> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::DimensionMismatch(
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width(),
        ));
    }
    let (mut inter, mut sum) = (0usize, 0usize);
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += (p & g) as usize;
        sum += (p + g) as usize;
    }
    if sum == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / sum as f64)
}

/// One 8-connected foreground component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub pixel_count: usize,
    /// Mean (row, col) of member pixels.
    pub centroid: (f64, f64),
    /// Inclusive bounds: (row_min, col_min, row_max, col_max).
    pub bounds: (usize, usize, usize, usize),
}

/// Components surviving the size filter, in raster order of their first pixel.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InstanceSet {
    pub components: Vec<Component>,
}

impl InstanceSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn total_pixels(&self) -> usize {
        self.components.iter().map(|c| c.pixel_count).sum()
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new() -> Self {
        Self { parent: Vec::new() }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Two-pass 8-connected labelling; returns per-pixel labels (0 = background,
/// components numbered from 1 in raster order of first pixel) and the count.
pub fn label_components(mask: &MaskBitmap) -> (Vec<u32>, usize) {
    let (h, w) = mask.dims();
    let mut provisional = vec![u32::MAX; h * w];
    let mut sets = DisjointSet::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let mut label = None;
            let mut neighbours = [u32::MAX; 4];
            if r > 0 {
                if c > 0 {
                    neighbours[0] = provisional[(r - 1) * w + c - 1];
                }
                neighbours[1] = provisional[(r - 1) * w + c];
                if c + 1 < w {
                    neighbours[2] = provisional[(r - 1) * w + c + 1];
                }
            }
            if c > 0 {
                neighbours[3] = provisional[r * w + c - 1];
            }
            for &n in neighbours.iter().filter(|&&n| n != u32::MAX) {
                match label {
                    None => label = Some(n),
                    Some(l) => sets.union(l, n),
                }
            }
            provisional[r * w + c] = label.unwrap_or_else(|| sets.make());
        }
    }
    let mut remap = vec![0u32; sets.parent.len()];
    let mut next = 0u32;
    let mut labels = vec![0u32; h * w];
    for (i, &p) in provisional.iter().enumerate() {
        if p == u32::MAX {
            continue;
        }
        let root = sets.find(p) as usize;
        if remap[root] == 0 {
            next += 1;
            remap[root] = next;
        }
        labels[i] = remap[root];
    }
    (labels, next as usize)
}

/// 8-connected components with at least `min_size` pixels.
pub fn instances(mask: &MaskBitmap, min_size: usize) -> InstanceSet {
    let (h, w) = mask.dims();
    let (labels, n) = label_components(mask);
    let mut acc = vec![(0usize, 0f64, 0f64, usize::MAX, usize::MAX, 0usize, 0usize); n];
    for r in 0..h {
        for c in 0..w {
            let l = labels[r * w + c];
            if l == 0 {
                continue;
            }
            let a = &mut acc[l as usize - 1];
            a.0 += 1;
            a.1 += r as f64;
            a.2 += c as f64;
            a.3 = a.3.min(r);
            a.4 = a.4.min(c);
            a.5 = a.5.max(r);
            a.6 = a.6.max(c);
        }
    }
    InstanceSet {
        components: acc
            .into_iter()
            .filter(|a| a.0 >= min_size.max(1))
            .map(|(n, sr, sc, r0, c0, r1, c1)| Component {
                pixel_count: n,
                centroid: (sr / n as f64, sc / n as f64),
                bounds: (r0, c0, r1, c1),
            })
            .collect(),
    }
}

/// Foreground pixels with at least one 4-neighbour that is background or outside the image.
pub fn boundary_pixel_count(mask: &MaskBitmap) -> usize {
    let (h, w) = mask.dims();
    let mut n = 0;
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            n += edge as usize;
        }
    }
    n
}

/// `1 - 4π·Area / Perimeter²` with the perimeter counted in boundary pixels,
/// clamped to `[0, 1]`.
pub fn irregularity(mask: &MaskBitmap) -> Result<f64, MetricsError> {
    let area = mask.count();
    if area == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let perimeter = boundary_pixel_count(mask) as f64;
    let value = 1.0 - 4.0 * std::f64::consts::PI * area as f64 / (perimeter * perimeter);
    Ok(value.clamp(0.0, 1.0))
}

/// Mean instance area as a fraction of the image area.
pub fn instance_ratio(mask: &MaskBitmap) -> Result<f64, MetricsError> {
    instance_ratio_with(mask, MIN_INSTANCE_SIZE)
}

pub fn instance_ratio_with(mask: &MaskBitmap, min_size: usize) -> Result<f64, MetricsError> {
    let set = instances(mask, min_size);
    if set.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    let image_area = mask.len() as f64;
    Ok(set
        .components
        .iter()
        .map(|c| c.pixel_count as f64 / image_area)
        .sum::<f64>()
        / set.len() as f64)
}

pub fn instance_count(mask: &MaskBitmap) -> usize {
    instance_count_with(mask, MIN_INSTANCE_SIZE)
}

pub fn instance_count_with(mask: &MaskBitmap, min_size: usize) -> usize {
    instances(mask, min_size).len()
}

/// Maximum pairwise centroid distance. `degenerate` is set (and the value is 0)
/// when fewer than two instances survive filtering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub value: f64,
    pub degenerate: bool,
}

pub fn instance_dispersion(mask: &MaskBitmap) -> Dispersion {
    instance_dispersion_with(mask, MIN_INSTANCE_SIZE)
}

pub fn instance_dispersion_with(mask: &MaskBitmap, min_size: usize) -> Dispersion {
    let set = instances(mask, min_size);
    if set.len() < 2 {
        return Dispersion {
            value: 0.0,
            degenerate: true,
        };
    }
    let mut best = 0.0f64;
    for (i, a) in set.components.iter().enumerate() {
        for b in &set.components[i + 1..] {
            let d = (a.centroid.0 - b.centroid.0).hypot(a.centroid.1 - b.centroid.1);
            best = best.max(d);
        }
    }
    Dispersion {
        value: best,
        degenerate: false,
    }
}

/// One row of a per-sample metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub label: String,
    pub dice: f64,
    /// Object characteristics are measured on the ground truth; NaN when undefined.
    pub irregularity: f64,
    pub instance_ratio: f64,
    pub instance_count: usize,
    pub instance_dispersion: f64,
}

impl SampleMetrics {
    pub fn compute(
        sample_id: &str,
        label: &str,
        pred: &MaskBitmap,
        gt: &MaskBitmap,
    ) -> Result<Self, MetricsError> {
        let dispersion = instance_dispersion(gt);
        Ok(Self {
            sample_id: sample_id.to_string(),
            label: label.to_string(),
            dice: dice(pred, gt)?,
            irregularity: irregularity(gt).unwrap_or(f64::NAN),
            instance_ratio: instance_ratio(gt).unwrap_or(f64::NAN),
            instance_count: instance_count(gt),
            instance_dispersion: if dispersion.degenerate {
                f64::NAN
            } else {
                dispersion.value
            },
        })
    }
}
