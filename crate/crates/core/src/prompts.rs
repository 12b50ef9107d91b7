//! Oracle spatial prompts derived from ground-truth masks, and prompt-efficiency
//! accounting for comparing text prompts with box prompts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{instances, MIN_INSTANCE_SIZE};
use crate::raster::MaskBitmap;
use crate::taxonomy::Structure;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("mask has no foreground")]
    EmptyMask,
    #[error("box {0:?} exceeds {1}x{2}")]
    OutOfBounds(BBox, usize, usize),
    #[error("no efficiency records")]
    EmptyRecords,
}

/// Axis-aligned box with inclusive pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", from = "[usize; 4]")]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn new(row_min: usize, col_min: usize, row_max: usize, col_max: usize) -> Self {
        assert!(row_min <= row_max && col_min <= col_max, "inverted box");
        Self {
            row_min,
            col_min,
            row_max,
            col_max,
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.row_min <= other.row_min
            && self.col_min <= other.col_min
            && self.row_max >= other.row_max
            && self.col_max >= other.col_max
    }

    pub fn area(&self) -> usize {
        (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.row_min, b.col_min, b.row_max, b.col_max]
    }
}

impl From<[usize; 4]> for BBox {
    fn from(a: [usize; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

/// Tightest box around all foreground pixels.
pub fn union_box(mask: &MaskBitmap) -> Result<BBox, PromptError> {
    let (h, w) = mask.dims();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                bounds = Some(match bounds {
                    None => (r, c, r, c),
                    Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                });
            }
        }
    }
    bounds
        .map(|(r0, c0, r1, c1)| BBox::new(r0, c0, r1, c1))
        .ok_or(PromptError::EmptyMask)
}

/// One tight box per 8-connected instance of at least `min_size` pixels.
pub fn instance_boxes_with(mask: &MaskBitmap, min_size: usize) -> Result<Vec<BBox>, PromptError> {
    if mask.is_blank() {
        return Err(PromptError::EmptyMask);
    }
    Ok(instances(mask, min_size)
        .components
        .iter()
        .map(|c| BBox::from([c.bounds.0, c.bounds.1, c.bounds.2, c.bounds.3]))
        .collect())
}

pub fn instance_boxes(mask: &MaskBitmap) -> Result<Vec<BBox>, PromptError> {
    instance_boxes_with(mask, MIN_INSTANCE_SIZE)
}

/// Rasterizes the union of filled boxes.
pub fn boxes_as_mask(boxes: &[BBox], dims: (usize, usize)) -> Result<MaskBitmap, PromptError> {
    let (h, w) = dims;
    let mut mask = MaskBitmap::new(h, w);
    for b in boxes {
        if b.row_max >= h || b.col_max >= w {
            return Err(PromptError::OutOfBounds(*b, h, w));
        }
        for r in b.row_min..=b.row_max {
            for c in b.col_min..=b.col_max {
                mask.set(r, c, true);
            }
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxKind {
    Union,
    Instance,
}

/// One line of the box export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub sample_id: String,
    pub label: String,
    pub kind: BoxKind,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRecord {
    pub structure: Structure,
    pub n_prompts: usize,
    pub dice: f64,
}

impl EfficiencyRecord {
    /// A text-prompted prediction always uses exactly one prompt.
    pub fn text_prompt(structure: Structure, dice: f64) -> Self {
        Self {
            structure,
            n_prompts: 1,
            dice,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    /// Structure name, or "overall".
    pub group: String,
    pub mean_prompts: f64,
    pub mean_dice: f64,
    pub n: usize,
}

/// Mean prompt count and Dice per structure (tissue, cell, nuclei order) plus overall.
pub fn prompt_efficiency(records: &[EfficiencyRecord]) -> Result<Vec<EfficiencyRow>, PromptError> {
    if records.is_empty() {
        return Err(PromptError::EmptyRecords);
    }
    let mut groups: BTreeMap<Structure, Vec<&EfficiencyRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.structure).or_default().push(r);
    }
    let row = |group: String, recs: &[&EfficiencyRecord]| {
        let n = recs.len() as f64;
        EfficiencyRow {
            group,
            mean_prompts: recs.iter().map(|r| r.n_prompts as f64).sum::<f64>() / n,
            mean_dice: recs.iter().map(|r| r.dice).sum::<f64>() / n,
            n: recs.len(),
        }
    };
    let mut rows: Vec<EfficiencyRow> = groups
        .iter()
        .map(|(s, recs)| row(s.to_string(), recs))
        .collect();
    let all: Vec<&EfficiencyRecord> = records.iter().collect();
    rows.push(row("overall".into(), &all));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{dice, instance_count};
    use proptest::prelude::*;

    fn rect(mask: &mut MaskBitmap, r0: usize, c0: usize, h: usize, w: usize) {
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                mask.set(r, c, true);
            }
        }
    }

    #[test]
    fn union_box_cases() {
        let mut m = MaskBitmap::new(20, 20);
        m.set(2, 3, true);
        m.set(10, 8, true);
        assert_eq!(union_box(&m).unwrap(), BBox::new(2, 3, 10, 8));
        assert_eq!(union_box(&MaskBitmap::filled(7, 9)).unwrap(), BBox::new(0, 0, 6, 8));
        let mut p = MaskBitmap::new(10, 10);
        p.set(5, 5, true);
        assert_eq!(union_box(&p).unwrap(), BBox::new(5, 5, 5, 5));
        assert_eq!(union_box(&MaskBitmap::new(3, 3)), Err(PromptError::EmptyMask));
    }

    #[test]
    fn instance_box_cases() {
        let mut m = MaskBitmap::new(40, 40);
        rect(&mut m, 2, 2, 5, 10);
        rect(&mut m, 20, 25, 10, 5);
        rect(&mut m, 35, 35, 3, 3); // 9 px, filtered
        let boxes = instance_boxes(&m).unwrap();
        assert_eq!(boxes, vec![BBox::new(2, 2, 6, 11), BBox::new(20, 25, 29, 29)]);
        assert_eq!(boxes.len(), instance_count(&m));
        let u = union_box(&m).unwrap();
        assert!(boxes.iter().all(|b| u.contains(b)));
    }

    #[test]
    fn boxes_as_mask_cases() {
        let m = boxes_as_mask(&[BBox::new(0, 0, 9, 9)], (20, 20)).unwrap();
        assert_eq!(m.count(), 100);
        let m = boxes_as_mask(&[BBox::new(0, 0, 9, 9), BBox::new(5, 5, 14, 14)], (20, 20)).unwrap();
        assert_eq!(m.count(), 175);
        assert!(boxes_as_mask(&[], (4, 4)).unwrap().is_blank());
        assert!(matches!(
            boxes_as_mask(&[BBox::new(0, 0, 4, 4)], (4, 4)),
            Err(PromptError::OutOfBounds(..))
        ));
    }

    #[test]
    fn box_json_is_flat_array() {
        let rec = BoxRecord {
            sample_id: "s1".into(),
            label: "colon-tissue-gland".into(),
            kind: BoxKind::Instance,
            boxes: vec![BBox::new(1, 2, 3, 4)],
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            json,
            r#"{"sample_id":"s1","label":"colon-tissue-gland","kind":"instance","boxes":[[1,2,3,4]]}"#
        );
    }

    #[test]
    fn efficiency_table() {
        let records: Vec<EfficiencyRecord> = [0.7, 0.5, 0.9]
            .iter()
            .zip(Structure::ALL)
            .map(|(&d, s)| EfficiencyRecord::text_prompt(s, d))
            .collect();
        let rows = prompt_efficiency(&records).unwrap();
        assert!(rows.iter().all(|r| r.mean_prompts == 1.0));
        assert_eq!(rows.last().unwrap().group, "overall");

        let mixed = [
            EfficiencyRecord { structure: Structure::Tissue, n_prompts: 12, dice: 0.8 },
            EfficiencyRecord { structure: Structure::Tissue, n_prompts: 4, dice: 0.6 },
            EfficiencyRecord { structure: Structure::Nuclei, n_prompts: 20, dice: 0.4 },
        ];
        let rows = prompt_efficiency(&mixed).unwrap();
        assert_eq!(rows[0].group, "tissue");
        assert_eq!(rows[0].mean_prompts, 8.0);
        assert!((rows[0].mean_dice - 0.7).abs() < 1e-12);
        assert_eq!(rows[2].mean_prompts, 12.0);
        assert_eq!(prompt_efficiency(&[]), Err(PromptError::EmptyRecords));
    }

    fn blob_mask() -> impl Strategy<Value = MaskBitmap> {
        prop::collection::vec((0usize..6, 0usize..6, 6usize..9, 6usize..9), 2..5).prop_map(|blobs| {
            // Blobs sit on a 6x6 lattice of 10-px cells so they never touch.
            let mut m = MaskBitmap::new(60, 60);
            let mut used = std::collections::HashSet::new();
            for (gy, gx, h, w) in blobs {
                if used.insert((gy, gx)) {
                    rect(&mut m, gy * 10, gx * 10, h, w);
                }
            }
            m
        })
    }

    proptest! {
        #[test]
        fn union_contains_instances_and_box_dice_ordering(m in blob_mask()) {
            let u = union_box(&m).unwrap();
            let boxes = instance_boxes(&m).unwrap();
            prop_assert!(boxes.iter().all(|b| u.contains(b)));
            prop_assert_eq!(boxes.len(), instance_count(&m));
            if boxes.len() >= 2 {
                let inst = dice(&boxes_as_mask(&boxes, m.dims()).unwrap(), &m).unwrap();
                let uni = dice(&boxes_as_mask(&[u], m.dims()).unwrap(), &m).unwrap();
                prop_assert!(inst >= uni);
            }
            let once = boxes_as_mask(&boxes, m.dims()).unwrap();
            let twice_list: Vec<BBox> = boxes.iter().chain(boxes.iter()).copied().collect();
            prop_assert_eq!(boxes_as_mask(&twice_list, m.dims()).unwrap(), once);
        }
    }
}
