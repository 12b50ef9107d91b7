//! Seeded synthetic data: shapes-on-noise segmentation samples, multi-instance
//! masks and MIL slides with object masks.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::explain::{ObjectMasks, Slide};
use crate::model::Sample;
use crate::raster::MaskBitmap;
use crate::taxonomy::{parse_label, render_prompt, HierLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Diamond,
}

impl Shape {
    /// Whether pixel `(r, c)` lies inside the shape centred at `(cy, cx)` with half-size `s`.
    pub fn contains(self, r: usize, c: usize, cy: f64, cx: f64, s: f64) -> bool {
        let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
        match self {
            Shape::Disk => dy * dy + dx * dx <= s * s,
            Shape::Square => dy.abs() <= s * 0.85 && dx.abs() <= s * 0.85,
            Shape::Diamond => dy.abs() + dx.abs() <= s * 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCategory {
    pub label: HierLabel,
    pub shape: Shape,
    pub color: [u8; 3],
}

impl ShapeCategory {
    pub fn prompt(&self) -> String {
        render_prompt(&self.label)
    }
}

/// Three categories with distinct shapes, colours and equally long prompts.
pub fn default_categories() -> Vec<ShapeCategory> {
    [
        ("Colon-Tissue-Gland", Shape::Disk, [210, 50, 60]),
        ("Breast-Cell-Cancerous", Shape::Square, [50, 190, 70]),
        ("Prostate-Nuclei-Neoplastic", Shape::Diamond, [60, 70, 210]),
    ]
    .into_iter()
    .map(|(raw, shape, color)| ShapeCategory {
        label: parse_label(raw).expect("valid label"),
        shape,
        color,
    })
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub count: usize,
    pub size: usize,
    /// Half-size range of the drawn shapes in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Probability that a second shape of another category is drawn.
    pub distractor_prob: f64,
    /// Amplitude of the uniform background noise around mid-grey.
    pub noise: u8,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            count: 200,
            size: 64,
            min_radius: 8.0,
            max_radius: 14.0,
            distractor_prob: 0.5,
            noise: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: RgbImage,
    /// Pixels of the target category only.
    pub mask: MaskBitmap,
    pub category: usize,
    pub label: HierLabel,
    pub prompt: String,
}

impl SyntheticSample {
    pub fn to_sample(&self) -> Sample {
        Sample {
            image: self.image.clone(),
            mask: self.mask.clone(),
            prompt: self.prompt.clone(),
        }
    }
}

fn noise_background(rng: &mut ChaCha8Rng, h: usize, w: usize, amp: u8) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |_, _| {
        let base = 128i32 + rng.random_range(-(amp as i32)..=amp as i32);
        Rgb([0, 1, 2].map(|_| (base + rng.random_range(-6..=6)).clamp(0, 255) as u8))
    })
}

fn draw(image: &mut RgbImage, mask: &MaskBitmap, color: [u8; 3], rng: &mut ChaCha8Rng) {
    for (r, c) in (0..mask.height()).flat_map(|r| (0..mask.width()).map(move |c| (r, c))) {
        if mask.get(r, c) {
            let jitter: [i32; 3] = [0, 1, 2].map(|_| rng.random_range(-12..=12));
            let px = [0, 1, 2].map(|k| (color[k] as i32 + jitter[k]).clamp(0, 255) as u8);
            image.put_pixel(c as u32, r as u32, Rgb(px));
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, shape: Shape, size: usize, rmin: f64, rmax: f64) -> MaskBitmap {
    let s = rng.random_range(rmin..=rmax);
    let lo = s + 1.0;
    let hi = (size as f64 - s - 1.0).max(lo);
    let cy = rng.random_range(lo..=hi);
    let cx = rng.random_range(lo..=hi);
    MaskBitmap::from_fn(size, size, |r, c| shape.contains(r, c, cy, cx, s))
}

fn overlaps_or_touches(a: &MaskBitmap, b: &MaskBitmap) -> bool {
    let (h, w) = a.dims();
    (0..h).any(|r| {
        (0..w).any(|c| {
            a.get(r, c) && (r.saturating_sub(2)..(r + 3).min(h)).any(|rr| (c.saturating_sub(2)..(c + 3).min(w)).any(|cc| b.get(rr, cc)))
        })
    })
}

/// Generates the shapes-on-noise corpus. Categories cycle so the counts are
/// balanced; a distractor never touches the target.
pub fn generate_corpus(categories: &[ShapeCategory], cfg: &CorpusConfig) -> Vec<SyntheticSample> {
    assert!(!categories.is_empty(), "at least one category");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.count)
        .map(|i| {
            let k = i % categories.len();
            let cat = &categories[k];
            let mut image = noise_background(&mut rng, cfg.size, cfg.size, cfg.noise);
            let mask = random_shape(&mut rng, cat.shape, cfg.size, cfg.min_radius, cfg.max_radius);
            if categories.len() > 1 && rng.random_bool(cfg.distractor_prob) {
                let other = &categories[(k + rng.random_range(1..categories.len())) % categories.len()];
                for _ in 0..20 {
                    let d = random_shape(&mut rng, other.shape, cfg.size, cfg.min_radius * 0.7, cfg.max_radius * 0.7);
                    if !overlaps_or_touches(&mask, &d) {
                        draw(&mut image, &d, other.color, &mut rng);
                        break;
                    }
                }
            }
            draw(&mut image, &mask, cat.color, &mut rng);
            SyntheticSample {
                image,
                mask,
                category: k,
                label: cat.label.clone(),
                prompt: cat.prompt(),
            }
        })
        .collect()
}

/// A mask with `n` disjoint axis-aligned blobs, each at least `min_side x min_side`,
/// separated by at least two background pixels so no two are 8-connected.
pub fn multi_instance_mask(size: usize, n: usize, min_side: usize, seed: u64) -> MaskBitmap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = MaskBitmap::new(size, size);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < n && attempts < 10_000 {
        attempts += 1;
        let hgt = rng.random_range(min_side..=2 * min_side);
        let wid = rng.random_range(min_side..=2 * min_side);
        if hgt + 2 > size || wid + 2 > size {
            continue;
        }
        let r0 = rng.random_range(1..size - hgt);
        let c0 = rng.random_range(1..size - wid);
        let clear = (r0 - 1..(r0 + hgt + 1).min(size)).all(|r| (c0 - 1..(c0 + wid + 1).min(size)).all(|c| !mask.get(r, c)));
        if clear {
            for r in r0..r0 + hgt {
                for c in c0..c0 + wid {
                    mask.set(r, c, true);
                }
            }
            placed += 1;
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlideConfig {
    pub count: usize,
    pub grid: (usize, usize),
    pub patch_size: usize,
    /// Probability that a patch of a positive slide holds a tumor blob.
    pub tumor_prob: f64,
    /// Probability that any patch holds lymphocyte dots.
    pub lymphocyte_prob: f64,
    pub seed: u64,
}

impl Default for SlideConfig {
    fn default() -> Self {
        Self {
            count: 40,
            grid: (3, 3),
            patch_size: 16,
            tumor_prob: 0.5,
            lymphocyte_prob: 0.5,
            seed: 0,
        }
    }
}

pub const TUMOR_OBJECT: &str = "tumor";
pub const LYMPHOCYTE_OBJECT: &str = "lymphocyte";

/// Slides with two object types. Label 1 slides contain at least one red tumor
/// blob; blue lymphocyte dots appear independently of the label.
pub fn generate_slides(cfg: &SlideConfig) -> Vec<(Slide, ObjectMasks)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = cfg.patch_size;
    let n = cfg.grid.0 * cfg.grid.1;
    (0..cfg.count)
        .map(|s| {
            let label = s % 2;
            let forced = if label == 1 { Some(rng.random_range(0..n)) } else { None };
            let mut patches = Vec::with_capacity(n);
            let mut tumor = Vec::with_capacity(n);
            let mut lymph = Vec::with_capacity(n);
            for i in 0..n {
                let mut img = noise_background(&mut rng, p, p, 20);
                let t = if label == 1 && (forced == Some(i) || rng.random_bool(cfg.tumor_prob)) {
                    let r = p as f64 * 0.3;
                    random_shape(&mut rng, Shape::Disk, p, r * 0.8, r)
                } else {
                    MaskBitmap::new(p, p)
                };
                let mut l = MaskBitmap::new(p, p);
                if rng.random_bool(cfg.lymphocyte_prob) {
                    for _ in 0..3 {
                        let dot = random_shape(&mut rng, Shape::Disk, p, 1.5, 2.0);
                        if !overlaps_or_touches(&t, &dot) {
                            l = l.union(&dot).expect("same dims");
                        }
                    }
                }
                draw(&mut img, &t, [200, 40, 70], &mut rng);
                draw(&mut img, &l, [50, 50, 190], &mut rng);
                patches.push(img);
                tumor.push(t);
                lymph.push(l);
            }
            (
                Slide { patches, grid: cfg.grid, label },
                ObjectMasks {
                    labels: vec![TUMOR_OBJECT.into(), LYMPHOCYTE_OBJECT.into()],
                    masks: vec![tumor, lymph],
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::instance_count;

    #[test]
    fn corpus_is_seeded_and_balanced() {
        let cats = default_categories();
        let cfg = CorpusConfig { count: 12, ..CorpusConfig::default() };
        let a = generate_corpus(&cats, &cfg);
        assert_eq!(a, generate_corpus(&cats, &cfg));
        assert_ne!(a, generate_corpus(&cats, &CorpusConfig { seed: 1, ..cfg }));
        for (i, s) in a.iter().enumerate() {
            assert_eq!(s.category, i % 3);
            assert_eq!(s.mask.dims(), (64, 64));
            assert!(s.mask.count() > 100);
            assert_eq!(s.prompt.split_whitespace().count(), 5);
        }
    }

    #[test]
    fn mask_covers_target_color_only() {
        let cats = default_categories();
        let corpus = generate_corpus(&cats, &CorpusConfig { count: 30, distractor_prob: 1.0, ..CorpusConfig::default() });
        for s in &corpus {
            let target = cats[s.category].color;
            for (x, y, px) in s.image.enumerate_pixels() {
                let near = (0..3).all(|k| (px[k] as i32 - target[k] as i32).abs() <= 12);
                assert_eq!(near, s.mask.get(y as usize, x as usize));
            }
        }
    }

    #[test]
    fn multi_instance_counts() {
        for n in 1..6 {
            let m = multi_instance_mask(64, n, 6, n as u64);
            assert_eq!(instance_count(&m), n);
        }
    }

    #[test]
    fn slides_match_labels() {
        let cfg = SlideConfig { count: 6, ..SlideConfig::default() };
        let slides = generate_slides(&cfg);
        for (slide, objs) in &slides {
            slide.validate().unwrap();
            objs.validate(slide).unwrap();
            let has_tumor = objs.masks[0].iter().any(|m| !m.is_blank());
            assert_eq!(has_tumor, slide.label == 1);
        }
        assert_eq!(slides, generate_slides(&cfg));
    }
}
