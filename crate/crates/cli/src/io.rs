//! File helpers: images, masks, manifests and content-addressed writes.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::RgbImage;
use pathsegkit::pipeline::DatasetManifest;
use pathsegkit::raster::MaskBitmap;
use sha2::{Digest, Sha256};

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).with_context(|| format!("reading image {}", path.display()))?.to_rgb8())
}

/// Any nonzero grey level is foreground.
pub fn read_mask(path: &Path) -> Result<MaskBitmap> {
    let img = image::open(path).with_context(|| format!("reading mask {}", path.display()))?;
    Ok(MaskBitmap::from_gray_image(&img.to_luma8()))
}

pub fn encode_png(img: &image::DynamicImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

pub fn mask_png(mask: &MaskBitmap) -> Result<Vec<u8>> {
    encode_png(&image::DynamicImage::ImageLuma8(mask.to_gray_image()))
}

pub fn rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    encode_png(&image::DynamicImage::ImageRgb8(img.clone()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` unless `path` already holds identical content. Returns whether
/// a write happened.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if let Ok(existing) = std::fs::read(path) {
        if sha256_hex(&existing) == sha256_hex(bytes) {
            return Ok(false);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(true)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    DatasetManifest::from_jsonl(&text).with_context(|| format!("parsing manifest {}", path.display()))
}

/// Resolves a manifest path relative to the manifest's directory.
pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// File stem used to name per-sample outputs.
pub fn stem(p: &str) -> String {
    Path::new(p).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_if_changed_skips_identical_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.bin");
        assert!(write_if_changed(&path, b"abc").unwrap());
        assert!(!write_if_changed(&path, b"abc").unwrap());
        assert!(write_if_changed(&path, b"abd").unwrap());
    }

    #[test]
    fn mask_png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mask = MaskBitmap::from_fn(7, 5, |r, c| (r + c) % 3 == 0);
        let path = dir.path().join("m.png");
        std::fs::write(&path, mask_png(&mask).unwrap()).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
    }

    #[test]
    fn resolves_relative_to_manifest() {
        assert_eq!(resolve(Path::new("/data/m.jsonl"), "img/a.png"), PathBuf::from("/data/img/a.png"));
        assert_eq!(resolve(Path::new("/data/m.jsonl"), "/abs.png"), PathBuf::from("/abs.png"));
    }
}
