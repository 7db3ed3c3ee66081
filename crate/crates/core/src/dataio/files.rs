use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use super::{enhance, Dataset, RawImage, SegmentationSample, Split, SynthConfig, IMAGE_SIZE};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record stored next to a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub ids: Vec<String>,
    pub split: Split,
    pub generator: Option<SynthConfig>,
}

struct Gray {
    width: usize,
    height: usize,
    max: u32,
    values: Vec<u32>,
}

fn unreadable(path: &Path, reason: impl ToString) -> Error {
    Error::UnreadableFile { path: path.to_path_buf(), reason: reason.to_string() }
}

fn read_gray(path: &Path) -> Result<Gray> {
    let img = image::open(path).map_err(|e| unreadable(path, e))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (max, values): (u32, Vec<u32>) = match img {
        DynamicImage::ImageLuma8(buf) => (255, buf.into_raw().into_iter().map(u32::from).collect()),
        DynamicImage::ImageLuma16(buf) => (65535, buf.into_raw().into_iter().map(u32::from).collect()),
        other => (65535, other.to_luma16().into_raw().into_iter().map(u32::from).collect()),
    };
    Ok(Gray { width, height, max, values })
}

fn split_name(name: &str) -> Option<(&str, &str)> {
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    if let Some(id) = stem.strip_prefix("img_") {
        Some(("img", id))
    } else {
        stem.strip_prefix("msk_").map(|id| ("msk", id))
    }
}

fn load_mask(path: &Path) -> Result<Vec<u8>> {
    let gray = read_gray(path)?;
    if let Some(&bad) = gray.values.iter().find(|&&v| v != 0 && v != 1 && v != gray.max) {
        return Err(Error::NonBinaryMask { path: path.to_path_buf(), value: bad });
    }
    let labels: Vec<u8> = gray.values.iter().map(|&v| u8::from(v > 0)).collect();
    if gray.width == IMAGE_SIZE && gray.height == IMAGE_SIZE {
        return Ok(labels);
    }
    // Nearest-neighbour keeps the mask binary.
    let mut out = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        let sy = ((y as f64 + 0.5) * gray.height as f64 / IMAGE_SIZE as f64) as usize;
        for x in 0..IMAGE_SIZE {
            let sx = ((x as f64 + 0.5) * gray.width as f64 / IMAGE_SIZE as f64) as usize;
            out.push(labels[sy.min(gray.height - 1) * gray.width + sx.min(gray.width - 1)]);
        }
    }
    Ok(out)
}

/// Loads `img_<id>.*` / `msk_<id>.*` pairs (PGM or PNG), enhancing each image.
/// The split comes from `manifest.json` when present, else `train`.
pub fn load_masks_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut pairs: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| unreadable(dir, e))?;
    for entry in entries {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some((kind, id)) = split_name(name) else { continue };
        let slot = pairs.entry(id.to_string()).or_default();
        if kind == "img" {
            slot.0 = Some(path.clone());
        } else {
            slot.1 = Some(path.clone());
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let split = match std::fs::read_to_string(dir.join(MANIFEST_FILE)) {
        Ok(text) => {
            let manifest: Manifest =
                serde_json::from_str(&text).map_err(|e| unreadable(&dir.join(MANIFEST_FILE), e))?;
            manifest.split
        }
        Err(_) => Split::Train,
    };

    let mut samples = Vec::with_capacity(pairs.len());
    for (id, paths) in pairs {
        let (Some(img_path), Some(msk_path)) = paths else {
            return Err(Error::MissingPair { id });
        };
        let gray = read_gray(&img_path)?;
        let raw = RawImage::new(gray.width, gray.height, gray.values.iter().map(|&v| v as f64).collect())?;
        let image = enhance(&raw)?;
        let mask = load_mask(&msk_path)?;
        samples.push(SegmentationSample::new(id, image, mask)?);
    }
    Ok(Dataset::new(samples, split))
}

/// Binary PGM (P5); 16-bit samples are big-endian as the format requires.
fn write_pgm(path: &Path, maxval: u16, values: &[u16]) -> Result<()> {
    let mut bytes = format!("P5\n{IMAGE_SIZE} {IMAGE_SIZE}\n{maxval}\n").into_bytes();
    for &v in values {
        if maxval > 255 {
            bytes.extend_from_slice(&v.to_be_bytes());
        } else {
            bytes.push(v as u8);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Writes images as 16-bit PGM (values in `[0, 1]` scaled to 65535), masks as
/// 8-bit 0/255 PGM, and a manifest.
pub fn write_dataset_dir(ds: &Dataset, dir: impl AsRef<Path>, generator: Option<&SynthConfig>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for s in &ds.samples {
        let pixels: Vec<u16> = s.image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
        write_pgm(&dir.join(format!("img_{}.pgm", s.id)), 65535, &pixels)?;
        let mask: Vec<u16> = s.mask.iter().map(|&m| u16::from(m) * 255).collect();
        write_pgm(&dir.join(format!("msk_{}.pgm", s.id)), 255, &mask)?;
    }
    let manifest = Manifest {
        ids: ds.samples.iter().map(|s| s.id.clone()).collect(),
        split: ds.split,
        generator: generator.cloned(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_generate;
    use image::{ImageBuffer, Luma};

    fn write_pgm8(path: &Path, w: u32, h: u32, data: Vec<u8>) {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(w, h, data).unwrap();
        buf.save(path).unwrap();
    }

    fn gradient_image(n: u32) -> Vec<u8> {
        (0..n * n).map(|i| (i % 251) as u8).collect()
    }

    #[test]
    fn loads_single_pair() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm8(&dir.path().join("img_001.pgm"), 40, 40, gradient_image(40));
        let mut mask = vec![0u8; 1600];
        mask[820] = 255;
        write_pgm8(&dir.path().join("msk_001.pgm"), 40, 40, mask);
        let ds = load_masks_dir(dir.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.samples[0].id, "001");
        assert_eq!(ds.samples[0].foreground(), 1);
        assert_eq!(ds.samples[0].mask[820], 1);
    }

    #[test]
    fn missing_mask_names_id() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm8(&dir.path().join("img_007.pgm"), 40, 40, gradient_image(40));
        match load_masks_dir(dir.path()) {
            Err(Error::MissingPair { id }) => assert_eq!(id, "007"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn value_37_is_not_binary() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm8(&dir.path().join("img_a.png"), 40, 40, gradient_image(40));
        let mut mask = vec![0u8; 1600];
        mask[5] = 37;
        write_pgm8(&dir.path().join("msk_a.png"), 40, 40, mask);
        assert!(matches!(load_masks_dir(dir.path()), Err(Error::NonBinaryMask { value: 37, .. })));
    }

    #[test]
    fn synthetic_roundtrip_keeps_masks_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { count: 6, seed: 11, ..SynthConfig::default() };
        let ds = synth_generate(&cfg).unwrap();
        write_dataset_dir(&ds, dir.path(), Some(&cfg)).unwrap();
        let loaded = load_masks_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 6);
        for (a, b) in ds.samples.iter().zip(&loaded.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
        }
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let manifest: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(manifest.generator, Some(cfg));
    }
}
