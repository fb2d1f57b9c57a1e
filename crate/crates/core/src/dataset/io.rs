//! Mask, image and manifest files.
//!
//! Masks are single-channel 8-bit PNGs whose pixel value is the class id.
//! Images are 8-bit RGB PNGs. The manifest is a UTF-8 text file with one
//! `image_path<TAB>mask_path<TAB>id` line per sample; paths are relative to
//! the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};

use super::SceneSample;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::ops::resize_bilinear;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    if let Some(c) = mask.data().iter().find(|&&c| c > 255) {
        return Err(Error::Format(format!(
            "class id {c} does not fit an 8-bit mask file"
        )));
    }
    let bytes: Vec<u8> = mask.data().iter().map(|&c| c as u8).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .ok_or_else(|| Error::Shape("mask buffer size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| image_err(path, e))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(image_err(
                path,
                format!("expected single-channel 8-bit mask, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = gray.dimensions();
    Mask::new(
        h as usize,
        w as usize,
        gray.into_raw().into_iter().map(u32::from).collect(),
    )
}

/// Writes an `H×W×3` image in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_image(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w, c) = image.dims3();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Shape("image buffer size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Loads an image as `H×W×3` floats in `[0, 1]`, bilinearly resized to
/// `size` when given.
pub fn load_image(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor<f32>> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    let t = Tensor::from_vec(&[h as usize, w as usize, 3], data)?;
    match size {
        Some((th, tw)) if (th, tw) != (h as usize, w as usize) => {
            let chw = resize_bilinear(&t.hwc_to_chw(), th, tw);
            Ok(chw.chw_to_hwc())
        }
        _ => Ok(t),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub id: String,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        for field in [e.image.to_string_lossy(), e.mask.to_string_lossy(), e.id.as_str().into()] {
            if field.contains('\t') || field.contains('\n') {
                return Err(Error::Format(format!("manifest field {field:?} contains a separator")));
            }
        }
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            e.image.to_string_lossy(),
            e.mask.to_string_lossy(),
            e.id
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let parts: Vec<&str> = line.split('\t').collect();
            match parts.as_slice() {
                [image, mask, id] => Ok(ManifestEntry {
                    image: image.into(),
                    mask: mask.into(),
                    id: id.to_string(),
                }),
                _ => Err(Error::Format(format!(
                    "{}:{}: expected 3 tab-separated fields, found {}",
                    path.display(),
                    n + 1,
                    parts.len()
                ))),
            }
        })
        .collect()
}

/// Reads a manifest and loads every sample, resizing images to `size`.
/// Masks must already be at `size`.
pub fn load_manifest(path: &Path, size: Option<(usize, usize)>) -> Result<Vec<SceneSample>> {
    let root = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            let image = load_image(&root.join(&e.image), size)?;
            let mask = load_mask(&root.join(&e.mask))?;
            let (h, w, _) = image.dims3();
            if (mask.height(), mask.width()) != (h, w) {
                return Err(Error::Shape(format!(
                    "mask for {} is {}x{}, image is {}x{}",
                    e.id,
                    mask.height(),
                    mask.width(),
                    h,
                    w
                )));
            }
            Ok(SceneSample {
                id: e.id,
                image,
                mask,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_scene, DatasetConfig};

    #[test]
    fn generated_mask_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig::default();
        let s = generate_scene(&cfg, 3).unwrap();
        let p = dir.path().join("m.png");
        save_mask(&s.mask, &p).unwrap();
        let back = load_mask(&p).unwrap();
        assert_eq!(back, s.mask);
        assert!(back.data().iter().all(|&c| c < 4));
    }

    #[test]
    fn zero_mask_decodes_to_zero_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.png");
        save_mask(&Mask::filled(4, 4, 0), &p).unwrap();
        let back = load_mask(&p).unwrap();
        assert_eq!(back.len(), 16);
        assert!(back.data().iter().all(|&c| c == 0));
    }

    #[test]
    fn wide_class_id_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::new(1, 2, vec![0, 256]).unwrap();
        assert!(matches!(save_mask(&m, &dir.path().join("x.png")), Err(Error::Format(_))));
    }

    #[test]
    fn malformed_mask_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.png");
        fs::write(&p, b"not a png").unwrap();
        let err = load_mask(&p).unwrap_err();
        assert!(err.to_string().contains("junk.png"), "{err}");
        let missing = dir.path().join("missing.png");
        assert!(matches!(load_mask(&missing), Err(Error::Io { .. })));
    }

    #[test]
    fn rgb_file_is_not_accepted_as_mask() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        save_image(&Tensor::full(&[2, 2, 3], 0.5), &p).unwrap();
        assert!(load_mask(&p).is_err());
    }

    #[test]
    fn image_round_trip_is_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(&DatasetConfig::default(), 0).unwrap();
        let p = dir.path().join("i.png");
        save_image(&s.image, &p).unwrap();
        let back = load_image(&p, None).unwrap();
        assert_eq!(back.shape(), s.image.shape());
        for (a, b) in back.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn constant_image_resizes_to_constant() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.png");
        save_image(&Tensor::full(&[5, 7, 3], 0.4), &p).unwrap();
        let q = (0.4f32 * 255.0).round() / 255.0;
        for size in [(3, 3), (16, 16), (64, 32)] {
            let img = load_image(&p, Some(size)).unwrap();
            assert_eq!(img.shape(), &[size.0, size.1, 3]);
            assert!(img.data().iter().all(|v| (v - q).abs() < 1e-6));
        }
    }

    #[test]
    fn manifest_round_trip_and_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![ManifestEntry {
            image: "images/a.png".into(),
            mask: "masks/a.png".into(),
            id: "a".into(),
        }];
        let p = dir.path().join(MANIFEST_FILE);
        write_manifest(&p, &entries).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), entries);
        fs::write(&p, "only\ttwo\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Format(_))));
    }
}
