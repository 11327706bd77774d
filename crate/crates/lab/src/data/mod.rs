//! Detection datasets: COCO-format ingestion, the synthetic shapes
//! generator, and preprocessing for the network.

pub mod coco;
pub mod synthetic;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use ssldetr_core::matching::GroundTruthSet;
use ssldetr_core::{BBox, Image, PatchGrid};

use crate::error::{LabError, Result};
use crate::model::{PIXEL_MEAN, PIXEL_STD};

pub use coco::{export_coco, load_coco, load_image_folder};
pub use synthetic::{generate_synthetic, SyntheticConfig};

#[derive(Debug, Clone)]
pub enum ImageSource {
    File(PathBuf),
    Pixels(Arc<Image>),
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub source: ImageSource,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    /// Contiguous class index in `[0, num_classes)`.
    pub label: usize,
    /// Normalized `(cx, cy, w, h)`.
    pub bbox: BBox,
    pub iscrowd: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassInfo {
    /// Id used in COCO files.
    pub coco_id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Default)]
pub struct DetectionDataset {
    pub images: Vec<ImageRecord>,
    /// One list per image, aligned with `images`.
    pub annotations: Vec<Vec<Annotation>>,
    pub classes: Vec<ClassInfo>,
    /// False for unlabeled image collections.
    pub labeled: bool,
}

/// Problems found while loading that did not abort the load.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub missing_images: Vec<PathBuf>,
    /// Boxes extending past the image border, clamped to it.
    pub clamped_boxes: usize,
    /// Annotations discarded because nothing of them lies inside the image.
    pub dropped_annotations: Vec<u64>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.missing_images.is_empty() && self.clamped_boxes == 0 && self.dropped_annotations.is_empty()
    }
}

impl DetectionDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Raw `[0, 1]` RGB pixels of image `index`.
    pub fn load_pixels(&self, index: usize) -> Result<Image> {
        let record = &self.images[index];
        match &record.source {
            ImageSource::Pixels(img) => Ok((**img).clone()),
            ImageSource::File(path) => read_image(path),
        }
    }

    /// Non-crowd objects of image `index` as a training target.
    pub fn ground_truth(&self, index: usize) -> Result<GroundTruthSet> {
        let (labels, boxes) = self.annotations[index]
            .iter()
            .filter(|a| !a.iscrowd)
            .map(|a| (a.label, a.bbox))
            .unzip();
        Ok(GroundTruthSet::new(labels, boxes)?)
    }

    /// Subset with the given image indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> DetectionDataset {
        DetectionDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            annotations: indices.iter().map(|&i| self.annotations[i].clone()).collect(),
            classes: self.classes.clone(),
            labeled: self.labeled,
        }
    }

    /// Every annotation's class index is in range and every box is valid.
    pub fn validate(&self) -> Result<()> {
        if self.annotations.len() != self.images.len() {
            return Err(LabError::Data(format!(
                "{} annotation lists for {} images",
                self.annotations.len(),
                self.images.len()
            )));
        }
        for (record, anns) in self.images.iter().zip(&self.annotations) {
            for a in anns {
                if a.label >= self.classes.len() {
                    return Err(LabError::Data(format!(
                        "image {}: class index {} out of range",
                        record.id, a.label
                    )));
                }
                a.bbox.validate().map_err(|e| {
                    LabError::Data(format!("image {}: {e}", record.id))
                })?;
            }
        }
        Ok(())
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| LabError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(Image::new(3, h, w, data)?)
}

/// 8-bit RGB rendering of a `[0, 1]` image; values are clamped.
pub fn to_rgb8(img: &Image) -> image::RgbImage {
    let (c, h, w) = img.shape();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let mut px = [0u8; 3];
        for (ch, v) in px.iter_mut().enumerate() {
            let src = if c == 1 { 0 } else { ch };
            let value = img.get(src, y as usize, x as usize);
            *v = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        image::Rgb(px)
    })
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    to_rgb8(img).save(path).map_err(|source| LabError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// A resized image ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// Resized `[0, 1]` pixels; SSL targets are built from these.
    pub pixels: Image,
    /// Per-channel standardized pixels as the network sees them.
    pub normalized: Image,
}

/// Bilinear resize to `target_size x target_size` followed by per-channel
/// standardization. Normalized boxes are unaffected by the resize.
pub fn resize_and_normalize(image: &Image, target_size: usize, factor: usize) -> Result<ModelInput> {
    PatchGrid::new(target_size, target_size, factor)?;
    let pixels = image.resize_bilinear(target_size, target_size)?;
    Ok(ModelInput {
        normalized: normalize(&pixels)?,
        pixels,
    })
}

pub fn normalize(pixels: &Image) -> Result<Image> {
    let (c, h, w) = pixels.shape();
    if c != 3 {
        return Err(LabError::Data(format!("expected 3 channels, got {c}")));
    }
    let mut out = pixels.clone();
    for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        for v in plane {
            *v = (*v - PIXEL_MEAN[ch]) / PIXEL_STD[ch];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downscale_keeps_grid_compatibility() {
        let img = Image::filled(3, 1024, 1024, 0.25);
        let input = resize_and_normalize(&img, 512, 32).unwrap();
        assert_eq!(input.pixels.shape(), (3, 512, 512));
        let grid = PatchGrid::new(512, 512, 32).unwrap();
        assert!(ssldetr_core::patchgrid::extract_patches(&input.pixels, &grid).is_ok());
        assert!(input.pixels.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let data: Vec<f32> = (0..3 * 64 * 64).map(|i| (i % 251) as f32 / 251.0).collect();
        let img = Image::new(3, 64, 64, data).unwrap();
        assert_eq!(resize_and_normalize(&img, 64, 32).unwrap().pixels, img);
    }

    #[test]
    fn non_divisible_target_is_rejected() {
        let img = Image::zeros(3, 64, 64);
        assert!(resize_and_normalize(&img, 100, 32).is_err());
    }

    #[test]
    fn normalization_uses_channel_statistics() {
        let img = Image::filled(3, 2, 2, 0.485);
        let n = normalize(&img).unwrap();
        assert!(n.get(0, 0, 0).abs() < 1e-6);
        assert!((n.get(1, 1, 1) - (0.485 - 0.456) / 0.224).abs() < 1e-6);
    }
}
