//! COCO annotation and result files.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssldetr_core::eval::{Detection, GroundTruth};
use ssldetr_core::BBox;

use super::{Annotation, ClassInfo, DetectionDataset, ImageRecord, ImageSource, ValidationReport};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One entry of a COCO detection result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::json(path, e))
}

pub fn read_coco_file(path: &Path) -> Result<CocoFile> {
    read_json(path)
}

pub fn read_results(path: &Path) -> Result<Vec<CocoResult>> {
    read_json(path)
}

/// Ground truth in evaluator form. A missing `area` falls back to `w * h`.
pub fn eval_ground_truth(file: &CocoFile) -> Vec<GroundTruth> {
    file.annotations
        .iter()
        .map(|a| {
            let mut g = GroundTruth::new(a.image_id, a.category_id, a.bbox);
            if let Some(area) = a.area {
                g.area = area;
            }
            g.iscrowd = a.iscrowd != 0;
            g
        })
        .collect()
}

pub fn eval_detections(results: &[CocoResult]) -> Vec<Detection> {
    results
        .iter()
        .map(|r| Detection {
            image_id: r.image_id,
            category_id: r.category_id,
            bbox: r.bbox,
            score: r.score,
        })
        .collect()
}

/// Loads a COCO annotation file. Boxes become normalized `(cx, cy, w, h)`,
/// clamped to the image; category ids are remapped to `[0, num_classes)` in
/// ascending id order. Images whose file is absent under `image_root` are
/// left out and listed in the report.
pub fn load_coco(annotations: &Path, image_root: &Path) -> Result<(DetectionDataset, ValidationReport)> {
    let file = read_coco_file(annotations)?;
    let mut categories = file.categories.clone();
    categories.sort_by_key(|c| c.id);
    let class_of: HashMap<u64, usize> = categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    if class_of.len() != categories.len() {
        return Err(LabError::Data(format!(
            "{}: duplicate category ids",
            annotations.display()
        )));
    }

    let mut report = ValidationReport::default();
    let mut slot_of = HashMap::new();
    let mut images = Vec::new();
    for img in &file.images {
        if slot_of.contains_key(&img.id) {
            return Err(LabError::Data(format!("duplicate image id {}", img.id)));
        }
        if img.width == 0 || img.height == 0 {
            return Err(LabError::Data(format!("image {} has zero size", img.id)));
        }
        let path = image_root.join(&img.file_name);
        if !path.is_file() {
            report.missing_images.push(path);
            slot_of.insert(img.id, None);
            continue;
        }
        slot_of.insert(img.id, Some(images.len()));
        images.push(ImageRecord {
            id: img.id,
            file_name: img.file_name.clone(),
            source: ImageSource::File(path),
            height: img.height,
            width: img.width,
        });
    }

    let mut per_image: Vec<Vec<Annotation>> = vec![Vec::new(); images.len()];
    for a in &file.annotations {
        let slot = *slot_of.get(&a.image_id).ok_or_else(|| {
            LabError::Data(format!(
                "annotation {} references unknown image {}",
                a.id, a.image_id
            ))
        })?;
        let label = *class_of.get(&a.category_id).ok_or_else(|| {
            LabError::Data(format!(
                "annotation {} references unknown category {}",
                a.id, a.category_id
            ))
        })?;
        let Some(slot) = slot else { continue };
        let record = &images[slot];
        let (w, h) = (record.width as f64, record.height as f64);
        let [x, y, bw, bh] = a.bbox;
        if a.bbox.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Data(format!("annotation {} has a non-finite box", a.id)));
        }
        let (x0, y0) = (x.clamp(0.0, w), y.clamp(0.0, h));
        let (x1, y1) = ((x + bw).clamp(0.0, w), (y + bh).clamp(0.0, h));
        if x1 <= x0 || y1 <= y0 {
            report.dropped_annotations.push(a.id);
            continue;
        }
        if (x0, y0, x1, y1) != (x, y, x + bw, y + bh) {
            report.clamped_boxes += 1;
        }
        per_image[slot].push(Annotation {
            label,
            bbox: BBox::from_xyxy(x0 / w, y0 / h, x1 / w, y1 / h),
            iscrowd: a.iscrowd != 0,
        });
    }

    let classes = categories
        .into_iter()
        .map(|c| ClassInfo {
            coco_id: c.id,
            name: c.name,
        })
        .collect();
    Ok((
        DetectionDataset {
            images,
            annotations: per_image,
            classes,
            labeled: true,
        },
        report,
    ))
}

/// Unlabeled dataset of every PNG or JPEG directly inside `dir`, sorted by
/// file name.
pub fn load_image_folder(dir: &Path) -> Result<DetectionDataset> {
    let entries = std::fs::read_dir(dir).map_err(|e| LabError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| LabError::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            paths.push(path);
        }
    }
    paths.sort();
    let mut images = Vec::with_capacity(paths.len());
    for (i, path) in paths.into_iter().enumerate() {
        let (width, height) = image::image_dimensions(&path).map_err(|source| LabError::Image {
            path: path.clone(),
            source,
        })?;
        images.push(ImageRecord {
            id: i as u64 + 1,
            file_name: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            source: ImageSource::File(path),
            height: height as usize,
            width: width as usize,
        });
    }
    let n = images.len();
    Ok(DetectionDataset {
        images,
        annotations: vec![Vec::new(); n],
        classes: Vec::new(),
        labeled: false,
    })
}

/// COCO representation of `dataset`, boxes in pixels.
pub fn to_coco(dataset: &DetectionDataset) -> CocoFile {
    let mut annotations = Vec::new();
    for (record, anns) in dataset.images.iter().zip(&dataset.annotations) {
        for a in anns {
            let [x, y, w, h] = a.bbox.to_xywh();
            let bbox = [
                x * record.width as f64,
                y * record.height as f64,
                w * record.width as f64,
                h * record.height as f64,
            ];
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: record.id,
                category_id: dataset.classes[a.label].coco_id,
                bbox,
                area: Some(bbox[2] * bbox[3]),
                iscrowd: a.iscrowd as u8,
            });
        }
    }
    CocoFile {
        images: dataset
            .images
            .iter()
            .map(|r| CocoImage {
                id: r.id,
                file_name: r.file_name.clone(),
                width: r.width,
                height: r.height,
            })
            .collect(),
        annotations,
        categories: dataset
            .classes
            .iter()
            .map(|c| CocoCategory {
                id: c.coco_id,
                name: c.name.clone(),
            })
            .collect(),
    }
}

/// Writes `annotations.json` into `dir`, plus a PNG for every image held in
/// memory, so the directory reloads with [`load_coco`].
pub fn export_coco(dataset: &DetectionDataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    for record in &dataset.images {
        let target = dir.join(&record.file_name);
        match &record.source {
            ImageSource::Pixels(img) => super::write_png(img, &target)?,
            ImageSource::File(src) if src != &target => {
                std::fs::copy(src, &target).map_err(|e| LabError::io(src, e))?;
            }
            ImageSource::File(_) => {}
        }
    }
    let path = dir.join("annotations.json");
    write_json(&path, &to_coco(dataset))?;
    Ok(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| LabError::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| LabError::io(path, e))
}

/// Category-id lookup in the dataset's COCO numbering.
pub fn coco_ids(dataset: &DetectionDataset) -> BTreeMap<usize, u64> {
    dataset
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (i, c.coco_id))
        .collect()
}
