//! Model inference in COCO result form and the serialized evaluation report.

use serde::{Deserialize, Serialize};
use ssldetr_core::eval::{compute_coco_map, Detection, EvalReport, GroundTruth, NUM_THRESHOLDS};
use ssldetr_core::BBox;

use crate::data::DetectionDataset;
use crate::error::{LabError, Result};
use crate::loss::{best_class, class_probabilities};
use crate::model::Detector;
use crate::train::{images_to_tensor, load_model_image};

/// Column order of the summary table.
pub const SUMMARY_COLUMNS: [&str; 6] = ["AP", "AP50", "AP75", "APs", "APm", "APl"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub category_id: u64,
    pub name: String,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// JSON form of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub ap_per_threshold: Vec<f64>,
    pub per_class: Vec<ClassSummary>,
}

impl EvalSummary {
    pub fn from_report(report: &EvalReport, names: &dyn Fn(u64) -> String) -> Self {
        Self {
            ap: report.map,
            ap50: report.ap50,
            ap75: report.ap75,
            ap_small: report.ap_small,
            ap_medium: report.ap_medium,
            ap_large: report.ap_large,
            ap_per_threshold: report.ap_per_threshold.to_vec(),
            per_class: report
                .per_class
                .iter()
                .map(|c| ClassSummary {
                    category_id: c.category_id,
                    name: names(c.category_id),
                    ap: c.ap,
                    ap50: c.ap50,
                    ap75: c.ap75,
                })
                .collect(),
        }
    }

    /// `[AP, AP50, AP75, APs, APm, APl]`.
    pub fn columns(&self) -> [f64; 6] {
        [
            self.ap,
            self.ap50,
            self.ap75,
            self.ap_small,
            self.ap_medium,
            self.ap_large,
        ]
    }

    /// Two-line text table in [`SUMMARY_COLUMNS`] order.
    pub fn table(&self) -> String {
        let header: Vec<String> = SUMMARY_COLUMNS.iter().map(|c| format!("{c:>8}")).collect();
        let values: Vec<String> = self.columns().iter().map(|v| format!("{v:>8.4}")).collect();
        format!("{}\n{}", header.join(""), values.join(""))
    }

    pub fn check_consistency(&self) -> bool {
        self.ap_per_threshold.len() == NUM_THRESHOLDS
            && self.ap == self.ap_per_threshold.iter().sum::<f64>() / NUM_THRESHOLDS as f64
    }
}

/// Ground truth of a dataset in absolute pixels of the original images.
pub fn dataset_ground_truth(dataset: &DetectionDataset) -> Vec<GroundTruth> {
    let mut out = Vec::new();
    for (record, anns) in dataset.images.iter().zip(&dataset.annotations) {
        for a in anns {
            let b = a.bbox.scale(record.width as f64, record.height as f64);
            let mut g = GroundTruth::new(record.id, dataset.classes[a.label].coco_id, b.to_xywh());
            g.iscrowd = a.iscrowd;
            out.push(g);
        }
    }
    out
}

/// Every query of every image as a scored detection of its most likely real
/// class, in the original image's pixel coordinates.
pub fn predict(model: &Detector, dataset: &DetectionDataset, batch_size: usize) -> Result<Vec<Detection>> {
    if model.config().num_classes != dataset.num_classes() {
        return Err(LabError::Data(format!(
            "model predicts {} classes but the dataset has {}",
            model.config().num_classes,
            dataset.num_classes()
        )));
    }
    let size = model.config().image_size;
    let mut detections = Vec::new();
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = chunk
            .iter()
            .map(|&i| load_model_image(dataset, i, size))
            .collect::<Result<Vec<_>>>()?;
        let pixels = images_to_tensor(&images, model.dtype(), model.device())?;
        let out = model.detect(&pixels)?;
        let probs = class_probabilities(&out.logits)?;
        let boxes: Vec<Vec<Vec<f64>>> = out.boxes.to_dtype(candle_core::DType::F64)?.to_vec3()?;
        for (k, &i) in chunk.iter().enumerate() {
            let record = &dataset.images[i];
            for (p, b) in probs[k].iter().zip(&boxes[k]) {
                let (label, score) = best_class(p);
                let bbox = BBox::new(b[0], b[1], b[2], b[3])
                    .clamp_unit()
                    .scale(record.width as f64, record.height as f64);
                detections.push(Detection {
                    image_id: record.id,
                    category_id: dataset.classes[label].coco_id,
                    bbox: bbox.to_xywh(),
                    score,
                });
            }
        }
    }
    Ok(detections)
}

pub fn evaluate_detections(dataset: &DetectionDataset, detections: &[Detection]) -> Result<EvalSummary> {
    let gts = dataset_ground_truth(dataset);
    let image_ids: Vec<u64> = dataset.images.iter().map(|r| r.id).collect();
    let category_ids: Vec<u64> = dataset.classes.iter().map(|c| c.coco_id).collect();
    let report = compute_coco_map(detections, &gts, &image_ids, &category_ids)?;
    let names = |id: u64| {
        dataset
            .classes
            .iter()
            .find(|c| c.coco_id == id)
            .map(|c| c.name.clone())
            .unwrap_or_default()
    };
    Ok(EvalSummary::from_report(&report, &names))
}

/// COCO evaluation of `model` on a labeled, non-empty dataset.
pub fn evaluate_model(model: &Detector, dataset: &DetectionDataset, batch_size: usize) -> Result<EvalSummary> {
    if dataset.is_empty() {
        return Err(LabError::Data("cannot evaluate on an empty dataset".into()));
    }
    if !dataset.labeled {
        return Err(LabError::Data("cannot evaluate on a dataset without annotations".into()));
    }
    let detections = predict(model, dataset, batch_size)?;
    evaluate_detections(dataset, &detections)
}
