//! COCO-protocol bounding-box evaluation.
//!
//! Follows the reference evaluator: per image and category, detections are
//! ranked by score (stable), capped at `max_detections`, and greedily matched
//! to the best still-free ground truth above each IoU threshold; crowd and
//! out-of-range ground truth are ignored. Precision is made monotone and
//! sampled at 101 recall points. All boxes are in absolute pixel `xywh`.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Number of IoU thresholds, `0.50:0.05:0.95`.
pub const NUM_THRESHOLDS: usize = 10;
pub const RECALL_POINTS: usize = 101;
pub const MAX_DETECTIONS: usize = 100;
/// Upper edge of the small bucket, in square pixels.
pub const SMALL_AREA: f64 = 32.0 * 32.0;
/// Upper edge of the medium bucket, in square pixels.
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;
const AREA_MAX: f64 = 1e5 * 1e5;

/// IoU thresholds computed the way `numpy.linspace(.5, .95, 10)` does.
pub fn iou_thresholds() -> [f64; NUM_THRESHOLDS] {
    let step = (0.95 - 0.5) / 9.0;
    let mut t = [0.0; NUM_THRESHOLDS];
    for (i, v) in t.iter_mut().enumerate() {
        *v = i as f64 * step + 0.5;
    }
    t[NUM_THRESHOLDS - 1] = 0.95;
    t
}

fn recall_thresholds() -> [f64; RECALL_POINTS] {
    let step = 1.0 / 100.0;
    let mut r = [0.0; RECALL_POINTS];
    for (i, v) in r.iter_mut().enumerate() {
        *v = i as f64 * step;
    }
    r[RECALL_POINTS - 1] = 1.0;
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: bool,
}

impl GroundTruth {
    pub fn new(image_id: u64, category_id: u64, bbox: [f64; 4]) -> Self {
        Self {
            image_id,
            category_id,
            bbox,
            area: bbox[2] * bbox[3],
            iscrowd: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

impl Detection {
    fn area(&self) -> f64 {
        self.bbox[2] * self.bbox[3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

/// Size class of a pixel area: small `< 32²`, medium `< 96²`, large otherwise.
pub fn size_bucket(area: f64) -> SizeBucket {
    if area < SMALL_AREA {
        SizeBucket::Small
    } else if area < MEDIUM_AREA {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

/// Buckets normalized `(w, h)` extents by their absolute area in an image of
/// the given size.
pub fn bucket_by_size(
    extents: &[(f64, f64)],
    image_width: f64,
    image_height: f64,
) -> Vec<SizeBucket> {
    extents
        .iter()
        .map(|&(w, h)| size_bucket(w * image_width * h * image_height))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    fn bounds(self) -> (f64, f64) {
        match self {
            AreaRange::All => (0.0, AREA_MAX),
            AreaRange::Small => (0.0, SMALL_AREA),
            AreaRange::Medium => (SMALL_AREA, MEDIUM_AREA),
            AreaRange::Large => (MEDIUM_AREA, AREA_MAX),
        }
    }

    /// Closed interval test, as in the reference tool.
    fn excludes(self, area: f64) -> bool {
        let (lo, hi) = self.bounds();
        area < lo || area > hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAp {
    pub category_id: u64,
    /// Mean over the ten thresholds, or `-1` when the class has no ground truth.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ap_per_threshold: [f64; NUM_THRESHOLDS],
    /// Mean of `ap_per_threshold`.
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `-1` when no ground truth falls in the bucket.
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub per_class: Vec<ClassAp>,
}

impl EvalReport {
    /// `[AP, AP50, AP75, APs, APm, APl]`.
    pub fn summary(&self) -> [f64; 6] {
        [
            self.map,
            self.ap50,
            self.ap75,
            self.ap_small,
            self.ap_medium,
            self.ap_large,
        ]
    }
}

/// Per-image, per-category match state at every threshold.
struct ImageEval {
    scores: Vec<f64>,
    /// `[threshold][detection]`
    matched: Vec<Vec<bool>>,
    ignored: Vec<Vec<bool>>,
    gt_ignored: Vec<bool>,
}

fn box_iou(d: &[f64; 4], g: &[f64; 4], crowd: bool) -> f64 {
    let iw = ((d[0] + d[2]).min(g[0] + g[2]) - d[0].max(g[0])).max(0.0);
    let ih = ((d[1] + d[3]).min(g[1] + g[3]) - d[1].max(g[1])).max(0.0);
    let inter = iw * ih;
    let union = if crowd {
        d[2] * d[3]
    } else {
        d[2] * d[3] + g[2] * g[3] - inter
    };
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Stable order of indices by descending score.
fn rank_by_score<T>(items: &[T], score: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| score(&items[b]).total_cmp(&score(&items[a])));
    order
}

fn evaluate_image(
    gts: &[&GroundTruth],
    dts: &[&Detection],
    range: AreaRange,
    thresholds: &[f64],
    max_dets: usize,
) -> Option<ImageEval> {
    if gts.is_empty() && dts.is_empty() {
        return None;
    }
    let ignore_flag: Vec<bool> = gts
        .iter()
        .map(|g| g.iscrowd || range.excludes(g.area))
        .collect();
    // non-ignored ground truth first, stable
    let mut g_order: Vec<usize> = (0..gts.len()).collect();
    g_order.sort_by_key(|&i| ignore_flag[i]);
    let gts: Vec<&GroundTruth> = g_order.iter().map(|&i| gts[i]).collect();
    let gt_ignored: Vec<bool> = g_order.iter().map(|&i| ignore_flag[i]).collect();

    let mut d_order = rank_by_score(dts, |d| d.score);
    d_order.truncate(max_dets);
    let dts: Vec<&Detection> = d_order.iter().map(|&i| dts[i]).collect();

    let ious: Vec<Vec<f64>> = dts
        .iter()
        .map(|d| gts.iter().map(|g| box_iou(&d.bbox, &g.bbox, g.iscrowd)).collect())
        .collect();

    let mut matched = vec![vec![false; dts.len()]; thresholds.len()];
    let mut ignored = vec![vec![false; dts.len()]; thresholds.len()];
    for (t_idx, &t) in thresholds.iter().enumerate() {
        let mut gt_taken = vec![false; gts.len()];
        for d_idx in 0..dts.len() {
            let mut best_iou = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for g_idx in 0..gts.len() {
                if gt_taken[g_idx] && !gts[g_idx].iscrowd {
                    continue;
                }
                if let Some(mi) = m {
                    if !gt_ignored[mi] && gt_ignored[g_idx] {
                        break;
                    }
                }
                if ious[d_idx][g_idx] < best_iou {
                    continue;
                }
                best_iou = ious[d_idx][g_idx];
                m = Some(g_idx);
            }
            if let Some(mi) = m {
                ignored[t_idx][d_idx] = gt_ignored[mi];
                matched[t_idx][d_idx] = true;
                gt_taken[mi] = true;
            }
        }
        for (d_idx, d) in dts.iter().enumerate() {
            if !matched[t_idx][d_idx] && range.excludes(d.area()) {
                ignored[t_idx][d_idx] = true;
            }
        }
    }
    Some(ImageEval {
        scores: dts.iter().map(|d| d.score).collect(),
        matched,
        ignored,
        gt_ignored,
    })
}

/// Interpolated precision at 101 recall points for one class, per threshold;
/// `None` when the class has no non-ignored ground truth.
fn accumulate(evals: &[ImageEval], num_thresholds: usize) -> Option<Vec<f64>> {
    let positives = evals
        .iter()
        .flat_map(|e| e.gt_ignored.iter())
        .filter(|&&ig| !ig)
        .count();
    if positives == 0 {
        return None;
    }
    let mut scores = Vec::new();
    let mut origin = Vec::new();
    for (e_idx, e) in evals.iter().enumerate() {
        for (d_idx, &s) in e.scores.iter().enumerate() {
            scores.push(s);
            origin.push((e_idx, d_idx));
        }
    }
    let order = rank_by_score(&scores, |&s| s);
    let recall_thr = recall_thresholds();
    let mut out = Vec::with_capacity(num_thresholds);
    for t in 0..num_thresholds {
        let mut precision = Vec::with_capacity(order.len());
        let mut recall = Vec::with_capacity(order.len());
        let (mut tp, mut fp) = (0.0f64, 0.0f64);
        for &i in &order {
            let (e_idx, d_idx) = origin[i];
            let e = &evals[e_idx];
            if e.ignored[t][d_idx] {
                // ignored detections keep the previous cumulative counts
            } else if e.matched[t][d_idx] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            recall.push(tp / positives as f64);
            precision.push(tp / (fp + tp + f64::EPSILON));
        }
        for i in (1..precision.len()).rev() {
            if precision[i] > precision[i - 1] {
                precision[i - 1] = precision[i];
            }
        }
        let mut sum = 0.0;
        for &r in recall_thr.iter() {
            // first index with recall >= r
            let idx = recall.partition_point(|&x| x < r);
            if idx >= precision.len() {
                break;
            }
            sum += precision[idx];
        }
        out.push(sum / RECALL_POINTS as f64);
    }
    Some(out)
}

struct Grouped<'a> {
    image_ids: Vec<u64>,
    category_ids: Vec<u64>,
    gts: BTreeMap<(u64, u64), Vec<&'a GroundTruth>>,
    dts: BTreeMap<(u64, u64), Vec<&'a Detection>>,
}

fn sorted_unique(ids: &[u64]) -> Vec<u64> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

fn group<'a>(
    ground_truths: &'a [GroundTruth],
    detections: &'a [Detection],
    image_ids: &[u64],
    category_ids: &[u64],
) -> Result<Grouped<'a>> {
    for g in ground_truths {
        if g.bbox.iter().any(|v| !v.is_finite()) || g.bbox[2] < 0.0 || g.bbox[3] < 0.0 {
            return Err(Error::InvalidBox(alloc::format!("ground truth {:?}", g.bbox)));
        }
    }
    for d in detections {
        if d.bbox.iter().any(|v| !v.is_finite()) || d.bbox[2] < 0.0 || d.bbox[3] < 0.0 || !d.score.is_finite() {
            return Err(Error::InvalidBox(alloc::format!("detection {:?}", d.bbox)));
        }
    }
    let mut gts: BTreeMap<(u64, u64), Vec<&GroundTruth>> = BTreeMap::new();
    for g in ground_truths {
        gts.entry((g.image_id, g.category_id)).or_default().push(g);
    }
    let mut dts: BTreeMap<(u64, u64), Vec<&Detection>> = BTreeMap::new();
    for d in detections {
        dts.entry((d.image_id, d.category_id)).or_default().push(d);
    }
    Ok(Grouped {
        image_ids: sorted_unique(image_ids),
        category_ids: sorted_unique(category_ids),
        gts,
        dts,
    })
}

impl Grouped<'_> {
    fn class_precision(
        &self,
        category: u64,
        range: AreaRange,
        thresholds: &[f64],
    ) -> Option<Vec<f64>> {
        let evals: Vec<ImageEval> = self
            .image_ids
            .iter()
            .filter_map(|&img| {
                let g = self.gts.get(&(img, category)).map_or(&[][..], Vec::as_slice);
                let d = self.dts.get(&(img, category)).map_or(&[][..], Vec::as_slice);
                evaluate_image(g, d, range, thresholds, MAX_DETECTIONS)
            })
            .collect();
        accumulate(&evals, thresholds.len())
    }

    /// Per-threshold mean over classes with ground truth, `-1` if none.
    fn mean_over_classes(&self, range: AreaRange, thresholds: &[f64]) -> (Vec<f64>, Vec<Option<Vec<f64>>>) {
        let per_class: Vec<Option<Vec<f64>>> = self
            .category_ids
            .iter()
            .map(|&c| self.class_precision(c, range, thresholds))
            .collect();
        let valid: Vec<&Vec<f64>> = per_class.iter().flatten().collect();
        let means = (0..thresholds.len())
            .map(|t| {
                if valid.is_empty() {
                    -1.0
                } else {
                    valid.iter().map(|v| v[t]).sum::<f64>() / valid.len() as f64
                }
            })
            .collect();
        (means, per_class)
    }
}

fn mean_or_missing(values: &[f64]) -> f64 {
    if values.iter().any(|&v| v < 0.0) {
        -1.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Sorted, de-duplicated ids of every image and category that appear in the
/// ground truth.
pub fn ground_truth_ids(ground_truths: &[GroundTruth]) -> (Vec<u64>, Vec<u64>) {
    let mut images: Vec<u64> = ground_truths.iter().map(|g| g.image_id).collect();
    let mut cats: Vec<u64> = ground_truths.iter().map(|g| g.category_id).collect();
    images.sort_unstable();
    images.dedup();
    cats.sort_unstable();
    cats.dedup();
    (images, cats)
}

/// AP of one class at one IoU threshold over all objects, or `-1` when the
/// class has no ground truth in `image_ids`.
pub fn compute_ap_at_iou(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    image_ids: &[u64],
    iou_threshold: f64,
    category_id: u64,
) -> Result<f64> {
    let grouped = group(ground_truths, detections, image_ids, &[category_id])?;
    Ok(grouped
        .class_precision(category_id, AreaRange::All, &[iou_threshold])
        .map_or(-1.0, |v| v[0]))
}

/// Full COCO report over the given images and categories.
///
/// Detections on images or categories outside the lists are ignored.
/// Repeated ids count once; per-class results come in ascending id order.
pub fn compute_coco_map(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    image_ids: &[u64],
    category_ids: &[u64],
) -> Result<EvalReport> {
    let grouped = group(ground_truths, detections, image_ids, category_ids)?;
    let thresholds = iou_thresholds();
    let (all, per_class) = grouped.mean_over_classes(AreaRange::All, &thresholds);
    let mut ap_per_threshold = [0.0; NUM_THRESHOLDS];
    ap_per_threshold.copy_from_slice(&all);
    let bucket = |r| mean_or_missing(&grouped.mean_over_classes(r, &thresholds).0);
    let per_class = grouped
        .category_ids
        .iter()
        .zip(per_class)
        .map(|(&category_id, p)| match p {
            Some(v) => ClassAp {
                category_id,
                ap: v.iter().sum::<f64>() / NUM_THRESHOLDS as f64,
                ap50: v[0],
                ap75: v[5],
            },
            None => ClassAp {
                category_id,
                ap: -1.0,
                ap50: -1.0,
                ap75: -1.0,
            },
        })
        .collect();
    Ok(EvalReport {
        map: mean_or_missing(&ap_per_threshold),
        ap50: ap_per_threshold[0],
        ap75: ap_per_threshold[5],
        ap_per_threshold,
        ap_small: bucket(AreaRange::Small),
        ap_medium: bucket(AreaRange::Medium),
        ap_large: bucket(AreaRange::Large),
        per_class,
    })
}
