//! Set-prediction loss: optimal one-to-one matching of predictions to ground
//! truth, then classification, box L1 and GIoU terms over the matched pairs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::boxes::{giou, BBox};
use crate::error::{Error, Result};

/// Fixed-size prediction set. Row `q` of `class_logits` holds
/// `num_classes + 1` scores, the last being "no object".
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub num_classes: usize,
    pub class_logits: Vec<f64>,
    pub boxes: Vec<BBox>,
}

impl DetectionSet {
    pub fn new(num_classes: usize, class_logits: Vec<f64>, boxes: Vec<BBox>) -> Result<Self> {
        if class_logits.len() != boxes.len() * (num_classes + 1) {
            return Err(Error::Shape(format!(
                "{} logits for {} queries of {} classes",
                class_logits.len(),
                boxes.len(),
                num_classes + 1
            )));
        }
        Ok(Self {
            num_classes,
            class_logits,
            boxes,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.boxes.len()
    }

    pub fn no_object_class(&self) -> usize {
        self.num_classes
    }

    pub fn logits(&self, query: usize) -> &[f64] {
        let k = self.num_classes + 1;
        &self.class_logits[query * k..(query + 1) * k]
    }

    pub fn probabilities(&self, query: usize) -> Vec<f64> {
        softmax(self.logits(query))
    }

    fn check_finite(&self) -> Result<()> {
        if self.class_logits.iter().any(|v| !v.is_finite())
            || self.boxes.iter().any(|b| !b.is_finite())
        {
            return Err(Error::Numeric("prediction contains NaN or infinity".into()));
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp: Vec<f64> = logits.iter().map(|&v| libm::exp(v - max)).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let sum: f64 = logits.iter().map(|&v| libm::exp(v - max)).sum();
    logits[index] - max - libm::log(sum)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthSet {
    pub labels: Vec<usize>,
    pub boxes: Vec<BBox>,
}

impl GroundTruthSet {
    pub fn new(labels: Vec<usize>, boxes: Vec<BBox>) -> Result<Self> {
        let gt = Self { labels, boxes };
        gt.validate()?;
        Ok(gt)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.boxes.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} boxes",
                self.labels.len(),
                self.boxes.len()
            )));
        }
        for b in &self.boxes {
            b.validate()?;
            let c = b.clamp_unit();
            if c.w <= 0.0 || c.h <= 0.0 {
                return Err(Error::InvalidBox(format!("{b:?} lies outside the unit square")));
            }
        }
        Ok(())
    }
}

/// Relative weights of the matching cost terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Weights of the training loss terms; `no_object` scales the cross-entropy
/// of queries matched to nothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
        }
    }
}

impl LossWeights {
    pub fn cost_weights(&self) -> CostWeights {
        CostWeights {
            class: self.class,
            l1: self.l1,
            giou: self.giou,
        }
    }
}

/// Dense row-major cost matrix, predictions by ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cost matrix contains NaN or infinity".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged cost rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// `cost[i][j] = -w_class p_i(c_j) + w_l1 |b_i - b_j|_1 - w_giou GIoU(b_i, b_j)`.
pub fn pairwise_cost(
    pred: &DetectionSet,
    gt: &GroundTruthSet,
    weights: CostWeights,
) -> Result<CostMatrix> {
    pred.check_finite()?;
    gt.validate()?;
    if let Some(&bad) = gt.labels.iter().find(|&&l| l >= pred.num_classes) {
        return Err(Error::Contract(format!(
            "label {bad} outside {} classes",
            pred.num_classes
        )));
    }
    let mut data = Vec::with_capacity(pred.num_queries() * gt.len());
    for q in 0..pred.num_queries() {
        let probs = pred.probabilities(q);
        let b = &pred.boxes[q];
        for (label, t) in gt.labels.iter().zip(&gt.boxes) {
            let l1: f64 = b
                .to_array()
                .iter()
                .zip(t.to_array())
                .map(|(x, y)| (x - y).abs())
                .sum();
            data.push(-weights.class * probs[*label] + weights.l1 * l1 - weights.giou * giou(b, t));
        }
    }
    CostMatrix::new(pred.num_queries(), gt.len(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(prediction, ground truth)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

struct Assignment {
    /// Prediction assigned to each ground-truth column.
    pred_of: Vec<usize>,
    total: f64,
    row_potential: Vec<f64>,
    col_potential: Vec<f64>,
}

/// Shortest augmenting path Hungarian algorithm over `n` ground-truth objects
/// and `m >= n` candidate predictions, `O(n^2 m)`.
fn solve(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Assignment {
    // 1-based arrays; index 0 is the virtual source
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pred_of = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            pred_of[owner[j] - 1] = j - 1;
        }
    }
    let total = pred_of.iter().enumerate().map(|(g, &p)| cost(g, p)).sum();
    Assignment {
        pred_of,
        total,
        row_potential: u[1..].to_vec(),
        col_potential: v[1..].to_vec(),
    }
}

/// Minimum-cost assignment of every ground-truth column to a distinct
/// prediction row.
///
/// Among optimal assignments the one whose prediction-sorted pair list is
/// lexicographically smallest is returned: predictions are fixed in ascending
/// order, each to the smallest ground truth that still admits an optimal
/// completion.
pub fn hungarian_match(cost: &CostMatrix) -> Result<MatchResult> {
    let (rows, cols) = (cost.rows, cost.cols);
    if rows < cols {
        return Err(Error::Infeasible { rows, cols });
    }
    if cols == 0 {
        return Ok(MatchResult {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let full = solve(cols, rows, |g, p| cost.get(p, g));
    let optimum = full.total;
    let scale = cost.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-10 * scale * cols as f64;

    let mut fixed_cost = 0.0;
    let mut gt_taken = vec![false; cols];
    let mut pred_excluded = vec![false; rows];
    let mut pairs = Vec::with_capacity(cols);
    for p in 0..rows {
        if pairs.len() == cols {
            break;
        }
        let mut chosen = None;
        for g in (0..cols).filter(|&g| !gt_taken[g]) {
            // edges that are not tight under the optimal duals cannot be optimal
            let reduced = cost.get(p, g) - full.row_potential[g] - full.col_potential[p];
            if reduced > tol {
                continue;
            }
            let rest_g: Vec<usize> = (0..cols).filter(|&j| !gt_taken[j] && j != g).collect();
            let rest_p: Vec<usize> = (0..rows).filter(|&i| !pred_excluded[i] && i != p).collect();
            if rest_p.len() < rest_g.len() {
                continue;
            }
            let rest = if rest_g.is_empty() {
                0.0
            } else {
                solve(rest_g.len(), rest_p.len(), |a, b| cost.get(rest_p[b], rest_g[a])).total
            };
            if fixed_cost + cost.get(p, g) + rest <= optimum + tol {
                chosen = Some(g);
                break;
            }
        }
        pred_excluded[p] = true;
        if let Some(g) = chosen {
            gt_taken[g] = true;
            fixed_cost += cost.get(p, g);
            pairs.push((p, g));
        }
    }
    if pairs.len() != cols {
        // numerical corner case: fall back to the raw optimal assignment
        pairs = full
            .pred_of
            .iter()
            .enumerate()
            .map(|(g, &p)| (p, g))
            .collect();
        pairs.sort_unstable();
    }
    let total_cost = pairs.iter().map(|&(p, g)| cost.get(p, g)).sum();
    Ok(MatchResult { pairs, total_cost })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    /// Weighted cross-entropy over all queries (unweighted by `LossWeights::class`).
    pub classification: f64,
    /// Sum of matched box L1 distances per ground-truth box.
    pub bbox_l1: f64,
    /// Sum of matched `1 - GIoU` per ground-truth box.
    pub giou: f64,
}

fn check_match(pred: &DetectionSet, gt: &GroundTruthSet, m: &MatchResult) -> Result<()> {
    if m.pairs.len() != gt.len() {
        return Err(Error::Contract(format!(
            "{} pairs for {} ground-truth objects",
            m.pairs.len(),
            gt.len()
        )));
    }
    let mut seen_p = vec![false; pred.num_queries()];
    let mut seen_g = vec![false; gt.len()];
    for &(p, g) in &m.pairs {
        if p >= seen_p.len() || g >= seen_g.len() || seen_p[p] || seen_g[g] {
            return Err(Error::Contract(format!("pair ({p}, {g}) is invalid or repeated")));
        }
        seen_p[p] = true;
        seen_g[g] = true;
    }
    Ok(())
}

/// Set-prediction loss for one image under a fixed matching.
///
/// Every query receives a cross-entropy term (matched queries against their
/// object's class, the rest against "no object" with weight
/// `weights.no_object`), normalized by the total class weight. Box terms are
/// summed over matched pairs and divided by `max(1, #objects)`.
pub fn detection_loss(
    pred: &DetectionSet,
    gt: &GroundTruthSet,
    matching: &MatchResult,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    pred.check_finite()?;
    gt.validate()?;
    check_match(pred, gt, matching)?;
    let mut target = vec![pred.no_object_class(); pred.num_queries()];
    for &(p, g) in &matching.pairs {
        if gt.labels[g] >= pred.num_classes {
            return Err(Error::Contract(format!("label {} out of range", gt.labels[g])));
        }
        target[p] = gt.labels[g];
    }
    let (mut ce_sum, mut w_sum) = (0.0, 0.0);
    for (q, &t) in target.iter().enumerate() {
        let w = if t == pred.no_object_class() {
            weights.no_object
        } else {
            1.0
        };
        ce_sum -= w * log_softmax_at(pred.logits(q), t);
        w_sum += w;
    }
    let classification = if w_sum > 0.0 { ce_sum / w_sum } else { 0.0 };

    let num_boxes = gt.len().max(1) as f64;
    let (mut l1, mut g_loss) = (0.0, 0.0);
    for &(p, g) in &matching.pairs {
        let (a, b) = (&pred.boxes[p], &gt.boxes[g]);
        l1 += a
            .to_array()
            .iter()
            .zip(b.to_array())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>();
        g_loss += 1.0 - giou(a, b);
    }
    let bbox_l1 = l1 / num_boxes;
    let giou_term = g_loss / num_boxes;
    Ok(LossBreakdown {
        total: weights.class * classification + weights.l1 * bbox_l1 + weights.giou * giou_term,
        classification,
        bbox_l1,
        giou: giou_term,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injections of columns into rows.
    fn brute_force(cost: &CostMatrix) -> f64 {
        fn go(cost: &CostMatrix, col: usize, used: &mut Vec<bool>) -> f64 {
            if col == cost.cols() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for r in 0..cost.rows() {
                if !used[r] {
                    used[r] = true;
                    best = best.min(cost.get(r, col) + go(cost, col + 1, used));
                    used[r] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost.rows()])
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CostMatrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect();
        CostMatrix::new(rows, cols, data).unwrap()
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BBox {
        BBox::new(
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.05..0.4),
            rng.random_range(0.05..0.4),
        )
    }

    fn random_case(rng: &mut ChaCha8Rng, q: usize, n: usize, c: usize) -> (DetectionSet, GroundTruthSet) {
        let logits = (0..q * (c + 1)).map(|_| rng.random_range(-2.0..2.0)).collect();
        let boxes = (0..q).map(|_| random_box(rng)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
        let gt_boxes = (0..n).map(|_| random_box(rng)).collect();
        (
            DetectionSet::new(c, logits, boxes).unwrap(),
            GroundTruthSet::new(labels, gt_boxes).unwrap(),
        )
    }

    #[test]
    fn diagonal_match() {
        let m = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let r = hungarian_match(&m).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.total_cost, 0.0);
    }

    #[test]
    fn single_column_picks_argmin() {
        let m = CostMatrix::from_rows(&[vec![5.0], vec![2.0], vec![7.0]]).unwrap();
        let r = hungarian_match(&m).unwrap();
        assert_eq!(r.pairs, vec![(1, 0)]);
        assert_eq!(r.total_cost, 2.0);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let m = CostMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(hungarian_match(&m).unwrap().pairs, vec![(0, 0), (1, 1)]);
        let m = CostMatrix::from_rows(&[vec![3.0, 3.0], vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(hungarian_match(&m).unwrap().pairs, vec![(1, 0), (2, 1)]);
        let m = CostMatrix::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(hungarian_match(&m).unwrap().pairs, vec![(0, 0)]);
    }

    #[test]
    fn infeasible_and_empty() {
        let m = CostMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(
            hungarian_match(&m),
            Err(Error::Infeasible { rows: 1, cols: 2 })
        );
        let empty = CostMatrix::new(4, 0, Vec::new()).unwrap();
        let r = hungarian_match(&empty).unwrap();
        assert!(r.pairs.is_empty());
        assert_eq!(r.total_cost, 0.0);
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn random_matrices_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let cols = rng.random_range(1..=5);
            let rows = rng.random_range(cols..=6);
            let m = random_matrix(&mut rng, rows, cols);
            let r = hungarian_match(&m).unwrap();
            assert!((r.total_cost - brute_force(&m)).abs() < 1e-9);
            assert_eq!(r.pairs.len(), cols);
        }
    }

    #[test]
    fn perfect_prediction_cost() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let mut logits = vec![-1e3; 3];
        logits[1] = 1e3;
        let pred = DetectionSet::new(2, logits, vec![b]).unwrap();
        let gt = GroundTruthSet::new(vec![1], vec![b]).unwrap();
        let w = CostWeights::default();
        let c = pairwise_cost(&pred, &gt, w).unwrap();
        assert!((c.get(0, 0) - (-w.class - w.giou)).abs() < 1e-12);
        let none = pairwise_cost(&pred, &GroundTruthSet::default(), w).unwrap();
        assert_eq!((none.rows(), none.cols()), (1, 0));
    }

    #[test]
    fn cost_rejects_nan() {
        let pred = DetectionSet::new(1, vec![f64::NAN, 0.0], vec![BBox::new(0.5, 0.5, 0.1, 0.1)])
            .unwrap();
        let gt = GroundTruthSet::new(vec![0], vec![BBox::new(0.5, 0.5, 0.1, 0.1)]).unwrap();
        assert!(matches!(
            pairwise_cost(&pred, &gt, CostWeights::default()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn cost_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (pred, gt) = random_case(&mut rng, 3, 3, 4);
        let c = pairwise_cost(&pred, &gt, CostWeights::default()).unwrap();
        for i in 0..3 {
            let row = pred.logits(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..3 {
                let p = row[gt.labels[j]].exp() / z;
                let (a, b) = (pred.boxes[i].to_xyxy(), gt.boxes[j].to_xyxy());
                let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
                let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
                let area = |x: [f64; 4]| (x[2] - x[0]) * (x[3] - x[1]);
                let union = area(a) + area(b) - iw * ih;
                let encl = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
                let g = iw * ih / union - (encl - union) / encl;
                let l1: f64 = (0..4)
                    .map(|k| (pred.boxes[i].to_array()[k] - gt.boxes[j].to_array()[k]).abs())
                    .sum();
                let expected = -p + 5.0 * l1 - 2.0 * g;
                assert!((c.get(i, j) - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn perfect_predictions_have_zero_box_terms() {
        let gt = GroundTruthSet::new(
            vec![0, 1],
            vec![BBox::new(0.3, 0.3, 0.2, 0.2), BBox::new(0.7, 0.6, 0.1, 0.3)],
        )
        .unwrap();
        let pred = DetectionSet::new(
            2,
            vec![9.0, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 9.0],
            vec![gt.boxes[0], gt.boxes[1], BBox::new(0.5, 0.5, 0.1, 0.1)],
        )
        .unwrap();
        let w = LossWeights::default();
        let m = hungarian_match(&pairwise_cost(&pred, &gt, w.cost_weights()).unwrap()).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        let l = detection_loss(&pred, &gt, &m, w).unwrap();
        assert_eq!(l.bbox_l1, 0.0);
        assert!(l.giou.abs() < 1e-12);
    }

    #[test]
    fn empty_ground_truth_is_pure_no_object_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (pred, _) = random_case(&mut rng, 4, 0, 3);
        let gt = GroundTruthSet::default();
        let m = MatchResult {
            pairs: Vec::new(),
            total_cost: 0.0,
        };
        let l = detection_loss(&pred, &gt, &m, LossWeights::default()).unwrap();
        let expected: f64 = (0..4).map(|q| -log_softmax_at(pred.logits(q), 3)).sum::<f64>() / 4.0;
        assert!((l.classification - expected).abs() < 1e-12);
        assert_eq!((l.bbox_l1, l.giou), (0.0, 0.0));
        assert!((l.total - expected).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_match_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (pred, gt) = random_case(&mut rng, 3, 2, 2);
        let w = LossWeights::default();
        let dup = MatchResult {
            pairs: vec![(0, 0), (0, 1)],
            total_cost: 0.0,
        };
        assert!(matches!(detection_loss(&pred, &gt, &dup, w), Err(Error::Contract(_))));
        let short = MatchResult {
            pairs: vec![(0, 0)],
            total_cost: 0.0,
        };
        assert!(matches!(detection_loss(&pred, &gt, &short, w), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn permuting_ground_truth_keeps_cost_and_loss(seed in any::<u64>(), n in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pred, gt) = random_case(&mut rng, 6, n, 3);
            let w = LossWeights::default();
            let m = hungarian_match(&pairwise_cost(&pred, &gt, w.cost_weights()).unwrap()).unwrap();
            let loss = detection_loss(&pred, &gt, &m, w).unwrap();

            let mut order: Vec<usize> = (0..n).collect();
            order.reverse();
            order.rotate_left(seed as usize % n);
            let permuted = GroundTruthSet::new(
                order.iter().map(|&i| gt.labels[i]).collect(),
                order.iter().map(|&i| gt.boxes[i]).collect(),
            ).unwrap();
            let m2 = hungarian_match(&pairwise_cost(&pred, &permuted, w.cost_weights()).unwrap()).unwrap();
            let loss2 = detection_loss(&pred, &permuted, &m2, w).unwrap();
            prop_assert!((m.total_cost - m2.total_cost).abs() < 1e-9);
            prop_assert!((loss.total - loss2.total).abs() < 1e-9);
        }
    }
}
