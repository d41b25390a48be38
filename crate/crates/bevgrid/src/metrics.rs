//! Evaluation: voxel-level IoU for occupancy grids and the detection suite
//! (greedy center-distance matching, interpolated average precision,
//! true-positive error terms, and the composite detection score).
//!
//! The detection conventions are frozen here so every number is attributable:
//! matching is greedy by descending confidence against the nearest unmatched
//! same-class ground truth within a BEV center-distance threshold; AP uses
//! 101-point linear interpolation of the precision-recall curve with the
//! region below recall 0.1 and precision 0.1 excluded and the remainder
//! rescaled by 1/0.9; true-positive errors are plain means over the matches
//! at the 2 m threshold; and the composite score blends mAP with the five
//! error terms as `(5·mAP + Σ (1 − min(1, err))) / 10`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{BoxSet, NUM_DETECTION_CLASSES, boxcol};
use crate::voxelizer::SemanticVoxelGrid;

/// Center-distance thresholds (meters) an AP is computed at.
pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// The single threshold whose matches feed the true-positive error terms.
pub const TP_THRESHOLD: f64 = 2.0;

/// Per-class intersection-over-union over supervised voxels.
#[derive(Debug, Clone, Serialize)]
pub struct MiouResult {
    /// `(class id, IoU)` for every class present in pred or gt on the mask.
    pub per_class: Vec<(u16, f64)>,
    pub miou: f64,
}

/// Voxel IoU per class and its mean, restricted to `gt.labeled_mask == 1`.
///
/// A class counts as present when either grid assigns it to at least one
/// masked voxel; classes absent from both sides are left out of the mean
/// (their 0/0 ratio carries no information).
pub fn voxel_miou(pred: &SemanticVoxelGrid, gt: &SemanticVoxelGrid) -> Result<MiouResult> {
    if pred.class_ids.dim() != gt.class_ids.dim() {
        return Err(Error::shape(
            "voxel_miou",
            format!("{:?} vs {:?}", pred.class_ids.dim(), gt.class_ids.dim()),
        ));
    }
    if pred.num_classes != gt.num_classes {
        return Err(Error::shape(
            "voxel_miou",
            format!(
                "class counts differ: {} vs {}",
                pred.num_classes, gt.num_classes
            ),
        ));
    }
    let o = gt.num_classes as usize;
    let mut inter = vec![0u64; o];
    let mut pred_count = vec![0u64; o];
    let mut gt_count = vec![0u64; o];
    for ((&p, &g), &m) in pred
        .class_ids
        .iter()
        .zip(gt.class_ids.iter())
        .zip(gt.labeled_mask.iter())
    {
        if m != 1 {
            continue;
        }
        pred_count[p as usize] += 1;
        gt_count[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let mut per_class = Vec::new();
    for c in 0..o {
        let union = pred_count[c] + gt_count[c] - inter[c];
        if pred_count[c] + gt_count[c] > 0 {
            per_class.push((c as u16, inter[c] as f64 / union as f64));
        }
    }
    if per_class.is_empty() {
        return Err(Error::Empty {
            context: "voxel_miou: no supervised voxels".into(),
        });
    }
    let miou = per_class.iter().map(|&(_, iou)| iou).sum::<f64>() / per_class.len() as f64;
    Ok(MiouResult { per_class, miou })
}

/// Outcome of greedy matching between one scene's predictions and its ground
/// truth. Indices refer to rows of the input box sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// `(prediction index, ground-truth index)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

/// Greedily match predictions to ground truth by BEV center distance.
///
/// Predictions are visited in descending score order (ties by ascending
/// index); each takes the nearest not-yet-matched ground-truth box of its own
/// class within `threshold` meters, equal distances resolving to the lowest
/// ground-truth index.
pub fn match_by_center_distance(pred: &BoxSet, gt: &BoxSet, threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| {
        pred.scores()[b]
            .partial_cmp(&pred.scores()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut gt_taken = vec![false; gt.len()];
    let mut matches = Vec::new();
    let mut unmatched_pred = Vec::new();
    for &pi in &order {
        let (px, py) = pred.center_xy(pi);
        let mut best: Option<(f64, usize)> = None;
        for gi in 0..gt.len() {
            if gt_taken[gi] || gt.classes()[gi] != pred.classes()[pi] {
                continue;
            }
            let (gx, gy) = gt.center_xy(gi);
            let dist = ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
            if dist > threshold {
                continue;
            }
            // Strict `<` keeps the lowest gt index on distance ties.
            if best.is_none_or(|(d, _)| dist < d) {
                best = Some((dist, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                gt_taken[gi] = true;
                matches.push((pi, gi));
            }
            None => unmatched_pred.push(pi),
        }
    }
    matches.sort_by_key(|&(pi, _)| pi);
    unmatched_pred.sort_unstable();
    let unmatched_gt = (0..gt.len()).filter(|&gi| !gt_taken[gi]).collect();
    MatchResult {
        matches,
        unmatched_pred,
        unmatched_gt,
    }
}

/// Piecewise-linear interpolation of `(xs, ys)` at `q`, with queries past the
/// right end reading 0 and queries before the left end reading `ys[0]`.
/// Duplicate xs resolve to the last entry, i.e. the final y recorded at that
/// x.
fn interp_right_zero(q: f64, xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    if q < xs[0] {
        return ys[0];
    }
    if q > xs[xs.len() - 1] {
        return 0.0;
    }
    // Largest j with xs[j] <= q.
    let j = xs.partition_point(|&x| x <= q) - 1;
    if j == xs.len() - 1 || xs[j] == q {
        return ys[j];
    }
    let slope = (ys[j + 1] - ys[j]) / (xs[j + 1] - xs[j]);
    ys[j] + slope * (q - xs[j])
}

/// Average precision of a pooled ranked list.
///
/// `scored` holds `(score, was matched)` per prediction across all scenes;
/// `num_gt` is the total ground-truth count of the class. The precision-recall
/// curve is sampled after every prediction in descending-score order,
/// interpolated at 101 evenly spaced recall points, the first 11 points
/// (recall < 0.1) dropped, precision reduced by 0.1 and clamped at 0, and the
/// mean rescaled by 1/0.9.
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize) -> Result<f64> {
    if num_gt == 0 {
        return Err(Error::Empty {
            context: "average_precision: no ground truth of this class".into(),
        });
    }
    if scored.is_empty() {
        return Ok(0.0);
    }
    let mut ranked: Vec<(f64, bool)> = scored.to_vec();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0u64, 0u64);
    for &(_, hit) in &ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    let mut acc = 0.0;
    for i in 11..=100 {
        let q = i as f64 / 100.0;
        let p = interp_right_zero(q, &recall, &precision);
        // Normalizing each point keeps the extremes exact: a constant
        // precision of 1 contributes 0.9 / 0.9 == 1 per point.
        acc += ((p - 0.1) / 0.9).max(0.0);
    }
    Ok(acc / 90.0)
}

/// The five true-positive error terms. Translation in meters, scale as
/// 1 − volume-IoU of center-aligned boxes, orientation in radians wrapped to
/// [0, π], velocity in m/s, attribute as 1 − accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TpErrors {
    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }
}

/// Volume IoU of two boxes with centers and orientations aligned: the
/// intersection of axis-aligned size boxes is the product of per-axis minima.
fn scale_iou(a: [f64; 3], b: [f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let va: f64 = a.iter().product();
    let vb: f64 = b.iter().product();
    inter / (va + vb - inter)
}

/// Absolute yaw difference wrapped onto [0, π].
fn yaw_error(a: f64, b: f64) -> f64 {
    let d = a - b;
    d.sin().atan2(d.cos()).abs()
}

/// Error terms of one matched pair.
fn pair_errors(pred: &BoxSet, pi: usize, gt: &BoxSet, gi: usize) -> TpErrors {
    let (px, py) = pred.center_xy(pi);
    let (gx, gy) = gt.center_xy(gi);
    let ate = ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
    let psize = [
        pred.rows()[[pi, boxcol::SX]],
        pred.rows()[[pi, boxcol::SY]],
        pred.rows()[[pi, boxcol::SZ]],
    ];
    let gsize = [
        gt.rows()[[gi, boxcol::SX]],
        gt.rows()[[gi, boxcol::SY]],
        gt.rows()[[gi, boxcol::SZ]],
    ];
    let ase = 1.0 - scale_iou(psize, gsize);
    let aoe = yaw_error(pred.yaw(pi), gt.yaw(gi));
    let dvx = pred.rows()[[pi, boxcol::VX]] - gt.rows()[[gi, boxcol::VX]];
    let dvy = pred.rows()[[pi, boxcol::VY]] - gt.rows()[[gi, boxcol::VY]];
    let ave = (dvx * dvx + dvy * dvy).sqrt();
    let pa = pred.rows()[[pi, boxcol::ATTR]].round();
    let ga = gt.rows()[[gi, boxcol::ATTR]].round();
    let aae = if pa == ga { 0.0 } else { 1.0 };
    TpErrors {
        ate,
        ase,
        aoe,
        ave,
        aae,
    }
}

/// Composite detection score: `(5·mAP + Σ (1 − min(1, err))) / 10`, so a
/// perfect detector scores 1 and each error term saturates at 1.
pub fn nds(map: f64, tp: &TpErrors) -> f64 {
    let err_sum: f64 = tp.as_array().iter().map(|&e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + err_sum) / 10.0
}

/// AP of one class at each distance threshold.
#[derive(Debug, Clone, Serialize)]
pub struct ClassAp {
    pub class: u8,
    pub ap: [f64; 4],
}

/// Full detection evaluation over a scene set.
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    /// Classes with at least one ground-truth box, ascending id.
    pub per_class_ap: Vec<ClassAp>,
    pub map: f64,
    pub tp_errors: TpErrors,
    pub nds: f64,
}

/// Evaluate predictions against ground truth over `(prediction, gt)` scene
/// pairs.
///
/// Classes with no ground truth anywhere are skipped. Matching runs per scene
/// and threshold; ranked lists pool across scenes for AP. True-positive
/// errors are means over each class's matches at the 2 m threshold — a class
/// with ground truth but no match at 2 m contributes the saturating value 1
/// for every term — then averaged over classes, as is mAP over classes and
/// thresholds.
pub fn evaluate_detection(scenes: &[(&BoxSet, &BoxSet)]) -> Result<EvalSummary> {
    let mut per_class_ap = Vec::new();
    let mut tp_sums = [0.0f64; 5];
    let mut n_classes = 0usize;
    for class in 0..NUM_DETECTION_CLASSES as u8 {
        let num_gt: usize = scenes
            .iter()
            .map(|(_, gt)| gt.classes().iter().filter(|&&c| c == class).count())
            .sum();
        if num_gt == 0 {
            continue;
        }
        n_classes += 1;
        let mut ap = [0.0f64; 4];
        for (ti, &threshold) in DISTANCE_THRESHOLDS.iter().enumerate() {
            let mut scored: Vec<(f64, bool)> = Vec::new();
            let mut class_tp = Vec::new();
            for &(pred, gt) in scenes {
                let result = match_by_center_distance(pred, gt, threshold);
                let matched: std::collections::HashSet<usize> =
                    result.matches.iter().map(|&(pi, _)| pi).collect();
                for pi in 0..pred.len() {
                    if pred.classes()[pi] == class {
                        scored.push((pred.scores()[pi], matched.contains(&pi)));
                    }
                }
                if threshold == TP_THRESHOLD {
                    for &(pi, gi) in &result.matches {
                        if pred.classes()[pi] == class {
                            class_tp.push(pair_errors(pred, pi, gt, gi));
                        }
                    }
                }
            }
            ap[ti] = average_precision(&scored, num_gt)?;
            if threshold == TP_THRESHOLD {
                let terms = if class_tp.is_empty() {
                    [1.0; 5]
                } else {
                    let n = class_tp.len() as f64;
                    let mut sums = [0.0; 5];
                    for e in &class_tp {
                        for (s, v) in sums.iter_mut().zip(e.as_array()) {
                            *s += v;
                        }
                    }
                    sums.map(|s| s / n)
                };
                for (acc, v) in tp_sums.iter_mut().zip(terms) {
                    *acc += v;
                }
            }
        }
        per_class_ap.push(ClassAp { class, ap });
    }
    if n_classes == 0 {
        return Err(Error::Empty {
            context: "evaluate_detection: no ground-truth boxes in any scene".into(),
        });
    }
    let map = per_class_ap
        .iter()
        .flat_map(|c| c.ap.iter())
        .sum::<f64>()
        / (4 * n_classes) as f64;
    let n = n_classes as f64;
    let tp_errors = TpErrors {
        ate: tp_sums[0] / n,
        ase: tp_sums[1] / n,
        aoe: tp_sums[2] / n,
        ave: tp_sums[3] / n,
        aae: tp_sums[4] / n,
    };
    let nds_value = nds(map, &tp_errors);
    Ok(EvalSummary {
        per_class_ap,
        map,
        tp_errors,
        nds: nds_value,
    })
}
