//! Detection evaluation: greedy matching, all-points interpolated AP,
//! COCO-style mAP over IoU 0.50:0.95, average recall, and size buckets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, RoiBox};
use crate::postprocess::Detection;

/// Upper area bound of the "small" bucket (inclusive).
pub const SMALL_AREA_MAX: f64 = 32.0 * 32.0;
/// Upper area bound of the "medium" bucket (inclusive).
pub const MEDIUM_AREA_MAX: f64 = 96.0 * 96.0;

pub const DEFAULT_MAX_DETS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub image_id: u64,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: RoiBox,
    #[serde(default)]
    pub difficult: bool,
}

/// The ten COCO thresholds 0.50, 0.55, ..., 0.95. Computed as `k / 20` so
/// that e.g. 0.70 is the same double as `70.0 / 100.0`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (10..20).map(|k| k as f64 / 20.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    TruePositive { gt: usize },
    FalsePositive,
    /// Matched a difficult (or out-of-bucket) object, or fell outside the
    /// evaluated size range: neither TP nor FP.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    /// Exclusive lower bound.
    pub min: f64,
    /// Inclusive upper bound.
    pub max: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange { min: f64::NEG_INFINITY, max: f64::INFINITY };
    pub const SMALL: AreaRange = AreaRange { min: f64::NEG_INFINITY, max: SMALL_AREA_MAX };
    pub const MEDIUM: AreaRange = AreaRange { min: SMALL_AREA_MAX, max: MEDIUM_AREA_MAX };
    pub const LARGE: AreaRange = AreaRange { min: MEDIUM_AREA_MAX, max: f64::INFINITY };

    pub fn contains(&self, area: f64) -> bool {
        area > self.min && area <= self.max
    }
}

/// Indices of `dets` sorted by descending score, ties by input index.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    idx
}

fn match_with_range(
    dets: &[Detection],
    order: &[usize],
    gts: &[GroundTruthObject],
    iou_thresh: f64,
    range: AreaRange,
) -> Vec<MatchOutcome> {
    let mut by_key: HashMap<(u64, usize), Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_key.entry((g.image_id, g.class_id)).or_default().push(i);
    }
    let ignored = |g: &GroundTruthObject| g.difficult || !range.contains(g.bbox.area());
    let mut matched = vec![false; gts.len()];
    let mut out = vec![MatchOutcome::FalsePositive; dets.len()];
    for &d in order {
        let det = &dets[d];
        let cands = by_key.get(&(det.image_id, det.class_id)).map(Vec::as_slice).unwrap_or(&[]);
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for &g in cands {
            let o = iou(&det.bbox, &gts[g].bbox);
            if o < iou_thresh {
                continue;
            }
            if ignored(&gts[g]) {
                hits_ignored = true;
                continue;
            }
            if matched[g] {
                continue;
            }
            if best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        out[d] = match best {
            Some((g, _)) => {
                matched[g] = true;
                MatchOutcome::TruePositive { gt: g }
            }
            None if hits_ignored => MatchOutcome::Ignored,
            None if !range.contains(det.bbox.area()) => MatchOutcome::Ignored,
            None => MatchOutcome::FalsePositive,
        };
    }
    out
}

/// Greedy matching in the given (descending-score) order. Each detection
/// takes the highest-IoU unmatched object of its image and class with
/// IoU >= `iou_thresh`. Outcomes are indexed like `dets`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthObject], iou_thresh: f64) -> Vec<MatchOutcome> {
    let order: Vec<usize> = (0..dets.len()).collect();
    match_with_range(dets, &order, gts, iou_thresh, AreaRange::ALL)
}

/// Area under the monotone precision envelope (all-points interpolation).
/// `tp` lists TP (true) / FP (false) flags in descending score order.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &t in tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        precision.push(ctp as f64 / (ctp + cfp) as f64);
        recall.push(ctp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = *r;
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    pub max_dets: usize,
    pub area: AreaRange,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_thresholds: coco_iou_thresholds(),
            max_dets: DEFAULT_MAX_DETS,
            area: AreaRange::ALL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub num_gt: usize,
    /// AP at each threshold of [`EvalParams::iou_thresholds`].
    pub ap: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassEval>,
    /// Class-mean AP at each threshold.
    pub map_per_threshold: Vec<f64>,
    /// Mean of `map_per_threshold`.
    pub map: f64,
    pub ar: f64,
}

impl Summary {
    pub fn map_at(&self, thresh: f64) -> Option<f64> {
        self.iou_thresholds
            .iter()
            .position(|&t| (t - thresh).abs() < 1e-12)
            .map(|i| self.map_per_threshold[i])
    }
}

/// Keeps the `max_dets` highest-scoring detections of each image.
fn cap_per_image(dets: &[Detection], order: &[usize], max_dets: usize) -> Vec<usize> {
    let mut count: HashMap<u64, usize> = HashMap::new();
    order
        .iter()
        .copied()
        .filter(|&i| {
            let c = count.entry(dets[i].image_id).or_default();
            *c += 1;
            *c <= max_dets
        })
        .collect()
}

/// Evaluates every class that has at least one counted object; classes
/// without objects do not enter the means.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruthObject], params: &EvalParams) -> Summary {
    let order = cap_per_image(dets, &score_order(dets), params.max_dets);
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    let mut class_evals = Vec::new();
    for &c in &classes {
        let gts_c: Vec<GroundTruthObject> = gts.iter().filter(|g| g.class_id == c).copied().collect();
        let num_gt = gts_c.iter().filter(|g| !g.difficult && params.area.contains(g.bbox.area())).count();
        if num_gt == 0 {
            continue;
        }
        let ord_c: Vec<usize> = order.iter().copied().filter(|&i| dets[i].class_id == c).collect();
        let mut ap = Vec::with_capacity(params.iou_thresholds.len());
        let mut recall = Vec::with_capacity(params.iou_thresholds.len());
        for &t in &params.iou_thresholds {
            let outcomes = match_with_range(dets, &ord_c, &gts_c, t, params.area);
            let flags: Vec<bool> = ord_c
                .iter()
                .filter_map(|&i| match outcomes[i] {
                    MatchOutcome::TruePositive { .. } => Some(true),
                    MatchOutcome::FalsePositive => Some(false),
                    MatchOutcome::Ignored => None,
                })
                .collect();
            let tp = flags.iter().filter(|&&f| f).count();
            ap.push(average_precision(&flags, num_gt));
            recall.push(tp as f64 / num_gt as f64);
        }
        class_evals.push(ClassEval {
            class_id: c,
            num_gt,
            ap,
            recall,
        });
    }
    let nt = params.iou_thresholds.len();
    let mean = |f: &dyn Fn(&ClassEval) -> f64| -> f64 {
        if class_evals.is_empty() {
            0.0
        } else {
            class_evals.iter().map(f).sum::<f64>() / class_evals.len() as f64
        }
    };
    let map_per_threshold: Vec<f64> = (0..nt).map(|t| mean(&|c: &ClassEval| c.ap[t])).collect();
    let map = if nt == 0 { 0.0 } else { map_per_threshold.iter().sum::<f64>() / nt as f64 };
    let ar = if nt == 0 {
        0.0
    } else {
        mean(&|c: &ClassEval| c.recall.iter().sum::<f64>() / nt as f64)
    };
    Summary {
        iou_thresholds: params.iou_thresholds.clone(),
        classes: class_evals,
        map_per_threshold,
        map,
        ar,
    }
}

/// Recall averaged over IoU 0.50:0.95 (and classes) with a per-image cap.
pub fn average_recall(dets: &[Detection], gts: &[GroundTruthObject], max_dets: usize) -> f64 {
    evaluate(
        dets,
        gts,
        &EvalParams {
            max_dets,
            ..EvalParams::default()
        },
    )
    .ar
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketResult {
    pub ap: f64,
    pub ar: f64,
    pub num_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeStratified {
    pub small: BucketResult,
    pub medium: BucketResult,
    pub large: BucketResult,
}

fn bucket(dets: &[Detection], gts: &[GroundTruthObject], area: AreaRange) -> BucketResult {
    let s = evaluate(dets, gts, &EvalParams { area, ..EvalParams::default() });
    BucketResult {
        ap: s.map,
        ar: s.ar,
        num_gt: s.classes.iter().map(|c| c.num_gt).sum(),
    }
}

/// COCO size buckets: small `area <= 32^2`, medium `(32^2, 96^2]`, large
/// `> 96^2`. Objects outside the bucket are ignored, as are unmatched
/// detections whose own area is outside it.
pub fn size_stratified(dets: &[Detection], gts: &[GroundTruthObject]) -> SizeStratified {
    SizeStratified {
        small: bucket(dets, gts, AreaRange::SMALL),
        medium: bucket(dets, gts, AreaRange::MEDIUM),
        large: bucket(dets, gts, AreaRange::LARGE),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub summary: Summary,
    /// mAP at IoU 0.5 alone (PASCAL view).
    pub map_50: f64,
    /// mAP averaged over IoU 0.50:0.95.
    pub map_coco: f64,
    pub ar: f64,
    pub sizes: SizeStratified,
}

impl EvalResult {
    /// Per-class AP at a given threshold, keyed by class id.
    pub fn class_ap_at(&self, thresh: f64) -> BTreeMap<usize, f64> {
        let i = self
            .summary
            .iou_thresholds
            .iter()
            .position(|&t| (t - thresh).abs() < 1e-12);
        self.summary
            .classes
            .iter()
            .map(|c| (c.class_id, i.map(|i| c.ap[i]).unwrap_or(0.0)))
            .collect()
    }

    /// `key=value` lines, one metric per line.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        writeln!(s, "map_50={:.6}", self.map_50).unwrap();
        writeln!(s, "map_50_95={:.6}", self.map_coco).unwrap();
        writeln!(s, "ar={:.6}", self.ar).unwrap();
        for (name, b) in [("small", &self.sizes.small), ("medium", &self.sizes.medium), ("large", &self.sizes.large)] {
            writeln!(s, "ap_{name}={:.6}", b.ap).unwrap();
            writeln!(s, "ar_{name}={:.6}", b.ar).unwrap();
            writeln!(s, "num_gt_{name}={}", b.num_gt).unwrap();
        }
        for c in &self.summary.classes {
            writeln!(s, "class_{}_ap_50={:.6}", c.class_id, c.ap[0]).unwrap();
        }
        s
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<10} {:>8} {:>10} {:>8}", "class", "num_gt", "AP@0.5", "AP@.5:.95").unwrap();
        for c in &self.summary.classes {
            let mean = c.ap.iter().sum::<f64>() / c.ap.len().max(1) as f64;
            writeln!(s, "{:<10} {:>8} {:>10.4} {:>8.4}", c.class_id, c.num_gt, c.ap[0], mean).unwrap();
        }
        writeln!(s, "{:<10} {:>8} {:>10.4} {:>8.4}", "mean", "", self.map_50, self.map_coco).unwrap();
        writeln!(s, "AR={:.4}  small AP={:.4} AR={:.4}  medium AP={:.4}  large AP={:.4}",
            self.ar, self.sizes.small.ap, self.sizes.small.ar, self.sizes.medium.ap, self.sizes.large.ap).unwrap();
        s
    }
}

/// Full COCO-style evaluation plus the IoU-0.5 view.
pub fn coco_map(dets: &[Detection], gts: &[GroundTruthObject]) -> EvalResult {
    let summary = evaluate(dets, gts, &EvalParams::default());
    EvalResult {
        map_50: summary.map_per_threshold.first().copied().unwrap_or(0.0),
        map_coco: summary.map,
        ar: summary.ar,
        sizes: size_stratified(dets, gts),
        summary,
    }
}

/// Mean AP at a single IoU threshold (VOC-style when `thresh == 0.5`).
pub fn map_at(dets: &[Detection], gts: &[GroundTruthObject], thresh: f64) -> f64 {
    evaluate(
        dets,
        gts,
        &EvalParams {
            iou_thresholds: vec![thresh],
            ..EvalParams::default()
        },
    )
    .map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image_id: u64, class_id: usize, score: f64, b: [f64; 4]) -> Detection {
        Detection {
            image_id,
            class_id,
            score,
            bbox: RoiBox::from_array(b),
        }
    }

    fn gt(image_id: u64, class_id: usize, b: [f64; 4]) -> GroundTruthObject {
        GroundTruthObject {
            image_id,
            class_id,
            bbox: RoiBox::from_array(b),
            difficult: false,
        }
    }

    #[test]
    fn thresholds_are_exact() {
        let t = coco_iou_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[4], 70.0 / 100.0);
        assert_eq!(t[9], 0.95);
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[false], 1), 0.0);
        assert!((average_precision(&[true, false, true], 2) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[], 0), 0.0);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let g = vec![gt(0, 1, [0.0, 0.0, 10.0, 10.0])];
        let d = vec![det(0, 1, 0.9, [0.0, 0.0, 10.0, 10.0]), det(0, 1, 0.8, [0.0, 0.0, 10.0, 9.0])];
        let m = match_detections(&d, &g, 0.5);
        assert_eq!(m, vec![MatchOutcome::TruePositive { gt: 0 }, MatchOutcome::FalsePositive]);
    }

    #[test]
    fn difficult_objects_are_ignored() {
        let mut g = gt(0, 1, [0.0, 0.0, 10.0, 10.0]);
        g.difficult = true;
        let d = vec![det(0, 1, 0.9, [0.0, 0.0, 10.0, 10.0])];
        assert_eq!(match_detections(&d, &[g], 0.5), vec![MatchOutcome::Ignored]);
        // a class whose only object is difficult does not enter the mean
        let s = evaluate(&d, &[g, gt(0, 2, [0.0, 0.0, 5.0, 5.0])], &EvalParams::default());
        assert_eq!(s.classes.len(), 1);
        assert_eq!(s.classes[0].class_id, 2);
    }

    #[test]
    fn perfect_and_empty() {
        let g = vec![gt(0, 1, [0.0, 0.0, 10.0, 10.0]), gt(1, 2, [5.0, 5.0, 50.0, 40.0])];
        let d: Vec<Detection> = g.iter().map(|g| det(g.image_id, g.class_id, 0.9, g.bbox.to_array())).collect();
        let r = coco_map(&d, &g);
        assert_eq!(r.map_coco, 1.0);
        assert_eq!(r.map_50, 1.0);
        assert_eq!(r.ar, 1.0);
        let e = coco_map(&[], &g);
        assert_eq!(e.map_coco, 0.0);
        assert_eq!(e.ar, 0.0);
    }

    #[test]
    fn uniform_iou_point_seven() {
        let g = vec![gt(0, 1, [0.0, 0.0, 10.0, 10.0]), gt(1, 1, [20.0, 20.0, 30.0, 30.0])];
        let d = vec![det(0, 1, 0.9, [0.0, 0.0, 10.0, 7.0]), det(1, 1, 0.8, [20.0, 20.0, 27.0, 30.0])];
        assert_eq!(iou(&d[0].bbox, &g[0].bbox), 0.7);
        let r = coco_map(&d, &g);
        assert_eq!(r.summary.map_per_threshold[..5], [1.0; 5]);
        assert_eq!(r.summary.map_per_threshold[5..], [0.0; 5]);
        assert_eq!(r.map_coco, 0.5);
    }

    #[test]
    fn small_bucket_is_inclusive() {
        let g = vec![gt(0, 1, [0.0, 0.0, 32.0, 32.0]), gt(0, 1, [40.0, 0.0, 72.0, 32.5])];
        let d: Vec<Detection> = g.iter().map(|g| det(0, 1, 0.5, g.bbox.to_array())).collect();
        let s = size_stratified(&d, &g);
        assert_eq!(s.small.num_gt, 1);
        assert_eq!(s.medium.num_gt, 1);
        assert_eq!(s.large.num_gt, 0);
        assert_eq!(s.small.ap, 1.0);
        assert_eq!(s.medium.ap, 1.0);
    }
}
