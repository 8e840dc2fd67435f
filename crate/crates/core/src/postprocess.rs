//! From raw head outputs to final detections: greedy NMS, score-weighted
//! box voting over all same-class boxes, two-round box regression,
//! left-right flip merging, joint threshold search and anchor shapes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, RoiBox};
use crate::error::{shape_err, Error, Result};
use crate::eval::{coco_map, GroundTruthObject};
use crate::head::{decode_delta, BoxDelta, HeadOutput};
use crate::Rng64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: RoiBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VotingConfig {
    pub nms_iou: f64,
    /// `None` disables voting.
    pub vote_iou: Option<f64>,
    pub rounds: usize,
    pub score_thresh: f64,
    pub max_per_image: usize,
}

impl VotingConfig {
    /// PASCAL setting: NMS at 0.3, vote at 0.5, two rounds.
    pub const VOC: VotingConfig = VotingConfig {
        nms_iou: 0.3,
        vote_iou: Some(0.5),
        rounds: 2,
        score_thresh: 0.05,
        max_per_image: 100,
    };

    /// Thresholds jointly tuned for the COCO metric.
    pub const COCO_TUNED: VotingConfig = VotingConfig {
        nms_iou: 0.443,
        vote_iou: Some(0.854),
        rounds: 2,
        score_thresh: 0.05,
        max_per_image: 100,
    };

    /// One round of plain NMS at 0.3.
    pub const PLAIN_NMS: VotingConfig = VotingConfig {
        nms_iou: 0.3,
        vote_iou: None,
        rounds: 1,
        score_thresh: 0.05,
        max_per_image: 100,
    };

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.nms_iou) || !self.vote_iou.is_none_or(unit) {
            return Err(Error::Config("IoU thresholds must lie in [0, 1]".into()));
        }
        if self.rounds == 0 || self.rounds > 2 {
            return Err(Error::Config("rounds must be 1 or 2".into()));
        }
        Ok(())
    }
}

impl Default for VotingConfig {
    fn default() -> Self {
        Self::VOC
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmsResult {
    /// Kept indices in greedy (descending score) order.
    pub keep: Vec<usize>,
    /// For every input, the kept detection that suppressed it.
    pub suppressed_by: Vec<Option<usize>>,
}

impl NmsResult {
    /// Kept index -> indices it suppressed.
    pub fn suppression_map(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = self.keep.iter().map(|&k| (k, Vec::new())).collect();
        for (i, s) in self.suppressed_by.iter().enumerate() {
            if let Some(k) = s {
                m.entry(*k).or_default().push(i);
            }
        }
        m
    }
}

/// Greedy NMS over one group (callers split by image and class). Ties in
/// score go to the lower input index. A box is suppressed when its IoU with
/// a kept box exceeds `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> NmsResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut suppressed_by: Vec<Option<usize>> = vec![None; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed_by[i].is_some() {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if suppressed_by[j].is_none() && iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh {
                suppressed_by[j] = Some(i);
            }
        }
    }
    NmsResult { keep, suppressed_by }
}

/// Replaces each kept box by the score-weighted mean of every detection in
/// `pool` with the same image and class whose IoU with it is at least
/// `vote_iou`. Scores are unchanged.
pub fn weighted_vote(kept: &[Detection], pool: &[Detection], vote_iou: f64) -> Vec<Detection> {
    kept.iter()
        .map(|k| {
            let mut acc = [0.0; 4];
            let mut wsum = 0.0;
            for d in pool {
                if d.image_id != k.image_id || d.class_id != k.class_id {
                    continue;
                }
                if iou(&k.bbox, &d.bbox) >= vote_iou {
                    let w = d.score;
                    for (a, v) in acc.iter_mut().zip(d.bbox.to_array()) {
                        *a += w * v;
                    }
                    wsum += w;
                }
            }
            if wsum > 0.0 {
                Detection {
                    bbox: RoiBox::from_array(acc.map(|a| a / wsum)),
                    ..*k
                }
            } else {
                *k
            }
        })
        .collect()
}

/// Score filter, per-(image, class) NMS and voting, then the per-image cap
/// (global score sort across classes). Output is grouped by image in
/// ascending id, descending score within an image.
pub fn postprocess(dets: &[Detection], config: &VotingConfig) -> Vec<Detection> {
    let mut groups: BTreeMap<(u64, usize), Vec<Detection>> = BTreeMap::new();
    for d in dets.iter().filter(|d| d.score > config.score_thresh) {
        groups.entry((d.image_id, d.class_id)).or_default().push(*d);
    }
    let mut per_image: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for ((image_id, _), group) in groups {
        let r = nms(&group, config.nms_iou);
        let kept: Vec<Detection> = r.keep.iter().map(|&i| group[i]).collect();
        let refined = match config.vote_iou {
            Some(v) => weighted_vote(&kept, &group, v),
            None => kept,
        };
        per_image.entry(image_id).or_default().extend(refined);
    }
    let mut out = Vec::new();
    for (_, mut v) in per_image {
        // stable: equal scores keep class order
        v.sort_by(|a, b| b.score.total_cmp(&a.score));
        v.truncate(config.max_per_image);
        out.extend(v);
    }
    out
}

/// Raw per-class detections of one forward pass: every ROI yields one box
/// per foreground class, decoded with that class's delta.
pub fn detections_from_outputs(
    image_id: u64,
    boxes: &[RoiBox],
    outputs: &[HeadOutput],
    image_w: f64,
    image_h: f64,
) -> Result<Vec<Vec<Detection>>> {
    if boxes.len() != outputs.len() {
        return Err(shape_err("detections_from_outputs", "ROI and output counts differ"));
    }
    let k = outputs.first().map(|o| o.probs.len() - 1).unwrap_or(0);
    let mut per_class = vec![Vec::with_capacity(boxes.len()); k];
    for (b, o) in boxes.iter().zip(outputs) {
        for c in 1..=k {
            let bbox = decode_delta(b, &o.delta_for(c), image_w, image_h)?;
            per_class[c - 1].push(Detection {
                image_id,
                class_id: c,
                score: o.probs[c],
                bbox,
            });
        }
    }
    Ok(per_class)
}

/// Evaluates proposals, then (for two rounds) re-evaluates each class's
/// regressed boxes. Returns the pooled detections of all rounds, before
/// any filtering.
pub fn two_round_raw<F>(
    image_id: u64,
    proposals: &[RoiBox],
    image_w: f64,
    image_h: f64,
    rounds: usize,
    mut forward: F,
) -> Result<Vec<Detection>>
where
    F: FnMut(&[RoiBox]) -> Result<Vec<HeadOutput>>,
{
    let outs = forward(proposals)?;
    let round1 = detections_from_outputs(image_id, proposals, &outs, image_w, image_h)?;
    let mut all: Vec<Detection> = round1.iter().flatten().copied().collect();
    if rounds >= 2 {
        for (ci, dets) in round1.iter().enumerate() {
            let class_id = ci + 1;
            let boxes: Vec<RoiBox> = dets
                .iter()
                .map(|d| d.bbox)
                .filter(|b| b.width() > 0.0 && b.height() > 0.0)
                .collect();
            if boxes.is_empty() {
                continue;
            }
            let outs2 = forward(&boxes)?;
            if outs2.len() != boxes.len() {
                return Err(shape_err("two_round_regression", "forward returned wrong output count"));
            }
            for (b, o) in boxes.iter().zip(&outs2) {
                all.push(Detection {
                    image_id,
                    class_id,
                    score: o.probs[class_id],
                    bbox: decode_delta(b, &o.delta_for(class_id), image_w, image_h)?,
                });
            }
        }
    }
    Ok(all)
}

/// Two-round regression followed by [`postprocess`].
pub fn two_round_regression<F>(
    image_id: u64,
    proposals: &[RoiBox],
    image_w: f64,
    image_h: f64,
    forward: F,
    config: &VotingConfig,
) -> Result<Vec<Detection>>
where
    F: FnMut(&[RoiBox]) -> Result<Vec<HeadOutput>>,
{
    config.validate()?;
    let raw = two_round_raw(image_id, proposals, image_w, image_h, config.rounds, forward)?;
    Ok(postprocess(&raw, config))
}

/// Averages per-ROI outputs of the original and the mirrored image. The
/// mirrored deltas are flipped back first (`dx` negated).
pub fn flip_merge(original: &[HeadOutput], flipped: &[HeadOutput]) -> Result<Vec<HeadOutput>> {
    if original.len() != flipped.len() {
        return Err(shape_err(
            "flip_merge",
            format!("{} original vs {} flipped ROIs", original.len(), flipped.len()),
        ));
    }
    original
        .iter()
        .zip(flipped)
        .map(|(a, b)| {
            if a.probs.len() != b.probs.len() || a.deltas.len() != b.deltas.len() {
                return Err(shape_err("flip_merge", "per-ROI output sizes differ"));
            }
            let avg = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| 0.5 * (p + q)).collect() };
            let mut deltas = Vec::with_capacity(a.deltas.len());
            for (da, db) in a.deltas.chunks_exact(4).zip(b.deltas.chunks_exact(4)) {
                let back = BoxDelta::from_slice(db).mirrored().to_array();
                deltas.extend(da.iter().zip(back).map(|(p, q)| 0.5 * (p + q)));
            }
            Ok(HeadOutput {
                probs: avg(&a.probs, &b.probs),
                logits: avg(&a.logits, &b.logits),
                deltas,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub nms_iou: f64,
    pub vote_iou: f64,
    /// COCO mAP over IoU 0.50:0.95 at this pair.
    pub score: f64,
}

/// Re-applies post-processing for each `(nms_iou, vote_iou)` candidate to
/// already-evaluated raw detections and keeps the best COCO mAP (first
/// wins ties).
pub fn threshold_search_candidates(
    raw: &[Detection],
    gts: &[GroundTruthObject],
    candidates: &[(f64, f64)],
    base: &VotingConfig,
) -> Result<ThresholdChoice> {
    if gts.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let mut best: Option<ThresholdChoice> = None;
    for &(n, v) in candidates {
        let cfg = VotingConfig {
            nms_iou: n,
            vote_iou: Some(v),
            ..*base
        };
        let score = coco_map(&postprocess(raw, &cfg), gts).map_coco;
        if best.is_none_or(|b| score > b.score) {
            best = Some(ThresholdChoice { nms_iou: n, vote_iou: v, score });
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("no threshold candidates".into()))
}

/// Uniform random search over `[0, 1]^2`.
pub fn threshold_search(
    raw: &[Detection],
    gts: &[GroundTruthObject],
    samples: usize,
    seed: u64,
    base: &VotingConfig,
) -> Result<ThresholdChoice> {
    let mut rng = Rng64::seed_from_u64(seed);
    let candidates: Vec<(f64, f64)> = (0..samples).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
    threshold_search_candidates(raw, gts, &candidates, base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub base: (f64, f64),
    /// Width:height ratios.
    pub aspect_ratios: Vec<(f64, f64)>,
    pub scales: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            base: (32.0, 32.0),
            aspect_ratios: vec![(1.0, 2.0), (1.0, 1.0), (2.0, 1.0)],
            scales: vec![64.0, 90.5, 128.0, 181.0, 256.0, 362.0, 512.0],
        }
    }
}

/// The base shape, then for each scale `s` and ratio `r = w/h` the
/// area-preserving shape `(s * sqrt(r), s / sqrt(r))`.
pub fn generate_anchor_shapes(config: &AnchorConfig) -> Vec<(f64, f64)> {
    let mut out = vec![config.base];
    for &s in &config.scales {
        for &(rw, rh) in &config.aspect_ratios {
            let r = (rw / rh).sqrt();
            out.push((s * r, s / r));
        }
    }
    out
}
