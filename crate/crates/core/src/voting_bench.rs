//! Seeded synthetic benchmark for box voting. Each object draws a cluster
//! of detections: usually a few tight boxes with high scores, plus several
//! loose boxes (systematically enlarged, noisy, mid scores), plus scattered
//! low-score false positives. Voting over a wide IoU neighborhood averages
//! away the noise of a loose winner but also drags a tight winner toward
//! the loose cluster; a narrow neighborhood only merges near-duplicates.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::RoiBox;
use crate::eval::{map_at, GroundTruthObject};
use crate::postprocess::{postprocess, Detection, VotingConfig};
use crate::Rng64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotingBenchConfig {
    pub images: usize,
    pub image_size: f64,
    pub max_objects: usize,
    pub num_classes: usize,
    /// Probability that an object has tight detections at all.
    pub tight_prob: f64,
    /// Near-duplicate well-localized boxes per object, when present.
    pub tight_boxes: usize,
    /// Tight-box jitter, as a fraction of object size.
    pub tight_sigma: f64,
    pub loose_boxes: usize,
    pub loose_sigma: f64,
    /// Mean log-scale enlargement of loose boxes.
    pub loose_growth: f64,
    pub false_positives: usize,
    pub nms_iou: f64,
}

impl Default for VotingBenchConfig {
    fn default() -> Self {
        Self {
            images: 1000,
            image_size: 256.0,
            max_objects: 4,
            num_classes: 3,
            tight_prob: 0.6,
            tight_boxes: 3,
            tight_sigma: 0.025,
            loose_boxes: 6,
            loose_sigma: 0.12,
            loose_growth: 0.08,
            false_positives: 4,
            nms_iou: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotingBenchData {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthObject>,
}

fn jitter(rng: &mut Rng64, gt: &RoiBox, sigma: f64, growth: f64, size: f64) -> RoiBox {
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    let (cx, cy) = gt.center();
    let (w, h) = (gt.width(), gt.height());
    let cx = cx + n.sample(rng) * w;
    let cy = cy + n.sample(rng) * h;
    let w = w * (growth + n.sample(rng)).exp();
    let h = h * (growth + n.sample(rng)).exp();
    RoiBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h).clip(size, size)
}

pub fn generate(seed: u64, cfg: &VotingBenchConfig) -> VotingBenchData {
    let mut rng = Rng64::seed_from_u64(seed);
    let s = cfg.image_size;
    let mut detections = Vec::new();
    let mut ground_truth = Vec::new();
    for image_id in 0..cfg.images as u64 {
        let n_obj = rng.random_range(1..=cfg.max_objects);
        for _ in 0..n_obj {
            let w = rng.random_range(0.1 * s..0.4 * s);
            let h = rng.random_range(0.1 * s..0.4 * s);
            let x1 = rng.random_range(0.0..s - w);
            let y1 = rng.random_range(0.0..s - h);
            let gt = RoiBox::new(x1, y1, x1 + w, y1 + h);
            let class_id = rng.random_range(1..=cfg.num_classes);
            ground_truth.push(GroundTruthObject {
                image_id,
                class_id,
                bbox: gt,
                difficult: false,
            });
            let mut push = |bbox: RoiBox, score: f64| {
                detections.push(Detection {
                    image_id,
                    class_id,
                    score,
                    bbox,
                })
            };
            if rng.random_bool(cfg.tight_prob) {
                for _ in 0..cfg.tight_boxes {
                    let b = jitter(&mut rng, &gt, cfg.tight_sigma, 0.0, s);
                    push(b, rng.random_range(0.75..1.0));
                }
            }
            for _ in 0..cfg.loose_boxes {
                let b = jitter(&mut rng, &gt, cfg.loose_sigma, cfg.loose_growth, s);
                push(b, rng.random_range(0.3..0.8));
            }
        }
        for _ in 0..cfg.false_positives {
            let w = rng.random_range(0.05 * s..0.3 * s);
            let h = rng.random_range(0.05 * s..0.3 * s);
            let x1 = rng.random_range(0.0..s - w);
            let y1 = rng.random_range(0.0..s - h);
            detections.push(Detection {
                image_id,
                class_id: rng.random_range(1..=cfg.num_classes),
                score: rng.random_range(0.05..0.6),
                bbox: RoiBox::new(x1, y1, x1 + w, y1 + h),
            });
        }
    }
    VotingBenchData {
        detections,
        ground_truth,
    }
}

/// mAP at IoU 0.5 and 0.85 for one voting setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VotingPoint {
    pub vote_iou: Option<f64>,
    pub ap50: f64,
    pub ap85: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotingBenchReport {
    pub no_vote: VotingPoint,
    pub points: Vec<VotingPoint>,
}

impl VotingBenchReport {
    /// Change relative to no voting at the given vote threshold.
    pub fn delta(&self, vote_iou: f64) -> Option<(f64, f64)> {
        self.points
            .iter()
            .find(|p| p.vote_iou == Some(vote_iou))
            .map(|p| (p.ap50 - self.no_vote.ap50, p.ap85 - self.no_vote.ap85))
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10} {:>8} {:>8} {:>9} {:>9}\n", "vote_iou", "AP@0.5", "AP@0.85", "dAP@0.5", "dAP@0.85");
        for p in std::iter::once(&self.no_vote).chain(&self.points) {
            let name = p.vote_iou.map(|v| format!("{v}")).unwrap_or_else(|| "none".into());
            s.push_str(&format!(
                "{:<10} {:>8.4} {:>8.4} {:>+9.4} {:>+9.4}\n",
                name,
                p.ap50,
                p.ap85,
                p.ap50 - self.no_vote.ap50,
                p.ap85 - self.no_vote.ap85
            ));
        }
        s
    }
}

fn evaluate_point(data: &VotingBenchData, cfg: &VotingBenchConfig, vote_iou: Option<f64>) -> VotingPoint {
    let vc = VotingConfig {
        nms_iou: cfg.nms_iou,
        vote_iou,
        rounds: 1,
        score_thresh: 0.0,
        max_per_image: 100,
    };
    let dets = postprocess(&data.detections, &vc);
    VotingPoint {
        vote_iou,
        ap50: map_at(&dets, &data.ground_truth, 0.5),
        ap85: map_at(&dets, &data.ground_truth, 0.85),
    }
}

/// Runs the benchmark for each voting threshold against no voting, with
/// NMS held fixed.
pub fn run(seed: u64, cfg: &VotingBenchConfig, vote_ious: &[f64]) -> VotingBenchReport {
    let data = generate(seed, cfg);
    VotingBenchReport {
        no_vote: evaluate_point(&data, cfg, None),
        points: vote_ious.iter().map(|&v| evaluate_point(&data, cfg, Some(v))).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let cfg = VotingBenchConfig {
            images: 5,
            ..Default::default()
        };
        assert_eq!(generate(3, &cfg), generate(3, &cfg));
        assert_ne!(generate(3, &cfg), generate(4, &cfg));
    }

    #[test]
    fn boxes_stay_in_image() {
        let cfg = VotingBenchConfig {
            images: 20,
            ..Default::default()
        };
        for d in generate(1, &cfg).detections {
            let b = d.bbox;
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= cfg.image_size && b.y2 <= cfg.image_size);
        }
    }
}
