//! Labels proposals against ground truth and draws a fixed-size ROI batch
//! with a fixed foreground fraction.

use rand::seq::SliceRandom;

use crate::boxes::{iou, RoiBox};
use crate::error::{Error, Result};
use crate::eval::GroundTruthObject;
use crate::head::{encode_delta, RoiTarget};
use crate::Rng64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub rois_per_image: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    pub bg_iou_lo: f64,
    pub bg_iou_hi: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            rois_per_image: 128,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            bg_iou_lo: 0.1,
            bg_iou_hi: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledRoi {
    pub bbox: RoiBox,
    pub target: RoiTarget,
}

/// Draws `n` items from `pool`: without replacement while it lasts, then
/// by repetition of a fresh shuffle.
fn draw(pool: &[usize], n: usize, rng: &mut Rng64) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    if pool.is_empty() {
        return out;
    }
    while out.len() < n {
        let mut p = pool.to_vec();
        p.shuffle(rng);
        out.extend(p.into_iter().take(n - out.len()));
    }
    out
}

/// Foreground: best IoU with any object `>= fg_iou`, labeled with that
/// object's class. Background: best IoU in `[bg_iou_lo, bg_iou_hi)`. When
/// no proposal falls in the background band, the lowest-IoU proposals
/// below `fg_iou` serve as background instead. The foreground count is
/// `round(fg_fraction * rois_per_image)` capped by what exists; the rest is
/// background, and shortfalls are filled by repetition. Ground-truth boxes
/// join the candidate pool.
pub fn sample_rois(
    proposals: &[RoiBox],
    gts: &[GroundTruthObject],
    config: &SamplerConfig,
    rng: &mut Rng64,
) -> Result<Vec<SampledRoi>> {
    if proposals.is_empty() {
        return Err(Error::InvalidArgument("sample_rois needs at least one proposal".into()));
    }
    let mut pool: Vec<RoiBox> = proposals.to_vec();
    pool.extend(gts.iter().map(|g| g.bbox));
    let best: Vec<(f64, Option<usize>)> = pool
        .iter()
        .map(|p| {
            gts.iter()
                .enumerate()
                .map(|(i, g)| (iou(p, &g.bbox), Some(i)))
                .fold((0.0, None), |a, b| if b.0 > a.0 { b } else { a })
        })
        .collect();
    let fg: Vec<usize> = (0..pool.len()).filter(|&i| best[i].0 >= config.fg_iou).collect();
    let mut bg: Vec<usize> = (0..pool.len())
        .filter(|&i| best[i].0 >= config.bg_iou_lo && best[i].0 < config.bg_iou_hi)
        .collect();
    if bg.is_empty() {
        let mut below: Vec<usize> = (0..pool.len()).filter(|&i| best[i].0 < config.fg_iou).collect();
        below.sort_by(|&a, &b| best[a].0.total_cmp(&best[b].0).then(a.cmp(&b)));
        let lowest = below.first().map(|&i| best[i].0);
        bg = below.into_iter().filter(|&i| Some(best[i].0) == lowest).collect();
    }
    let n = config.rois_per_image;
    let mut n_fg = ((config.fg_fraction * n as f64).round() as usize).min(n);
    if fg.is_empty() {
        n_fg = 0;
    }
    if bg.is_empty() {
        n_fg = n;
    }
    let mut picks = draw(&fg, n_fg, rng);
    picks.extend(draw(&bg, n - n_fg, rng));
    picks
        .into_iter()
        .map(|i| {
            let b = pool[i];
            let is_fg = best[i].0 >= config.fg_iou;
            let target = match best[i].1 {
                Some(g) if is_fg => RoiTarget {
                    label: gts[g].class_id,
                    delta: Some(encode_delta(&b, &gts[g].bbox)?),
                },
                _ => RoiTarget { label: 0, delta: None },
            };
            Ok(SampledRoi { bbox: b, target })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn gt(b: [f64; 4], c: usize) -> GroundTruthObject {
        GroundTruthObject {
            image_id: 0,
            class_id: c,
            bbox: RoiBox::from_array(b),
            difficult: false,
        }
    }

    #[test]
    fn proposals_equal_to_gts_are_foreground() {
        let gts = vec![gt([0.0, 0.0, 10.0, 10.0], 1), gt([20.0, 20.0, 30.0, 30.0], 2)];
        let props: Vec<RoiBox> = gts.iter().map(|g| g.bbox).collect();
        let cfg = SamplerConfig {
            rois_per_image: 8,
            ..SamplerConfig::default()
        };
        let r = sample_rois(&props, &gts, &cfg, &mut Rng64::seed_from_u64(0)).unwrap();
        assert_eq!(r.len(), 8);
        assert!(r.iter().all(|s| s.target.label != 0 && s.target.delta.is_some()));
    }

    #[test]
    fn counts_match_fraction() {
        let gts = vec![gt([0.0, 0.0, 10.0, 10.0], 1)];
        let mut props = vec![RoiBox::new(0.0, 0.0, 10.0, 9.0); 5];
        props.extend(vec![RoiBox::new(5.0, 5.0, 15.0, 15.0); 50]); // IoU 25/175
        props.extend(vec![RoiBox::new(40.0, 40.0, 50.0, 50.0); 50]); // IoU 0, excluded
        let cfg = SamplerConfig {
            rois_per_image: 64,
            ..SamplerConfig::default()
        };
        let r = sample_rois(&props, &gts, &cfg, &mut Rng64::seed_from_u64(1)).unwrap();
        let fg = r.iter().filter(|s| s.target.label == 1).count();
        assert_eq!(fg, 16);
        assert_eq!(r.len() - fg, 48);
        assert!(r
            .iter()
            .filter(|s| s.target.label == 0)
            .all(|s| s.bbox == RoiBox::new(5.0, 5.0, 15.0, 15.0)));
    }

    #[test]
    fn background_fallback_to_lowest_iou() {
        let gts = vec![gt([0.0, 0.0, 10.0, 10.0], 1)];
        let props = vec![RoiBox::new(40.0, 40.0, 50.0, 50.0), RoiBox::new(0.0, 0.0, 10.0, 10.0)];
        let cfg = SamplerConfig {
            rois_per_image: 4,
            ..SamplerConfig::default()
        };
        let r = sample_rois(&props, &gts, &cfg, &mut Rng64::seed_from_u64(2)).unwrap();
        assert_eq!(r.iter().filter(|s| s.target.label == 0).count(), 3);
    }

    #[test]
    fn deterministic_under_seed() {
        let gts = vec![gt([0.0, 0.0, 10.0, 10.0], 1)];
        let props: Vec<RoiBox> = (0..30).map(|i| RoiBox::new(i as f64, 0.0, i as f64 + 10.0, 10.0)).collect();
        let cfg = SamplerConfig::default();
        let a = sample_rois(&props, &gts, &cfg, &mut Rng64::seed_from_u64(5)).unwrap();
        let b = sample_rois(&props, &gts, &cfg, &mut Rng64::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_proposals_rejected() {
        assert!(sample_rois(&[], &[], &SamplerConfig::default(), &mut Rng64::seed_from_u64(0)).is_err());
    }
}
