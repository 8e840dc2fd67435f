//! Independent oracles and fixtures shared by the integration tests and
//! the acceptance run. Nothing here calls the library's own versions of the
//! computations it checks.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ion_core::boxes::RoiBox;
use ion_core::eval::GroundTruthObject;
use ion_core::head::HeadOutput;
use ion_core::irnn::Direction;
use ion_core::nn::FeatureMap;
use ion_core::postprocess::Detection;
use ion_core::Rng64;
use rand::Rng;

/// Visits cells in sweep order for `dir`: lanes are rows for horizontal
/// sweeps and columns for vertical ones.
pub fn sweep_cells(dir: Direction, h: usize, w: usize) -> Vec<Vec<(usize, usize)>> {
    match dir {
        Direction::Right => (0..h).map(|y| (0..w).map(|x| (y, x)).collect()).collect(),
        Direction::Left => (0..h).map(|y| (0..w).rev().map(|x| (y, x)).collect()).collect(),
        Direction::Down => (0..w).map(|x| (0..h).map(|y| (y, x)).collect()).collect(),
        Direction::Up => (0..w).map(|x| (0..h).rev().map(|y| (y, x)).collect()).collect(),
    }
}

/// `h_t = max(0, W h_{t-1} + x_t)` one cell and one unit at a time; `w`
/// of `None` is the accumulator `h_t = max(0, h_{t-1} + x_t)`.
pub fn reference(x: &FeatureMap, dir: Direction, w: Option<&[f64]>, h0: &[f64]) -> FeatureMap {
    let (c, h, wd) = x.shape();
    let mut out = FeatureMap::zeros(c, h, wd);
    for lane in sweep_cells(dir, h, wd) {
        let mut prev = h0.to_vec();
        for (y, xx) in lane {
            let mut cur = vec![0.0; c];
            for u in 0..c {
                let rec = match w {
                    Some(w) => {
                        let mut acc = 0.0;
                        for k in 0..c {
                            acc += w[u * c + k] * prev[k];
                        }
                        acc
                    }
                    None => prev[u],
                };
                let v = rec + x.get(u, y, xx);
                cur[u] = if v > 0.0 { v } else { 0.0 };
                out.set(u, y, xx, cur[u]);
            }
            prev = cur;
        }
    }
    out
}

pub fn random_map(rng: &mut Rng64) -> FeatureMap {
    let (c, h, w) = (rng.random_range(1..6), rng.random_range(1..12), rng.random_range(1..12));
    FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

pub fn bits(m: &FeatureMap) -> Vec<u64> {
    m.values().iter().map(|v| v.to_bits()).collect()
}

pub fn identity(c: usize) -> Vec<f64> {
    (0..c * c).map(|i| if i % (c + 1) == 0 { 1.0 } else { 0.0 }).collect()
}

pub fn overlap(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    if inter == 0.0 {
        0.0
    } else {
        inter / (area(a) + area(b) - inter)
    }
}

/// Priority: higher score first, lower index on ties.
pub fn before(d: &[Detection], i: usize, j: usize) -> bool {
    d[i].score > d[j].score || (d[i].score == d[j].score && i < j)
}

/// Textbook recursion: keep the top box, drop it and everything it
/// overlaps, repeat on the rest.
pub fn nms_recursive(d: &[Detection], alive: BTreeSet<usize>, t: f64) -> BTreeSet<usize> {
    let Some(&top) = alive.iter().find(|&&i| alive.iter().all(|&j| j == i || before(d, i, j))) else {
        return BTreeSet::new();
    };
    let rest: BTreeSet<usize> = alive
        .iter()
        .copied()
        .filter(|&j| j != top && overlap(d[top].bbox.to_array(), d[j].bbox.to_array()) <= t)
        .collect();
    let mut kept = nms_recursive(d, rest, t);
    kept.insert(top);
    kept
}

/// Boxes clustered so overlaps are common.
pub fn instance(rng: &mut Rng64, max_boxes: usize, images: u64, classes: usize, tie_scores: bool) -> Vec<Detection> {
    let n = rng.random_range(0..=max_boxes);
    let centers: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(10.0..90.0), rng.random_range(10.0..90.0))).collect();
    (0..n)
        .map(|_| {
            let (cx, cy) = centers[rng.random_range(0..centers.len())];
            let cx = cx + rng.random_range(-6.0..6.0);
            let cy = cy + rng.random_range(-6.0..6.0);
            let w = rng.random_range(4.0..30.0);
            let h = rng.random_range(4.0..30.0);
            let score = if tie_scores {
                rng.random_range(1..4) as f64 / 4.0
            } else {
                rng.random_range(0.0..1.0)
            };
            Detection {
                image_id: rng.random_range(0..images),
                class_id: rng.random_range(1..=classes),
                score,
                bbox: RoiBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0),
            }
        })
        .collect()
}

pub fn vote_oracle(k: &Detection, pool: &[Detection], v: f64) -> [f64; 4] {
    let members: Vec<&Detection> = pool
        .iter()
        .filter(|d| d.image_id == k.image_id && d.class_id == k.class_id)
        .filter(|d| overlap(k.bbox.to_array(), d.bbox.to_array()) >= v)
        .collect();
    let total: f64 = members.iter().map(|d| d.score).sum();
    if total == 0.0 {
        return k.bbox.to_array();
    }
    let mut out = [0.0; 4];
    for (c, o) in out.iter_mut().enumerate() {
        *o = members.iter().map(|d| d.score / total * d.bbox.to_array()[c]).sum();
    }
    out
}

pub fn gt(image_id: u64, b: [f64; 4]) -> GroundTruthObject {
    GroundTruthObject {
        image_id,
        class_id: 1,
        bbox: RoiBox::from_array(b),
        difficult: false,
    }
}

pub fn det(image_id: u64, score: f64, b: [f64; 4]) -> Detection {
    Detection {
        image_id,
        class_id: 1,
        score,
        bbox: RoiBox::from_array(b),
    }
}

/// AP as the integral of the interpolated precision `p(r) = max precision
/// at recall >= r`, sampled on every recall step.
pub fn ap_oracle(tp: &[bool], num_gt: usize) -> f64 {
    let mut points = Vec::new();
    let (mut t, mut n) = (0.0, 0.0);
    for &f in tp {
        n += 1.0;
        if f {
            t += 1.0;
        }
        points.push((t / num_gt as f64, t / n));
    }
    let mut ap = 0.0;
    for k in 1..=num_gt {
        let r = k as f64 / num_gt as f64;
        let p = points
            .iter()
            .filter(|(rr, _)| *rr >= r - 1e-12)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        ap += p / num_gt as f64;
    }
    ap
}

pub fn mirror(o: &HeadOutput) -> HeadOutput {
    let mut m = o.clone();
    for d in m.deltas.chunks_exact_mut(4) {
        d[0] = -d[0];
    }
    m
}

pub fn random_output(rng: &mut Rng64, k: usize, symmetric: bool) -> HeadOutput {
    let logits: Vec<f64> = (0..=k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let mut deltas: Vec<f64> = (0..4 * k).map(|_| rng.random_range(-0.5..0.5)).collect();
    if symmetric {
        deltas.chunks_exact_mut(4).for_each(|d| d[0] = 0.0);
    }
    HeadOutput {
        probs: logits.iter().map(|l| l.exp() / z).collect(),
        logits,
        deltas,
    }
}

/// A mirror-symmetric 64-wide scene: ROIs come in mirrored pairs plus
/// ROIs centered on the axis, and an equivariant detector's outputs on a
/// mirrored ROI are the mirrored outputs. Returns the outputs of the
/// unflipped pass and of the flipped pass (ROI i of the flipped image is
/// the mirror of ROI i).
pub fn symmetric_flip_fixture(rng: &mut Rng64) -> (Vec<HeadOutput>, Vec<HeadOutput>) {
    let width = 64.0;
    let k = rng.random_range(1..4);
    let mut rois = Vec::new();
    let mut outputs = Vec::new();
    for _ in 0..rng.random_range(1..6) {
        // quarter-pixel coordinates mirror exactly
        let x1 = rng.random_range(0..112) as f64 / 4.0;
        let r = RoiBox::new(x1, 5.0, x1 + rng.random_range(8..120) as f64 / 4.0, 40.0);
        if r.x1 + r.x2 == width {
            continue; // on the axis: not a distinct mirrored pair
        }
        let o = random_output(rng, k, false);
        rois.push(r);
        outputs.push(o.clone());
        rois.push(r.flip_horizontal(width));
        outputs.push(mirror(&o));
    }
    for _ in 0..rng.random_range(0..3) {
        let half = rng.random_range(4..120) as f64 / 4.0;
        rois.push(RoiBox::new(32.0 - half, 0.0, 32.0 + half, 20.0));
        outputs.push(random_output(rng, k, true));
    }
    let flipped = rois
        .iter()
        .map(|r| {
            let m = r.flip_horizontal(width);
            let j = rois.iter().position(|q| *q == m).expect("ROI set closed under mirroring");
            outputs[j].clone()
        })
        .collect();
    (outputs, flipped)
}
