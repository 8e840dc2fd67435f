//! Synthetic shapes: colored rectangles, discs and triangles on noisy
//! backgrounds, with pixel class maps and jittered proposal boxes whose
//! recall is deliberately worse on small objects.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, RoiBox};
use crate::eval::GroundTruthObject;
use crate::irnn::ClassMap;
use crate::nn::FeatureMap;
use crate::Rng64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub image_id: u64,
    /// 3 x H x W, mean-subtracted: values roughly in [-0.5, 0.5].
    pub image: FeatureMap,
    pub objects: Vec<GroundTruthObject>,
    /// Per-pixel labels: 0 background, otherwise the class id.
    pub class_map: ClassMap,
    pub proposals: Vec<RoiBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub image_size: usize,
    /// Classes are cycled through rectangle, disc, triangle.
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side lengths in pixels, inclusive.
    pub min_side: usize,
    pub max_side: usize,
    /// Objects whose longer side is below this count as small for proposal
    /// generation.
    pub small_side: usize,
    pub proposals_per_large: usize,
    pub proposals_per_small: usize,
    /// Proposal jitter, as a fraction of object size (center and log-size).
    pub jitter_large: f64,
    pub jitter_small: f64,
    pub random_proposals: usize,
    pub background_noise: f64,
    pub color_jitter: f64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 3,
            min_objects: 1,
            max_objects: 3,
            min_side: 10,
            max_side: 30,
            small_side: 16,
            proposals_per_large: 8,
            proposals_per_small: 4,
            jitter_large: 0.1,
            jitter_small: 0.3,
            random_proposals: 24,
            background_noise: 0.15,
            color_jitter: 0.12,
        }
    }
}

/// Subtracted from every rendered pixel.
pub const PIXEL_MEAN: f64 = 0.5;

/// Class base colors (RGB); classes beyond three reuse them.
const PALETTE: [[f64; 3]; 3] = [[0.85, 0.3, 0.25], [0.3, 0.8, 0.35], [0.3, 0.4, 0.85]];

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rectangle,
    Disc,
    Triangle,
}

fn shape_of(class_id: usize) -> Shape {
    match (class_id - 1) % 3 {
        0 => Shape::Rectangle,
        1 => Shape::Disc,
        _ => Shape::Triangle,
    }
}

/// Whether pixel center `(px, py)` lies inside the shape drawn in `b`.
fn covers(shape: Shape, b: &RoiBox, px: f64, py: f64) -> bool {
    if px < b.x1 || px >= b.x2 || py < b.y1 || py >= b.y2 {
        return false;
    }
    let (u, v) = ((px - b.x1) / b.width(), (py - b.y1) / b.height());
    match shape {
        Shape::Rectangle => true,
        Shape::Disc => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        // apex at top center, base along the bottom edge
        Shape::Triangle => (u - 0.5).abs() <= 0.5 * v,
    }
}

fn jittered(rng: &mut Rng64, gt: &RoiBox, sigma: f64, size: f64) -> RoiBox {
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    let (cx, cy) = gt.center();
    let (w, h) = (gt.width(), gt.height());
    let cx = cx + n.sample(rng) * w;
    let cy = cy + n.sample(rng) * h;
    let w = w * n.sample(rng).exp();
    let h = h * n.sample(rng).exp();
    RoiBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h).clip(size, size)
}

fn render(rng: &mut Rng64, id: u64, cfg: &ShapesConfig) -> SyntheticScene {
    let s = cfg.image_size;
    let sf = s as f64;
    let bg_level: f64 = rng.random_range(0.35..0.65);
    let mut image = FeatureMap::from_fn(3, s, s, |_, _, _| 0.0);
    for v in image.values_mut() {
        *v = bg_level + rng.random_range(-cfg.background_noise..=cfg.background_noise);
    }
    let mut labels = vec![0usize; s * s];
    let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<GroundTruthObject> = Vec::new();
    for _ in 0..n_obj {
        for _attempt in 0..20 {
            let w = rng.random_range(cfg.min_side..=cfg.max_side.min(s)) as f64;
            let h = rng.random_range(cfg.min_side..=cfg.max_side.min(s)) as f64;
            let x1 = rng.random_range(0..=(s - w as usize)) as f64;
            let y1 = rng.random_range(0..=(s - h as usize)) as f64;
            let b = RoiBox::new(x1, y1, x1 + w, y1 + h);
            if objects.iter().any(|o| iou(&o.bbox, &b) > 0.0) {
                continue;
            }
            let class_id = rng.random_range(1..=cfg.num_classes);
            let base = PALETTE[(class_id - 1) % 3];
            let color: Vec<f64> = base
                .iter()
                .map(|c| (c + rng.random_range(-cfg.color_jitter..=cfg.color_jitter)).clamp(0.0, 1.0))
                .collect();
            let shape = shape_of(class_id);
            for y in y1 as usize..(y1 + h) as usize {
                for x in x1 as usize..(x1 + w) as usize {
                    if covers(shape, &b, x as f64 + 0.5, y as f64 + 0.5) {
                        for (c, &cv) in color.iter().enumerate() {
                            let noise = rng.random_range(-0.5 * cfg.background_noise..=0.5 * cfg.background_noise);
                            image.set(c, y, x, cv + noise);
                        }
                        labels[y * s + x] = class_id;
                    }
                }
            }
            objects.push(GroundTruthObject {
                image_id: id,
                class_id,
                bbox: b,
                difficult: false,
            });
            break;
        }
    }
    for v in image.values_mut() {
        *v -= PIXEL_MEAN;
    }
    let mut proposals = Vec::new();
    for o in &objects {
        let small = o.bbox.width().max(o.bbox.height()) < cfg.small_side as f64;
        let (n, sigma) = if small {
            (cfg.proposals_per_small, cfg.jitter_small)
        } else {
            (cfg.proposals_per_large, cfg.jitter_large)
        };
        for _ in 0..n {
            proposals.push(jittered(rng, &o.bbox, sigma, sf));
        }
    }
    for _ in 0..cfg.random_proposals {
        let w: f64 = rng.random_range(6.0..(0.6 * sf));
        let h: f64 = rng.random_range(6.0..(0.6 * sf));
        let x1 = rng.random_range(0.0..(sf - w));
        let y1 = rng.random_range(0.0..(sf - h));
        proposals.push(RoiBox::new(x1, y1, x1 + w, y1 + h));
    }
    proposals.retain(|p| p.width() >= 2.0 && p.height() >= 2.0);
    SyntheticScene {
        image_id: id,
        image,
        objects,
        class_map: ClassMap {
            height: s,
            width: s,
            labels,
        },
        proposals,
    }
}

/// Deterministic in `seed`; image ids run from `first_id`.
pub fn generate_shapes_dataset(seed: u64, n_images: usize, first_id: u64, cfg: &ShapesConfig) -> Vec<SyntheticScene> {
    let mut rng = Rng64::seed_from_u64(seed);
    (0..n_images).map(|i| render(&mut rng, first_id + i as u64, cfg)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecall {
    pub small: f64,
    pub large: f64,
    pub all: f64,
    pub num_small: usize,
    pub num_large: usize,
}

/// Fraction of objects covered by a proposal at IoU >= `thresh`, split by
/// the generator's small-object side threshold.
pub fn proposal_recall(scenes: &[SyntheticScene], thresh: f64, small_side: usize) -> ProposalRecall {
    let (mut hs, mut ns, mut hl, mut nl) = (0usize, 0usize, 0usize, 0usize);
    for sc in scenes {
        for o in &sc.objects {
            let hit = sc.proposals.iter().any(|p| iou(p, &o.bbox) >= thresh);
            if o.bbox.width().max(o.bbox.height()) < small_side as f64 {
                ns += 1;
                hs += hit as usize;
            } else {
                nl += 1;
                hl += hit as usize;
            }
        }
    }
    let frac = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    ProposalRecall {
        small: frac(hs, ns),
        large: frac(hl, nl),
        all: frac(hs + hl, ns + nl),
        num_small: ns,
        num_large: nl,
    }
}

/// Horizontal mirror of an image.
pub fn flip_image(image: &FeatureMap) -> FeatureMap {
    let (c, h, w) = image.shape();
    FeatureMap::from_fn(c, h, w, |ch, y, x| image.get(ch, y, w - 1 - x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let cfg = ShapesConfig::default();
        assert_eq!(generate_shapes_dataset(3, 5, 0, &cfg), generate_shapes_dataset(3, 5, 0, &cfg));
        assert_ne!(generate_shapes_dataset(3, 5, 0, &cfg), generate_shapes_dataset(4, 5, 0, &cfg));
    }

    #[test]
    fn boxes_in_bounds_and_map_consistent() {
        let cfg = ShapesConfig::default();
        for sc in generate_shapes_dataset(9, 40, 100, &cfg) {
            assert!(!sc.objects.is_empty());
            for o in &sc.objects {
                let b = o.bbox;
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
                // every labeled pixel of this class inside the box
                let inside = (b.y1 as usize..b.y2 as usize)
                    .flat_map(|y| (b.x1 as usize..b.x2 as usize).map(move |x| (y, x)))
                    .filter(|&(y, x)| sc.class_map.labels[y * 64 + x] == o.class_id)
                    .count();
                assert!(inside > 0);
            }
            for (i, &l) in sc.class_map.labels.iter().enumerate() {
                if l != 0 {
                    let (y, x) = ((i / 64) as f64 + 0.5, (i % 64) as f64 + 0.5);
                    assert!(sc.objects.iter().any(|o| o.class_id == l
                        && x >= o.bbox.x1
                        && x < o.bbox.x2
                        && y >= o.bbox.y1
                        && y < o.bbox.y2));
                }
            }
            assert!(sc.proposals.iter().all(|p| p.x2 <= 64.0 && p.y2 <= 64.0 && p.x1 >= 0.0));
        }
    }

    #[test]
    fn small_objects_have_lower_recall() {
        let cfg = ShapesConfig::default();
        let r = proposal_recall(&generate_shapes_dataset(1, 200, 0, &cfg), 0.5, cfg.small_side);
        assert!(r.num_small > 20 && r.num_large > 20);
        assert!(r.small < r.large, "{r:?}");
    }

    #[test]
    fn flip_twice_is_identity() {
        let sc = &generate_shapes_dataset(2, 1, 0, &ShapesConfig::default())[0];
        assert_eq!(flip_image(&flip_image(&sc.image)), sc.image);
    }
}
