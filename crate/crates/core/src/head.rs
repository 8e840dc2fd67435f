//! Per-ROI detection head: two fully-connected layers, a softmax over
//! `K + 1` classes (index 0 is background) and class-specific box deltas.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::RoiBox;
use crate::error::{shape_err, Error, Result};
use crate::nn::act::{apply_mask, dropout_mask, relu, softmax_cross_entropy_backward, softmax_forward};
use crate::nn::dense::{Dense, DenseGrads};
use crate::Rng64;

/// Decoded `|dw|`, `|dh|` are clamped to this before `exp`.
pub const DELTA_LOG_CLAMP: f64 = 4.0;

/// Smooth-L1 switches from quadratic to linear at this residual.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            dx: s[0],
            dy: s[1],
            dw: s[2],
            dh: s[3],
        }
    }

    /// The delta that has the same effect on a horizontally mirrored box.
    pub fn mirrored(&self) -> Self {
        Self { dx: -self.dx, ..*self }
    }
}

fn check_proposal(p: &RoiBox) -> Result<()> {
    if !(p.width() > 0.0 && p.height() > 0.0) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!("degenerate proposal {p:?}")));
    }
    Ok(())
}

/// Center offsets normalized by proposal size, log size ratios.
pub fn encode_delta(proposal: &RoiBox, target: &RoiBox) -> Result<BoxDelta> {
    check_proposal(proposal)?;
    check_proposal(target)?;
    let (pcx, pcy) = proposal.center();
    let (tcx, tcy) = target.center();
    Ok(BoxDelta {
        dx: (tcx - pcx) / proposal.width(),
        dy: (tcy - pcy) / proposal.height(),
        dw: (target.width() / proposal.width()).ln(),
        dh: (target.height() / proposal.height()).ln(),
    })
}

/// Inverse of [`encode_delta`] (inside the clamp); no clipping.
pub fn decode_delta_unclipped(proposal: &RoiBox, delta: &BoxDelta) -> Result<RoiBox> {
    check_proposal(proposal)?;
    let (pcx, pcy) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = pcx + delta.dx * pw;
    let cy = pcy + delta.dy * ph;
    let w = pw * delta.dw.clamp(-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP).exp();
    let h = ph * delta.dh.clamp(-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP).exp();
    Ok(RoiBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h))
}

/// Decodes and clips to the `image_w x image_h` image.
pub fn decode_delta(proposal: &RoiBox, delta: &BoxDelta, image_w: f64, image_h: f64) -> Result<RoiBox> {
    Ok(decode_delta_unclipped(proposal, delta)?.clip(image_w, image_h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub fc6: Dense,
    pub fc7: Dense,
    pub cls_out: Dense,
    pub bbox_out: Dense,
    pub dropout_p: f64,
}

impl HeadParams {
    /// Xavier for the hidden layers; small Gaussians for the outputs.
    pub fn new<R: Rng + ?Sized>(
        descriptor_len: usize,
        hidden: usize,
        num_classes: usize,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc6: Dense::xavier(descriptor_len, hidden, rng)?,
            fc7: Dense::xavier(hidden, hidden, rng)?,
            cls_out: Dense::gaussian(hidden, num_classes + 1, 0.01, rng),
            bbox_out: Dense::gaussian(hidden, 4 * num_classes, 0.001, rng),
            dropout_p,
        })
    }

    /// Number of foreground classes `K`.
    pub fn num_classes(&self) -> usize {
        self.cls_out.out_features - 1
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Vec<f64>,
    h6: Vec<f64>,
    mask6: Option<Vec<f64>>,
    d6: Vec<f64>,
    h7: Vec<f64>,
    mask7: Option<Vec<f64>>,
    d7: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// Softmax probabilities over `K + 1` classes.
    pub probs: Vec<f64>,
    /// Raw logits before the softmax.
    pub logits: Vec<f64>,
    /// `4K` class-specific deltas.
    pub deltas: Vec<f64>,
}

impl HeadOutput {
    /// Delta for foreground class `class_id` in `1..=K`.
    pub fn delta_for(&self, class_id: usize) -> BoxDelta {
        BoxDelta::from_slice(&self.deltas[4 * (class_id - 1)..4 * class_id])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub fc6: DenseGrads,
    pub fc7: DenseGrads,
    pub cls_out: DenseGrads,
    pub bbox_out: DenseGrads,
}

impl HeadGrads {
    pub fn zeros_for(p: &HeadParams) -> Self {
        Self {
            fc6: DenseGrads::zeros_for(&p.fc6),
            fc7: DenseGrads::zeros_for(&p.fc7),
            cls_out: DenseGrads::zeros_for(&p.cls_out),
            bbox_out: DenseGrads::zeros_for(&p.bbox_out),
        }
    }
}

/// flatten -> fc6 -> ReLU -> dropout -> fc7 -> ReLU -> dropout -> (cls, bbox).
/// Dropout runs only when `rng` is given.
pub fn head_forward(descriptor: &[f64], params: &HeadParams, mut rng: Option<&mut Rng64>) -> Result<(HeadOutput, HeadCache)> {
    let mut drop = |v: &mut Vec<f64>| -> Option<Vec<f64>> {
        match rng.as_deref_mut() {
            Some(r) if params.dropout_p > 0.0 => {
                let m = dropout_mask(v.len(), params.dropout_p, r);
                apply_mask(v, &m);
                Some(m)
            }
            _ => None,
        }
    };
    let h6: Vec<f64> = params.fc6.forward(descriptor)?.into_iter().map(relu).collect();
    let mut d6 = h6.clone();
    let mask6 = drop(&mut d6);
    let h7: Vec<f64> = params.fc7.forward(&d6)?.into_iter().map(relu).collect();
    let mut d7 = h7.clone();
    let mask7 = drop(&mut d7);
    let logits = params.cls_out.forward(&d7)?;
    let deltas = params.bbox_out.forward(&d7)?;
    let probs = softmax_forward(&logits)?;
    Ok((
        HeadOutput { probs, logits, deltas },
        HeadCache {
            input: descriptor.to_vec(),
            h6,
            mask6,
            d6,
            h7,
            mask7,
            d7,
        },
    ))
}

/// Backpropagates logit and delta gradients; returns `dL/ddescriptor`.
pub fn head_backward(
    params: &HeadParams,
    cache: &HeadCache,
    grad_logits: &[f64],
    grad_deltas: &[f64],
    grads: &mut HeadGrads,
) -> Result<Vec<f64>> {
    let mut g7 = params.cls_out.backward_into(&cache.d7, grad_logits, &mut grads.cls_out)?;
    let gb = params.bbox_out.backward_into(&cache.d7, grad_deltas, &mut grads.bbox_out)?;
    for (a, b) in g7.iter_mut().zip(&gb) {
        *a += b;
    }
    if let Some(m) = &cache.mask7 {
        apply_mask(&mut g7, m);
    }
    for (g, &h) in g7.iter_mut().zip(&cache.h7) {
        if h <= 0.0 {
            *g = 0.0;
        }
    }
    let mut g6 = params.fc7.backward_into(&cache.d6, &g7, &mut grads.fc7)?;
    if let Some(m) = &cache.mask6 {
        apply_mask(&mut g6, m);
    }
    for (g, &h) in g6.iter_mut().zip(&cache.h6) {
        if h <= 0.0 {
            *g = 0.0;
        }
    }
    params.fc6.backward_into(&cache.input, &g6, &mut grads.fc6)
}

/// Training label of one ROI: class in `0..=K` (0 = background) and the
/// regression target for foreground ROIs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiTarget {
    pub label: usize,
    pub delta: Option<BoxDelta>,
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * a * a / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < SMOOTH_L1_BETA {
        x / SMOOTH_L1_BETA
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskLoss {
    pub total: f64,
    pub classification: f64,
    pub regression: f64,
    /// Per-ROI gradients w.r.t. logits and deltas.
    pub grad_logits: Vec<Vec<f64>>,
    pub grad_deltas: Vec<Vec<f64>>,
}

/// Mean over ROIs of softmax cross-entropy plus smooth-L1 on the
/// ground-truth class's deltas (foreground ROIs only). Sums run in ROI
/// order.
pub fn multitask_loss(outputs: &[HeadOutput], targets: &[RoiTarget]) -> Result<MultitaskLoss> {
    if outputs.len() != targets.len() {
        return Err(shape_err("multitask_loss", "outputs and targets differ in length"));
    }
    let n = outputs.len().max(1) as f64;
    let mut cls = 0.0;
    let mut reg = 0.0;
    let mut grad_logits = Vec::with_capacity(outputs.len());
    let mut grad_deltas = Vec::with_capacity(outputs.len());
    for (out, t) in outputs.iter().zip(targets) {
        let classes = out.probs.len();
        if t.label >= classes {
            return Err(Error::LabelOutOfRange { label: t.label, classes });
        }
        cls += -out.probs[t.label].max(f64::MIN_POSITIVE).ln();
        let mut gl = softmax_cross_entropy_backward(&out.probs, t.label)?;
        gl.iter_mut().for_each(|g| *g /= n);
        grad_logits.push(gl);
        let mut gd = vec![0.0; out.deltas.len()];
        if t.label > 0 {
            let target = t.delta.ok_or_else(|| {
                Error::InvalidArgument("foreground ROI without regression target".into())
            })?;
            let base = 4 * (t.label - 1);
            for (k, tv) in target.to_array().iter().enumerate() {
                let r = out.deltas[base + k] - tv;
                reg += smooth_l1(r);
                gd[base + k] = smooth_l1_grad(r) / n;
            }
        }
        grad_deltas.push(gd);
    }
    Ok(MultitaskLoss {
        total: (cls + reg) / n,
        classification: cls / n,
        regression: reg / n,
        grad_logits,
        grad_deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_head_is_uniform() {
        let p = HeadParams {
            fc6: Dense::zeros(8, 5),
            fc7: Dense::zeros(5, 5),
            cls_out: Dense::zeros(5, 4),
            bbox_out: Dense::zeros(5, 12),
            dropout_p: 0.0,
        };
        let (o, _) = head_forward(&[0.3; 8], &p, None).unwrap();
        assert_eq!(o.probs.len(), 4);
        assert_eq!(o.deltas.len(), 12);
        assert!(o.probs.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(o.deltas.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_examples() {
        let p = RoiBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode_delta(&p, &p).unwrap(), BoxDelta::default());
        let d = encode_delta(&p, &RoiBox::new(5.0, 5.0, 15.0, 15.0)).unwrap();
        assert_eq!(d, BoxDelta { dx: 0.5, dy: 0.5, dw: 0.0, dh: 0.0 });
        assert!(encode_delta(&RoiBox::new(1.0, 1.0, 1.0, 5.0), &p).is_err());
    }

    #[test]
    fn decode_clips_and_clamps() {
        let p = RoiBox::new(10.0, 10.0, 20.0, 20.0);
        let b = decode_delta(&p, &BoxDelta { dx: 0.0, dy: 0.0, dw: 50.0, dh: 0.0 }, 64.0, 64.0).unwrap();
        assert_eq!((b.x1, b.x2), (0.0, 64.0));
        let u = decode_delta_unclipped(&p, &BoxDelta { dx: 0.0, dy: 0.0, dw: 50.0, dh: 0.0 }).unwrap();
        assert!((u.width() - 10.0 * 4f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn background_batch_has_no_regression() {
        let mut rng = Rng64::seed_from_u64(2);
        let p = HeadParams::new(6, 4, 2, 0.0, &mut rng).unwrap();
        let outs: Vec<HeadOutput> = (0..3)
            .map(|i| head_forward(&[i as f64 * 0.1 + 0.2; 6], &p, None).unwrap().0)
            .collect();
        let t = vec![RoiTarget { label: 0, delta: None }; 3];
        let l = multitask_loss(&outs, &t).unwrap();
        assert_eq!(l.regression, 0.0);
        assert!(l.grad_deltas.iter().flatten().all(|&g| g == 0.0));
        let bad = vec![RoiTarget { label: 3, delta: None }; 3];
        assert!(matches!(multitask_loss(&outs, &bad), Err(Error::LabelOutOfRange { label: 3, .. })));
    }

    #[test]
    fn perfect_prediction_leaves_entropy_floor() {
        let out = HeadOutput {
            probs: vec![0.1, 0.9],
            logits: vec![0.0, 0.0],
            deltas: vec![0.1, -0.2, 0.3, 0.0],
        };
        let t = RoiTarget {
            label: 1,
            delta: Some(BoxDelta { dx: 0.1, dy: -0.2, dw: 0.3, dh: 0.0 }),
        };
        let l = multitask_loss(&[out], &[t]).unwrap();
        assert_eq!(l.regression, 0.0);
        assert!((l.total + 0.9f64.ln()).abs() < 1e-15);
    }
}
