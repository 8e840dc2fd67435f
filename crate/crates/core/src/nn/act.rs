use rand::Rng;

use super::tensor::FeatureMap;
use crate::error::{Error, Result};

/// `max(v, 0)`; returns `+0.0` for every non-positive input.
#[inline]
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn relu_forward(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&v| relu(v)).collect()
}

/// Subgradient 0 at exactly 0. `input` is the pre-activation.
pub fn relu_backward(input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

pub fn relu_map(input: &FeatureMap) -> FeatureMap {
    let mut out = input.clone();
    out.values_mut().iter_mut().for_each(|v| *v = relu(*v));
    out
}

/// Masks `grad` in place where the forward output was not positive.
pub fn relu_backward_inplace(output: &[f64], grad: &mut [f64]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn softmax_forward(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// `-ln p[label]`.
pub fn cross_entropy_loss(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or(Error::LabelOutOfRange {
        label,
        classes: probs.len(),
    })?;
    Ok(-p.max(f64::MIN_POSITIVE).ln())
}

/// Gradient of `cross_entropy_loss(softmax(logits), label)` w.r.t. the logits.
pub fn softmax_cross_entropy_backward(probs: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= probs.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: probs.len(),
        });
    }
    let mut g = probs.to_vec();
    g[label] -= 1.0;
    Ok(g)
}

/// Jacobian-vector product of softmax: given `dL/dp`, returns `dL/dlogits`.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - dot))
        .collect()
}

/// Inverted dropout. Returns the per-entry multiplier (0 or `1/(1-p)`).
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    if p <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

pub fn apply_mask(values: &mut [f64], mask: &[f64]) {
    for (v, m) in values.iter_mut().zip(mask) {
        *v *= m;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps() {
        assert_eq!(relu_forward(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu_backward(&[-1.0, 0.0, 2.0], &[5.0, 5.0, 5.0]), vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn softmax_uniform() {
        let p = softmax_forward(&[0.3; 4]).unwrap();
        for v in &p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax_forward(&[1000.0, -3.0, 2.5, 7.0, 0.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(softmax_forward(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn cross_entropy_two_way_is_ln2() {
        let p = softmax_forward(&[0.0, 0.0]).unwrap();
        let l = cross_entropy_loss(&p, 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            cross_entropy_loss(&[0.5, 0.5], 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        assert!(softmax_cross_entropy_backward(&[0.5, 0.5], 3).is_err());
    }
}
