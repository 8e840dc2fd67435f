use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::xavier_uniform;
use crate::error::{shape_err, Result};

/// Fully-connected layer, weights `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weights: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }

    pub fn xavier<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            in_features,
            out_features,
            weights: xavier_uniform(&[out_features, in_features], rng)?,
            bias: vec![0.0; out_features],
        })
    }

    /// Gaussian weights with the given standard deviation, zero bias.
    pub fn gaussian<R: Rng + ?Sized>(in_features: usize, out_features: usize, std: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            in_features,
            out_features,
            weights: (0..in_features * out_features).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_features],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_features {
            return Err(shape_err(
                "dense_forward",
                format!("input has {} features, layer expects {}", x.len(), self.in_features),
            ));
        }
        Ok(self
            .weights
            .chunks_exact(self.in_features)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }

    /// Returns `dL/dx` and accumulates parameter gradients into `grads`.
    pub fn backward_into(&self, x: &[f64], grad_out: &[f64], grads: &mut DenseGrads) -> Result<Vec<f64>> {
        if x.len() != self.in_features || grad_out.len() != self.out_features {
            return Err(shape_err(
                "dense_backward",
                format!(
                    "x {} / grad {} vs layer {}->{}",
                    x.len(),
                    grad_out.len(),
                    self.in_features,
                    self.out_features
                ),
            ));
        }
        let mut gx = vec![0.0; self.in_features];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.bias[o] += g;
            let row = &self.weights[o * self.in_features..(o + 1) * self.in_features];
            let grow = &mut grads.weights[o * self.in_features..(o + 1) * self.in_features];
            for i in 0..self.in_features {
                gx[i] += g * row[i];
                grow[i] += g * x[i];
            }
        }
        Ok(gx)
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<(Vec<f64>, DenseGrads)> {
        let mut grads = DenseGrads::zeros_for(self);
        let gx = self.backward_into(x, grad_out, &mut grads)?;
        Ok((gx, grads))
    }
}

impl DenseGrads {
    pub fn zeros_for(layer: &Dense) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }
}
