//! Central finite-difference gradients, the oracle every hand-written
//! backward pass in this crate is checked against.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Tensors larger than this are probed on a random subset of coordinates.
pub const FULL_SWEEP_LIMIT: usize = 10_000;

pub const MIN_PROBES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub num_probes: usize,
    pub epsilon: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }

    /// Combines reports of several instances of the same op.
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            op_name: self.op_name,
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            num_probes: self.num_probes + other.num_probes,
            epsilon: self.epsilon,
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-3)`. The floor keeps coordinates whose true
/// gradient is zero from dividing rounding noise by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn eval<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64]) -> Result<f64> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("function value {v}")))
    }
}

/// Central differences at the given coordinates only.
pub fn finite_diff_at<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    point: &[f64],
    epsilon: f64,
    indices: &[usize],
) -> Result<Vec<f64>> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = x[i];
        x[i] = orig + epsilon;
        let plus = eval(&mut f, &x)?;
        x[i] = orig - epsilon;
        let minus = eval(&mut f, &x)?;
        x[i] = orig;
        out.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(out)
}

/// Full central-difference gradient of `f` at `point`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(f: F, point: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..point.len()).collect();
    finite_diff_at(f, point, epsilon, &all)
}

/// Every coordinate for small tensors, a random subset otherwise.
pub fn probe_indices<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<usize> {
    if len <= FULL_SWEEP_LIMIT {
        (0..len).collect()
    } else {
        let mut idx = sample(rng, len, MIN_PROBES).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Compares an analytic gradient against central differences of `f`.
pub fn check_gradient<F, R>(
    op_name: &str,
    f: F,
    point: &[f64],
    analytic: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    if analytic.len() != point.len() {
        return Err(Error::InvalidArgument(format!(
            "{op_name}: analytic gradient has {} entries for a {}-dim point",
            analytic.len(),
            point.len()
        )));
    }
    let indices = probe_indices(point.len(), rng);
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!("{op_name}: empty point")));
    }
    let numeric = finite_diff_at(f, point, epsilon, &indices)?;
    let max_rel_error = indices
        .iter()
        .zip(&numeric)
        .map(|(&i, &n)| relative_error(analytic[i], n))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error,
        num_probes: indices.len(),
        epsilon,
    })
}
