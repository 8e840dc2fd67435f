use rand::Rng;

use crate::error::{Error, Result};

/// Fan-in and fan-out of a weight tensor shaped `[out, in, k...]`.
pub fn fans(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot derive fans from shape {shape:?}"
        )));
    }
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidArgument(format!("zero fan for shape {shape:?}")));
    }
    Ok((fan_in, fan_out))
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Samples `prod(shape)` values uniformly in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Vec<f64>> {
    let (fan_in, fan_out) = fans(shape)?;
    let bound = xavier_bound(fan_in, fan_out);
    let n: usize = shape.iter().product();
    Ok((0..n).map(|_| rng.random_range(-bound..=bound)).collect())
}

/// Samples uniformly in `±sqrt(6 / fan_in)`, which keeps activation
/// variance roughly constant through ReLU layers.
pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Vec<f64>> {
    let (fan_in, _) = fans(shape)?;
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Ok((0..n).map(|_| rng.random_range(-bound..=bound)).collect())
}

/// One axis of the bilinear interpolation kernel.
pub fn bilinear_taps(size: usize) -> Vec<f64> {
    let factor = size.div_ceil(2) as f64;
    let center = if size % 2 == 1 {
        factor - 1.0
    } else {
        factor - 0.5
    };
    (0..size)
        .map(|i| 1.0 - (i as f64 - center).abs() / factor)
        .collect()
}

/// Separable bilinear interpolation kernel of side `size`, row-major.
pub fn bilinear_kernel(size: usize) -> Vec<f64> {
    let tap = bilinear_taps(size);
    let mut k = Vec::with_capacity(size * size);
    for &a in &tap {
        for &b in &tap {
            k.push(a * b);
        }
    }
    k
}
