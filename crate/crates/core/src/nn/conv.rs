//! 2-D cross-correlation with zero padding, its transposed form used for
//! learned upsampling, and the hand-written backward passes of both.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::{bilinear_kernel, he_uniform, xavier_uniform};
use super::tensor::FeatureMap;
use crate::error::{shape_err, Error, Result};

/// Weights are laid out `[out_channels][in_channels][kernel_h][kernel_w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrads {
    pub fn zeros_for(params: &ConvParams) -> Self {
        Self {
            weights: vec![0.0; params.weights.len()],
            bias: vec![0.0; params.bias.len()],
        }
    }

    pub fn accumulate(&mut self, other: &ConvGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl ConvParams {
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            weights: vec![0.0; out_channels * in_channels * kernel_h * kernel_w],
            bias: vec![0.0; out_channels],
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(out_channels, in_channels, kernel_h, kernel_w, stride, pad);
        p.weights = xavier_uniform(&[out_channels, in_channels, kernel_h, kernel_w], rng)?;
        Ok(p)
    }

    /// He-uniform weights, zero bias.
    pub fn he<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(out_channels, in_channels, kernel_h, kernel_w, stride, pad);
        p.weights = he_uniform(&[out_channels, in_channels, kernel_h, kernel_w], rng)?;
        Ok(p)
    }

    /// 1x1 convolution that copies channel `c` to channel `c`.
    pub fn identity_1x1(channels: usize) -> Self {
        let mut p = Self::zeros(channels, channels, 1, 1, 1, 0);
        for c in 0..channels {
            p.weights[c * channels + c] = 1.0;
        }
        p
    }

    /// Transposed-convolution parameters performing per-channel bilinear
    /// upsampling by `factor` with a `2*factor` kernel.
    pub fn bilinear_upsample(channels: usize, factor: usize) -> Self {
        let k = 2 * factor;
        let kernel = bilinear_kernel(k);
        let mut p = Self::zeros(channels, channels, k, k, factor, 0);
        for c in 0..channels {
            let base = (c * channels + c) * k * k;
            p.weights[base..base + k * k].copy_from_slice(&kernel);
        }
        p
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel_h + ky) * self.kernel_w + kx
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("convolution stride must be >= 1".into()));
        }
        let expect = self.out_channels * self.in_channels * self.kernel_h * self.kernel_w;
        if self.weights.len() != expect {
            return Err(shape_err(
                "ConvParams",
                format!("weights have {} entries, expected {}", self.weights.len(), expect),
            ));
        }
        if self.bias.len() != self.out_channels {
            return Err(shape_err(
                "ConvParams",
                format!("bias has {} entries, expected {}", self.bias.len(), self.out_channels),
            ));
        }
        Ok(())
    }

    /// Output spatial size of the forward cross-correlation.
    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let ph = height + 2 * self.pad;
        let pw = width + 2 * self.pad;
        if ph < self.kernel_h || pw < self.kernel_w || self.stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!(
                    "{}x{} input (pad {}) is smaller than the {}x{} kernel",
                    height, width, self.pad, self.kernel_h, self.kernel_w
                ),
            ));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

fn check_input(op: &'static str, input: &FeatureMap, params: &ConvParams) -> Result<()> {
    params.validate()?;
    if input.channels() != params.in_channels {
        return Err(shape_err(
            op,
            format!(
                "input has {} channels, parameters expect {} ({}x{}x{}x{} kernel)",
                input.channels(),
                params.in_channels,
                params.out_channels,
                params.in_channels,
                params.kernel_h,
                params.kernel_w
            ),
        ));
    }
    Ok(())
}

pub fn conv2d_forward(input: &FeatureMap, params: &ConvParams) -> Result<FeatureMap> {
    check_input("conv2d_forward", input, params)?;
    let (oh, ow) = params.output_dims(input.height(), input.width())?;
    let (h, w) = (input.height() as isize, input.width() as isize);
    let (s, p) = (params.stride as isize, params.pad as isize);
    let mut out = FeatureMap::zeros(params.out_channels, oh, ow);
    for o in 0..params.out_channels {
        let b = params.bias[o];
        out.plane_mut(o).iter_mut().for_each(|v| *v = b);
        for i in 0..params.in_channels {
            let src = input.plane(i);
            for ky in 0..params.kernel_h {
                for kx in 0..params.kernel_w {
                    let wv = params.weights[params.widx(o, i, ky, kx)];
                    let dst = out.plane_mut(o);
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let row = &src[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w {
                                *d += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward(
    input: &FeatureMap,
    params: &ConvParams,
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, ConvGrads)> {
    check_input("conv2d_backward", input, params)?;
    let (oh, ow) = params.output_dims(input.height(), input.width())?;
    if grad_out.shape() != (params.out_channels, oh, ow) {
        return Err(shape_err(
            "conv2d_backward",
            format!(
                "grad_out is {:?}, forward output is {:?}",
                grad_out.shape(),
                (params.out_channels, oh, ow)
            ),
        ));
    }
    let (h, w) = (input.height() as isize, input.width() as isize);
    let (s, p) = (params.stride as isize, params.pad as isize);
    let mut grad_in = FeatureMap::zeros(input.channels(), input.height(), input.width());
    let mut grads = ConvGrads::zeros_for(params);
    for o in 0..params.out_channels {
        let g = grad_out.plane(o);
        grads.bias[o] = g.iter().sum();
        for i in 0..params.in_channels {
            let src = input.plane(i);
            for ky in 0..params.kernel_h {
                for kx in 0..params.kernel_w {
                    let wi = params.widx(o, i, ky, kx);
                    let wv = params.weights[wi];
                    let mut gw = 0.0;
                    let gin = grad_in.plane_mut(i);
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let base = iy as usize * w as usize;
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w {
                                let gv = g[oy * ow + ox];
                                gw += gv * src[base + ix as usize];
                                gin[base + ix as usize] += gv * wv;
                            }
                        }
                    }
                    grads.weights[wi] += gw;
                }
            }
        }
    }
    Ok((grad_in, grads))
}

fn deconv_geometry(
    input: &FeatureMap,
    params: &ConvParams,
    target: (usize, usize),
) -> Result<(usize, usize, usize, usize)> {
    check_input("deconv", input, params)?;
    let full_h = (input.height().saturating_sub(1)) * params.stride + params.kernel_h;
    let full_w = (input.width().saturating_sub(1)) * params.stride + params.kernel_w;
    if target.0 == 0 || target.1 == 0 || input.height() == 0 || input.width() == 0 {
        return Err(shape_err("deconv", "non-positive output dims"));
    }
    if target.0 > full_h || target.1 > full_w {
        return Err(shape_err(
            "deconv",
            format!(
                "crop target {}x{} exceeds full output {}x{}",
                target.0, target.1, full_h, full_w
            ),
        ));
    }
    Ok((full_h, full_w, (full_h - target.0) / 2, (full_w - target.1) / 2))
}

/// Transposed convolution followed by a centered crop to `target`.
pub fn deconv_forward(
    input: &FeatureMap,
    params: &ConvParams,
    target: (usize, usize),
) -> Result<FeatureMap> {
    let (_, _, off_y, off_x) = deconv_geometry(input, params, target)?;
    let (th, tw) = target;
    let s = params.stride;
    let mut out = FeatureMap::zeros(params.out_channels, th, tw);
    for o in 0..params.out_channels {
        let b = params.bias[o];
        out.plane_mut(o).iter_mut().for_each(|v| *v = b);
    }
    for i in 0..params.in_channels {
        for y in 0..input.height() {
            for x in 0..input.width() {
                let v = input.get(i, y, x);
                if v == 0.0 {
                    continue;
                }
                for o in 0..params.out_channels {
                    for ky in 0..params.kernel_h {
                        let fy = y * s + ky;
                        if fy < off_y || fy - off_y >= th {
                            continue;
                        }
                        for kx in 0..params.kernel_w {
                            let fx = x * s + kx;
                            if fx < off_x || fx - off_x >= tw {
                                continue;
                            }
                            out.add_at(o, fy - off_y, fx - off_x, v * params.weights[params.widx(o, i, ky, kx)]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Upsamples by the parameter stride: output is `stride x` the input size.
pub fn deconv_upsample_forward(input: &FeatureMap, params: &ConvParams) -> Result<FeatureMap> {
    let target = (input.height() * params.stride, input.width() * params.stride);
    deconv_forward(input, params, target)
}

pub fn deconv_backward(
    input: &FeatureMap,
    params: &ConvParams,
    target: (usize, usize),
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, ConvGrads)> {
    let (_, _, off_y, off_x) = deconv_geometry(input, params, target)?;
    if grad_out.shape() != (params.out_channels, target.0, target.1) {
        return Err(shape_err(
            "deconv_backward",
            format!("grad_out is {:?}, expected {:?}", grad_out.shape(), (params.out_channels, target.0, target.1)),
        ));
    }
    let (th, tw) = target;
    let s = params.stride;
    let mut grad_in = FeatureMap::zeros(input.channels(), input.height(), input.width());
    let mut grads = ConvGrads::zeros_for(params);
    for o in 0..params.out_channels {
        grads.bias[o] = grad_out.plane(o).iter().sum();
    }
    for i in 0..params.in_channels {
        for y in 0..input.height() {
            for x in 0..input.width() {
                let v = input.get(i, y, x);
                let mut gi = 0.0;
                for o in 0..params.out_channels {
                    for ky in 0..params.kernel_h {
                        let fy = y * s + ky;
                        if fy < off_y || fy - off_y >= th {
                            continue;
                        }
                        for kx in 0..params.kernel_w {
                            let fx = x * s + kx;
                            if fx < off_x || fx - off_x >= tw {
                                continue;
                            }
                            let g = grad_out.get(o, fy - off_y, fx - off_x);
                            let wi = params.widx(o, i, ky, kx);
                            gi += g * params.weights[wi];
                            grads.weights[wi] += g * v;
                        }
                    }
                }
                grad_in.set(i, y, x, gi);
            }
        }
    }
    Ok((grad_in, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_1x1_is_identity() {
        let x = FeatureMap::from_fn(3, 4, 5, |c, y, x| (c * 100 + y * 10 + x) as f64 - 7.5);
        let out = conv2d_forward(&x, &ConvParams::identity_1x1(3)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut p = ConvParams::zeros(2, 3, 3, 3, 1, 1);
        p.weights.iter_mut().enumerate().for_each(|(i, w)| *w = i as f64 * 0.1);
        p.bias = vec![0.5, -2.0];
        let out = conv2d_forward(&FeatureMap::zeros(3, 6, 6), &p).unwrap();
        assert!(out.plane(0).iter().all(|&v| v == 0.5));
        assert!(out.plane(1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let p = ConvParams::zeros(2, 3, 1, 1, 1, 0);
        let err = conv2d_forward(&FeatureMap::zeros(4, 2, 2), &p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("4 channels") && msg.contains("expect 3"), "{msg}");
    }

    #[test]
    fn kernel_larger_than_input_rejected() {
        let p = ConvParams::zeros(1, 1, 5, 5, 1, 0);
        assert!(conv2d_forward(&FeatureMap::zeros(1, 3, 3), &p).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut p = ConvParams::zeros(2, 2, 3, 3, 2, 1);
        p.weights.iter_mut().for_each(|w| *w = 0.3);
        let x = FeatureMap::filled(2, 5, 5, 1.5);
        let (oh, ow) = p.output_dims(5, 5).unwrap();
        let (gi, gp) = conv2d_backward(&x, &p, &FeatureMap::zeros(2, oh, ow)).unwrap();
        assert!(gi.values().iter().all(|&v| v == 0.0));
        assert!(gp.weights.iter().chain(&gp.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_conv_backward_passes_gradient_through() {
        let x = FeatureMap::from_fn(2, 3, 3, |c, y, x| (c + y + x) as f64);
        let g = FeatureMap::from_fn(2, 3, 3, |c, y, x| (c as f64) - (y * x) as f64);
        let (gi, _) = conv2d_backward(&x, &ConvParams::identity_1x1(2), &g).unwrap();
        assert_eq!(gi, g);
    }

    #[test]
    fn bilinear_deconv_constant_interior() {
        let p = ConvParams::bilinear_upsample(1, 4);
        let x = FeatureMap::filled(1, 5, 5, 2.0);
        let out = deconv_upsample_forward(&x, &p).unwrap();
        assert_eq!(out.shape(), (1, 20, 20));
        for y in 4..16 {
            for xx in 4..16 {
                assert!((out.get(0, y, xx) - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_deconv_single_cell_is_symmetric_tent() {
        let p = ConvParams::bilinear_upsample(1, 16);
        let mut x = FeatureMap::zeros(1, 3, 3);
        x.set(0, 1, 1, 1.0);
        let out = deconv_upsample_forward(&x, &p).unwrap();
        assert_eq!(out.shape(), (1, 48, 48));
        // the active cell covers output rows 16..32; its tent is centered at 23.5
        for y in 0..48 {
            for xx in 0..48 {
                let v = out.get(0, y, xx);
                assert!((v - out.get(0, 47 - y, xx)).abs() < 1e-12);
                assert!((v - out.get(0, y, 47 - xx)).abs() < 1e-12);
                assert!((v - out.get(0, xx, y)).abs() < 1e-12);
            }
        }
        assert!(out.get(0, 23, 23) > out.get(0, 20, 23));
    }

    #[test]
    fn deconv_rejects_zero_dims() {
        let p = ConvParams::bilinear_upsample(1, 2);
        assert!(deconv_forward(&FeatureMap::zeros(1, 2, 2), &p, (0, 4)).is_err());
        assert!(deconv_forward(&FeatureMap::zeros(1, 0, 2), &p, (4, 4)).is_err());
    }
}
