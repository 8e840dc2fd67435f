//! Multi-layer ROI skip pooling: per-source ROI max pooling, L2
//! normalization, re-scaling, channel concatenation and a 1x1 reduction
//! back to a fixed descriptor shape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::RoiBox;
use crate::error::{shape_err, Error, Result};
use crate::nn::conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams};
use crate::nn::tensor::FeatureMap;

/// Fixed-shape per-ROI descriptor, `reduced_channels x pooled_h x pooled_w`.
pub type RoiDescriptor = FeatureMap;

/// Guard inside every L2 norm: `x / sqrt(sum x^2 + EPS)`.
pub const NORM_EPS: f64 = 1e-12;

/// Mean scale of whole-blob normalized descriptors.
pub const DEFAULT_SCALE_WHOLE_BLOB: f64 = 1000.0;
/// Mean scale of per-location (across channels) normalized descriptors.
pub const DEFAULT_SCALE_ACROSS_CHANNELS: f64 = 130.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// One norm over every entry of the pooled blob.
    WholeBlob,
    /// One norm per spatial location, over channels.
    AcrossChannels,
    None,
}

impl NormMode {
    pub fn default_scale(self) -> f64 {
        match self {
            NormMode::WholeBlob => DEFAULT_SCALE_WHOLE_BLOB,
            NormMode::AcrossChannels => DEFAULT_SCALE_ACROSS_CHANNELS,
            NormMode::None => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleMode {
    LearnedPerChannel,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipSource {
    pub name: String,
    /// Image pixels per feature cell.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipPoolConfig {
    pub sources: Vec<SkipSource>,
    pub pooled_h: usize,
    pub pooled_w: usize,
    pub norm_mode: NormMode,
    pub scale_mode: ScaleMode,
    pub scale_init: f64,
    pub reduced_channels: usize,
}

impl Default for SkipPoolConfig {
    fn default() -> Self {
        Self {
            sources: vec![
                SkipSource { name: "conv3".into(), stride: 4 },
                SkipSource { name: "conv4".into(), stride: 8 },
                SkipSource { name: "conv5".into(), stride: 16 },
                SkipSource { name: "context".into(), stride: 16 },
            ],
            pooled_h: 7,
            pooled_w: 7,
            norm_mode: NormMode::WholeBlob,
            scale_mode: ScaleMode::LearnedPerChannel,
            scale_init: DEFAULT_SCALE_WHOLE_BLOB,
            reduced_channels: 512,
        }
    }
}

impl SkipPoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pooled_h == 0 || self.pooled_w == 0 {
            return Err(Error::Config("pooled dims must be > 0".into()));
        }
        if self.sources.is_empty() {
            return Err(Error::Config("skip pooling needs at least one source".into()));
        }
        if self.sources.iter().any(|s| s.stride == 0) {
            return Err(Error::Config("source stride must be >= 1".into()));
        }
        if self.norm_mode != NormMode::None && !(self.scale_init > 0.0) {
            return Err(Error::Config("scale_init must be > 0 when normalizing".into()));
        }
        Ok(())
    }
}

/// Feature-cell rectangle `[y0, y1) x [x0, x1)` covered by an image-space
/// ROI: floor for the top-left, ceil for the bottom-right, clipped to the
/// map and at least one cell in each direction.
pub fn roi_cell_rect(roi: &RoiBox, stride: usize, height: usize, width: usize) -> (usize, usize, usize, usize) {
    let s = stride as f64;
    let span = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
        let a = (lo / s).floor().max(0.0).min(n as f64) as usize;
        let b = (hi / s).ceil().max(0.0).min(n as f64) as usize;
        if b > a {
            (a, b)
        } else if a >= n {
            (n - 1, n)
        } else {
            (a, a + 1)
        }
    };
    let (y0, y1) = span(roi.y1, roi.y2, height);
    let (x0, x1) = span(roi.x1, roi.x2, width);
    (y0, y1, x0, x1)
}

/// Integer bin edges partitioning `len` cells into `bins`; every bin covers
/// at least one cell.
pub fn bin_range(k: usize, len: usize, bins: usize) -> (usize, usize) {
    let start = k * len / bins;
    let end = ((k + 1) * len / bins).max(start + 1).min(len.max(start + 1));
    (start, end)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledRegion {
    pub values: FeatureMap,
    /// Linear index into the source map of each output cell's maximum.
    pub argmax: Vec<usize>,
}

pub fn roi_max_pool(
    feature: &FeatureMap,
    roi: &RoiBox,
    stride: usize,
    pooled_h: usize,
    pooled_w: usize,
) -> Result<PooledRegion> {
    let (c, h, w) = feature.shape();
    if h == 0 || w == 0 || pooled_h == 0 || pooled_w == 0 || stride == 0 {
        return Err(shape_err("roi_max_pool", "empty feature map, pooled grid or stride"));
    }
    if !roi.is_finite() {
        return Err(Error::NonFinite("ROI coordinates".into()));
    }
    let (y0, y1, x0, x1) = roi_cell_rect(roi, stride, h, w);
    let (rh, rw) = (y1 - y0, x1 - x0);
    let mut values = FeatureMap::zeros(c, pooled_h, pooled_w);
    let mut argmax = vec![0usize; c * pooled_h * pooled_w];
    for ch in 0..c {
        for by in 0..pooled_h {
            let (ys, ye) = bin_range(by, rh, pooled_h);
            for bx in 0..pooled_w {
                let (xs, xe) = bin_range(bx, rw, pooled_w);
                let mut best = f64::NEG_INFINITY;
                let mut best_i = feature.index(ch, y0 + ys, x0 + xs);
                for y in y0 + ys..y0 + ye {
                    for x in x0 + xs..x0 + xe {
                        let i = feature.index(ch, y, x);
                        let v = feature.values()[i];
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                let o = values.index(ch, by, bx);
                values.values_mut()[o] = best;
                argmax[o] = best_i;
            }
        }
    }
    Ok(PooledRegion { values, argmax })
}

/// Routes each pooled gradient to its recorded argmax cell.
pub fn roi_max_pool_backward(argmax: &[usize], grad_pooled: &FeatureMap, grad_feature: &mut FeatureMap) -> Result<()> {
    if argmax.len() != grad_pooled.len() {
        return Err(shape_err("roi_max_pool_backward", "argmax/gradient length mismatch"));
    }
    let n = grad_feature.len();
    let gf = grad_feature.values_mut();
    for (&i, &g) in argmax.iter().zip(grad_pooled.values()) {
        if i >= n {
            return Err(shape_err("roi_max_pool_backward", "argmax outside feature map"));
        }
        gf[i] += g;
    }
    Ok(())
}

/// Norms used by [`l2_normalize`]: one entry for whole-blob mode, one per
/// spatial location for across-channel mode.
fn norms(x: &FeatureMap, mode: NormMode) -> Vec<f64> {
    let (c, h, w) = x.shape();
    match mode {
        NormMode::WholeBlob => vec![(x.values().iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt()],
        NormMode::AcrossChannels => (0..h * w)
            .map(|p| {
                let ss: f64 = (0..c).map(|ch| x.values()[ch * h * w + p].powi(2)).sum();
                (ss + NORM_EPS).sqrt()
            })
            .collect(),
        NormMode::None => vec![1.0],
    }
}

pub fn l2_normalize(x: &FeatureMap, mode: NormMode) -> FeatureMap {
    let (c, h, w) = x.shape();
    let n = norms(x, mode);
    let mut out = x.clone();
    match mode {
        NormMode::WholeBlob => out.values_mut().iter_mut().for_each(|v| *v /= n[0]),
        NormMode::AcrossChannels => {
            for ch in 0..c {
                for p in 0..h * w {
                    out.values_mut()[ch * h * w + p] /= n[p];
                }
            }
        }
        NormMode::None => {}
    }
    out
}

/// `dL/dx` for `y = x / sqrt(|x|^2 + eps)` over each normalization group.
pub fn l2_normalize_backward(x: &FeatureMap, mode: NormMode, grad_out: &FeatureMap) -> FeatureMap {
    let (c, h, w) = x.shape();
    let n = norms(x, mode);
    let mut g = grad_out.clone();
    match mode {
        NormMode::WholeBlob => {
            let dot = x.dot(grad_out);
            let n3 = n[0] * n[0] * n[0];
            for (gi, (&xi, &go)) in g.values_mut().iter_mut().zip(x.values().iter().zip(grad_out.values())) {
                *gi = go / n[0] - xi * dot / n3;
            }
        }
        NormMode::AcrossChannels => {
            let hw = h * w;
            for p in 0..hw {
                let dot: f64 = (0..c).map(|ch| x.values()[ch * hw + p] * grad_out.values()[ch * hw + p]).sum();
                let n3 = n[p] * n[p] * n[p];
                for ch in 0..c {
                    let i = ch * hw + p;
                    g.values_mut()[i] = grad_out.values()[i] / n[p] - x.values()[i] * dot / n3;
                }
            }
        }
        NormMode::None => {}
    }
    g
}

/// Per-channel (or single broadcast) multiplicative scale.
pub fn rescale(x: &FeatureMap, scale: &[f64]) -> Result<FeatureMap> {
    let (c, _, _) = x.shape();
    if scale.len() != c && scale.len() != 1 {
        return Err(shape_err("rescale", format!("{} scales for {} channels", scale.len(), c)));
    }
    let mut out = x.clone();
    for ch in 0..c {
        let s = if scale.len() == 1 { scale[0] } else { scale[ch] };
        out.plane_mut(ch).iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

/// Returns `(dL/dx, dL/dscale)`.
pub fn rescale_backward(x: &FeatureMap, scale: &[f64], grad_out: &FeatureMap) -> (FeatureMap, Vec<f64>) {
    let c = x.channels();
    let mut gx = grad_out.clone();
    let mut gs = vec![0.0; scale.len()];
    for ch in 0..c {
        let si = if scale.len() == 1 { 0 } else { ch };
        let s = scale[si];
        gx.plane_mut(ch).iter_mut().for_each(|v| *v *= s);
        gs[si] += x.plane(ch).iter().zip(grad_out.plane(ch)).map(|(a, b)| a * b).sum::<f64>();
    }
    (gx, gs)
}

/// Learnable state of the fusion: per-source scales and the 1x1 reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipPoolParams {
    /// One vector per source: per-channel in learned mode, a single value
    /// in fixed mode (not updated).
    pub scales: Vec<Vec<f64>>,
    pub reduce: ConvParams,
}

impl SkipPoolParams {
    /// Xavier initialization of the reduction shrinks as the concatenated
    /// channel count grows.
    pub fn new<R: Rng + ?Sized>(config: &SkipPoolConfig, source_channels: &[usize], rng: &mut R) -> Result<Self> {
        config.validate()?;
        if source_channels.len() != config.sources.len() {
            return Err(Error::Config(format!(
                "{} channel counts for {} sources",
                source_channels.len(),
                config.sources.len()
            )));
        }
        let scales = source_channels
            .iter()
            .map(|&c| match config.scale_mode {
                ScaleMode::LearnedPerChannel => vec![config.scale_init; c],
                ScaleMode::Fixed => vec![config.scale_init],
            })
            .collect();
        let total: usize = source_channels.iter().sum();
        Ok(Self {
            scales,
            reduce: ConvParams::xavier(config.reduced_channels, total, 1, 1, 1, 0, rng)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkipPoolGrads {
    pub scales: Vec<Vec<f64>>,
    pub reduce: ConvGrads,
}

impl SkipPoolGrads {
    pub fn zeros_for(params: &SkipPoolParams) -> Self {
        Self {
            scales: params.scales.iter().map(|s| vec![0.0; s.len()]).collect(),
            reduce: ConvGrads::zeros_for(&params.reduce),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FuseCache {
    pooled: Vec<FeatureMap>,
    normalized: Vec<FeatureMap>,
    concat: FeatureMap,
}

/// Normalize, re-scale, concatenate in source order, reduce with 1x1.
pub fn fuse_descriptors(
    pooled: &[FeatureMap],
    params: &SkipPoolParams,
    norm_mode: NormMode,
) -> Result<(RoiDescriptor, FuseCache)> {
    let first = pooled.first().ok_or_else(|| shape_err("fuse_descriptors", "no sources"))?;
    if pooled.len() != params.scales.len() {
        return Err(shape_err("fuse_descriptors", "source count differs from scale count"));
    }
    if pooled.iter().any(|p| p.height() != first.height() || p.width() != first.width()) {
        return Err(shape_err("fuse_descriptors", "sources disagree on pooled spatial dims"));
    }
    let mut normalized = Vec::with_capacity(pooled.len());
    let mut scaled = Vec::with_capacity(pooled.len());
    for (p, s) in pooled.iter().zip(&params.scales) {
        if norm_mode == NormMode::None {
            normalized.push(p.clone());
            scaled.push(p.clone());
        } else {
            let n = l2_normalize(p, norm_mode);
            scaled.push(rescale(&n, s)?);
            normalized.push(n);
        }
    }
    let concat = FeatureMap::concat_channels(&scaled.iter().collect::<Vec<_>>())?;
    let out = conv2d_forward(&concat, &params.reduce)?;
    Ok((
        out,
        FuseCache {
            pooled: pooled.to_vec(),
            normalized,
            concat,
        },
    ))
}

/// Returns per-source gradients of the pooled inputs.
pub fn fuse_descriptors_backward(
    params: &SkipPoolParams,
    norm_mode: NormMode,
    scale_mode: ScaleMode,
    cache: &FuseCache,
    grad_out: &FeatureMap,
    grads: &mut SkipPoolGrads,
) -> Result<Vec<FeatureMap>> {
    let (g_concat, g_reduce) = conv2d_backward(&cache.concat, &params.reduce, grad_out)?;
    grads.reduce.accumulate(&g_reduce);
    let sizes: Vec<usize> = cache.pooled.iter().map(|p| p.channels()).collect();
    let parts = g_concat.split_channels(&sizes)?;
    let mut out = Vec::with_capacity(parts.len());
    for (i, g) in parts.into_iter().enumerate() {
        if norm_mode == NormMode::None {
            out.push(g);
            continue;
        }
        let (g_norm, g_scale) = rescale_backward(&cache.normalized[i], &params.scales[i], &g);
        if scale_mode == ScaleMode::LearnedPerChannel {
            for (a, b) in grads.scales[i].iter_mut().zip(&g_scale) {
                *a += b;
            }
        }
        out.push(l2_normalize_backward(&cache.pooled[i], norm_mode, &g_norm));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SkipPoolCache {
    argmax: Vec<Vec<usize>>,
    fuse: FuseCache,
}

/// Full per-ROI path from source maps to the fused descriptor.
pub fn skip_pool_roi(
    sources: &[&FeatureMap],
    roi: &RoiBox,
    config: &SkipPoolConfig,
    params: &SkipPoolParams,
) -> Result<(RoiDescriptor, SkipPoolCache)> {
    if sources.len() != config.sources.len() {
        return Err(shape_err("skip_pool_roi", "source map count differs from configuration"));
    }
    let mut pooled = Vec::with_capacity(sources.len());
    let mut argmax = Vec::with_capacity(sources.len());
    for (map, src) in sources.iter().zip(&config.sources) {
        let p = roi_max_pool(map, roi, src.stride, config.pooled_h, config.pooled_w)?;
        pooled.push(p.values);
        argmax.push(p.argmax);
    }
    let (desc, fuse) = fuse_descriptors(&pooled, params, config.norm_mode)?;
    Ok((desc, SkipPoolCache { argmax, fuse }))
}

/// Accumulates into `grad_sources` (same shapes as the source maps).
pub fn skip_pool_roi_backward(
    config: &SkipPoolConfig,
    params: &SkipPoolParams,
    cache: &SkipPoolCache,
    grad_desc: &FeatureMap,
    grad_sources: &mut [FeatureMap],
    grads: &mut SkipPoolGrads,
) -> Result<()> {
    let g_pooled = fuse_descriptors_backward(params, config.norm_mode, config.scale_mode, &cache.fuse, grad_desc, grads)?;
    for ((am, g), gs) in cache.argmax.iter().zip(&g_pooled).zip(grad_sources.iter_mut()) {
        roi_max_pool_backward(am, g, gs)?;
    }
    Ok(())
}

/// Mean L2 norm of pooled descriptors: per blob in whole-blob mode, per
/// spatial location in across-channel mode.
pub fn measure_mean_descriptor_norm(descriptors: &[FeatureMap], mode: NormMode) -> Result<f64> {
    if descriptors.is_empty() {
        return Err(Error::InvalidArgument("no descriptors to measure".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for d in descriptors {
        let (c, h, w) = d.shape();
        match mode {
            NormMode::AcrossChannels => {
                for p in 0..h * w {
                    total += (0..c).map(|ch| d.values()[ch * h * w + p].powi(2)).sum::<f64>().sqrt();
                    count += 1;
                }
            }
            NormMode::WholeBlob | NormMode::None => {
                total += d.values().iter().map(|v| v * v).sum::<f64>().sqrt();
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_cover_is_identity() {
        let f = FeatureMap::from_fn(2, 10, 10, |c, y, x| (c * 100 + y * 10 + x) as f64);
        let roi = RoiBox::new(2.0, 1.0, 9.0, 8.0);
        let p = roi_max_pool(&f, &roi, 1, 7, 7).unwrap();
        for c in 0..2 {
            for y in 0..7 {
                for x in 0..7 {
                    assert_eq!(p.values.get(c, y, x), f.get(c, y + 1, x + 2));
                }
            }
        }
    }

    #[test]
    fn constant_map_constant_pool() {
        let f = FeatureMap::filled(3, 6, 9, -1.25);
        let p = roi_max_pool(&f, &RoiBox::new(3.0, 5.0, 40.0, 22.0), 4, 7, 7).unwrap();
        assert!(p.values.values().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn coordinate_rounding_is_floor_ceil() {
        assert_eq!(roi_cell_rect(&RoiBox::new(5.0, 4.0, 17.0, 16.0), 4, 10, 10), (1, 4, 1, 5));
        // degenerate ROI collapses to one cell
        assert_eq!(roi_cell_rect(&RoiBox::new(8.0, 8.0, 8.0, 8.0), 4, 10, 10), (2, 3, 2, 3));
        // beyond the map: last cell
        assert_eq!(roi_cell_rect(&RoiBox::new(90.0, 90.0, 95.0, 95.0), 4, 10, 10), (9, 10, 9, 10));
    }

    #[test]
    fn argmax_ties_pick_smallest_index() {
        let f = FeatureMap::filled(1, 4, 4, 2.0);
        let p = roi_max_pool(&f, &RoiBox::new(0.0, 0.0, 4.0, 4.0), 1, 1, 1).unwrap();
        assert_eq!(p.argmax, vec![0]);
    }

    #[test]
    fn normalize_examples() {
        let x = FeatureMap::from_vec(2, 1, 1, vec![3.0, 4.0]).unwrap();
        let y = l2_normalize(&x, NormMode::WholeBlob);
        assert!((y.values()[0] - 0.6).abs() < 1e-12 && (y.values()[1] - 0.8).abs() < 1e-12);
        let z = l2_normalize(&FeatureMap::zeros(3, 2, 2), NormMode::AcrossChannels);
        assert!(z.values().iter().all(|&v| v == 0.0));
        let unit = FeatureMap::from_vec(1, 1, 2, vec![0.6, 0.8]).unwrap();
        let u = l2_normalize(&unit, NormMode::WholeBlob);
        for (a, b) in u.values().iter().zip(unit.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn default_scales() {
        assert_eq!(NormMode::WholeBlob.default_scale(), 1000.0);
        assert_eq!(NormMode::AcrossChannels.default_scale(), 130.0);
        let x = FeatureMap::from_fn(2, 2, 2, |c, y, x| (c + y + x) as f64);
        assert_eq!(rescale(&x, &[1.0]).unwrap(), x);
    }

    #[test]
    fn mean_norm_examples() {
        let a = FeatureMap::from_vec(1, 1, 1, vec![2.0]).unwrap();
        let b = FeatureMap::from_vec(1, 1, 1, vec![-4.0]).unwrap();
        assert_eq!(measure_mean_descriptor_norm(&[a.clone(), b], NormMode::WholeBlob).unwrap(), 3.0);
        let unit = FeatureMap::from_vec(2, 1, 1, vec![0.6, 0.8]).unwrap();
        assert!((measure_mean_descriptor_norm(&[unit.clone(), unit], NormMode::WholeBlob).unwrap() - 1.0).abs() < 1e-15);
        assert!(measure_mean_descriptor_norm(&[], NormMode::WholeBlob).is_err());
    }

    #[test]
    fn fuse_shapes() {
        let mut rng = <crate::Rng64 as rand::SeedableRng>::seed_from_u64(0);
        let config = SkipPoolConfig {
            sources: vec![SkipSource { name: "a".into(), stride: 1 }, SkipSource { name: "b".into(), stride: 1 }],
            ..SkipPoolConfig::default()
        };
        let params = SkipPoolParams::new(&config, &[512, 512], &mut rng).unwrap();
        assert_eq!(params.reduce.in_channels, 1024);
        let pooled = vec![FeatureMap::filled(512, 7, 7, 1.0), FeatureMap::filled(512, 7, 7, 2.0)];
        let (d, _) = fuse_descriptors(&pooled, &params, NormMode::WholeBlob).unwrap();
        assert_eq!(d.shape(), (512, 7, 7));
        let bad = vec![FeatureMap::filled(512, 7, 7, 1.0), FeatureMap::filled(512, 6, 7, 2.0)];
        assert!(fuse_descriptors(&bad, &params, NormMode::WholeBlob).is_err());
    }

    #[test]
    fn single_source_identity_reduce() {
        let x = FeatureMap::from_fn(3, 2, 2, |c, y, x| (c as f64 + 1.0) * (y as f64 - x as f64 + 0.5));
        let params = SkipPoolParams {
            scales: vec![vec![1000.0; 3]],
            reduce: ConvParams::identity_1x1(3),
        };
        let (d, _) = fuse_descriptors(&[x.clone()], &params, NormMode::WholeBlob).unwrap();
        let expect = rescale(&l2_normalize(&x, NormMode::WholeBlob), &[1000.0]).unwrap();
        assert_eq!(d, expect);
    }
}
