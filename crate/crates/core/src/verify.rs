//! Registry of finite-difference checks, one entry per differentiable op.
//! Each check draws several random small instances, contracts the op's
//! output with a random projection to get a scalar loss, and compares the
//! hand-written backward pass against central differences over every
//! input and parameter entry.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::boxes::RoiBox;
use crate::error::Result;
use crate::head::{head_backward, head_forward, multitask_loss, BoxDelta, HeadGrads, HeadOutput, HeadParams, RoiTarget};
use crate::irnn::{
    irnn_block_backward, irnn_block_forward, irnn_direction_backward, irnn_direction_forward, seg_head_backward,
    seg_head_forward, ClassMap, Direction, IrnnBlockParams, IrnnBlockSpec, IrnnDirectionParams, Recurrence,
    SegHeadParams, IGNORE_LABEL,
};
use crate::nn::act::{cross_entropy_loss, relu_backward, relu_forward, softmax_cross_entropy_backward, softmax_forward};
use crate::nn::gradcheck::{check_gradient, GradCheckReport, DEFAULT_EPSILON};
use crate::nn::pool::global_average_pool_unpool_backward;
use crate::nn::{
    conv2d_backward, conv2d_forward, deconv_backward, deconv_forward, global_average_pool_unpool, ConvParams, Dense,
    FeatureMap,
};
use crate::skip_pool::{
    fuse_descriptors, fuse_descriptors_backward, l2_normalize, l2_normalize_backward, rescale, rescale_backward,
    roi_max_pool, roi_max_pool_backward, NormMode, ScaleMode, SkipPoolConfig, SkipPoolGrads, SkipPoolParams,
    SkipSource,
};
use crate::Rng64;

/// Required maximum relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Random instances per op.
pub const DEFAULT_INSTANCES: usize = 6;

/// Analytic gradient and its flattening. `corrupt` perturbs the analytic
/// gradient (negative control for the harness itself).
type Check = fn(&mut Rng64, bool) -> Result<GradCheckReport>;

#[derive(Clone, Copy)]
pub struct RegisteredOp {
    pub name: &'static str,
    check: Check,
}

impl RegisteredOp {
    /// Runs `instances` random instances and merges their reports.
    pub fn run(&self, seed: u64, instances: usize, corrupt: bool) -> Result<GradCheckReport> {
        let mut rng = Rng64::seed_from_u64(seed ^ fxhash(self.name));
        let mut report: Option<GradCheckReport> = None;
        for _ in 0..instances.max(1) {
            let r = (self.check)(&mut rng, corrupt)?;
            report = Some(match report {
                None => r,
                Some(acc) => acc.merge(r),
            });
        }
        let mut r = report.expect("at least one instance");
        r.op_name = self.name.to_string();
        Ok(r)
    }
}

/// Stable per-op seed offset so ops do not share random streams.
fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Every registered differentiable op, each exactly once.
pub fn registry() -> Vec<RegisteredOp> {
    vec![
        RegisteredOp { name: "conv2d", check: check_conv },
        RegisteredOp { name: "deconv", check: check_deconv },
        RegisteredOp { name: "relu", check: check_relu },
        RegisteredOp { name: "softmax_cross_entropy", check: check_softmax_ce },
        RegisteredOp { name: "dense", check: check_dense },
        RegisteredOp { name: "global_average", check: check_gap },
        RegisteredOp { name: "irnn_learned", check: check_irnn_learned },
        RegisteredOp { name: "irnn_identity", check: check_irnn_identity },
        RegisteredOp { name: "irnn_block", check: check_irnn_block },
        RegisteredOp { name: "l2norm_scale_whole", check: check_l2_whole },
        RegisteredOp { name: "l2norm_scale_channels", check: check_l2_channels },
        RegisteredOp { name: "roi_max_pool", check: check_roi_pool },
        RegisteredOp { name: "skip_fusion", check: check_fusion },
        RegisteredOp { name: "fc_head", check: check_head },
        RegisteredOp { name: "multitask_loss", check: check_multitask },
        RegisteredOp { name: "seg_head", check: check_seg },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub reports: Vec<GradCheckReport>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.reports.iter().all(|r| r.passes(self.tolerance))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for r in &self.reports {
            s.push_str(&format!(
                "{:<24} max_rel_error={:.3e} probes={:<6} {}\n",
                r.op_name,
                r.max_rel_error,
                r.num_probes,
                if r.passes(self.tolerance) { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

/// Runs the whole registry; `corrupt` names ops whose analytic gradient is
/// deliberately perturbed.
pub fn run_suite(seed: u64, instances: usize, corrupt: &[String]) -> Result<SuiteReport> {
    let reports = registry()
        .iter()
        .map(|op| op.run(seed, instances, corrupt.iter().any(|c| c == op.name)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        reports,
        tolerance: TOLERANCE,
    })
}

// ---- helpers ---------------------------------------------------------------

fn uniform(rng: &mut Rng64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero, for inputs that pass through kinks.
fn away_from_zero(rng: &mut Rng64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn random_map(rng: &mut Rng64, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::from_vec(c, h, w, uniform(rng, c * h * w, -1.0, 1.0)).expect("sized")
}

fn map_like(shape: (usize, usize, usize), v: &[f64]) -> FeatureMap {
    FeatureMap::from_vec(shape.0, shape.1, shape.2, v.to_vec()).expect("sized")
}

fn split<'a>(v: &'a [f64], sizes: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &s in sizes {
        out.push(&v[at..at + s]);
        at += s;
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn finish(
    name: &str,
    f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    mut analytic: Vec<f64>,
    corrupt: bool,
    rng: &mut Rng64,
) -> Result<GradCheckReport> {
    if corrupt {
        analytic.iter_mut().for_each(|g| *g = *g * 1.01 + 1e-3);
    }
    check_gradient(name, f, point, &analytic, DEFAULT_EPSILON, rng)
}

fn conv_with(p: &ConvParams, w: &[f64], b: &[f64]) -> ConvParams {
    let mut q = p.clone();
    q.weights = w.to_vec();
    q.bias = b.to_vec();
    q
}

// ---- checks -----------------------------------------------------------------

fn check_conv(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
    let k = rng.random_range(1..4);
    let (s, pad) = (rng.random_range(1..3), rng.random_range(0..2));
    let (h, w) = (rng.random_range(k..7), rng.random_range(k..7));
    let x = random_map(rng, ci, h, w);
    let mut p = ConvParams::zeros(co, ci, k, k, s, pad);
    p.weights = uniform(rng, p.weights.len(), -1.0, 1.0);
    p.bias = uniform(rng, co, -1.0, 1.0);
    let y = conv2d_forward(&x, &p)?;
    let proj = uniform(rng, y.len(), -1.0, 1.0);
    let (gx, gp) = conv2d_backward(&x, &p, &map_like(y.shape(), &proj))?;
    let sizes = [x.len(), p.weights.len(), p.bias.len()];
    let point = [x.values(), &p.weights[..], &p.bias[..]].concat();
    let analytic = [gx.values(), &gp.weights[..], &gp.bias[..]].concat();
    let f = |v: &[f64]| {
        let s = split(v, &sizes);
        let y = conv2d_forward(&map_like(x.shape(), s[0]), &conv_with(&p, s[1], s[2])).expect("valid");
        dot(y.values(), &proj)
    };
    finish("conv2d", f, &point, analytic, corrupt, rng)
}

fn check_deconv(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    let (ci, co) = (rng.random_range(1..3), rng.random_range(1..3));
    let s = rng.random_range(1..4);
    let k = 2 * s;
    let (h, w) = (rng.random_range(2..5), rng.random_range(2..5));
    let x = random_map(rng, ci, h, w);
    let mut p = ConvParams::zeros(co, ci, k, k, s, 0);
    p.weights = uniform(rng, p.weights.len(), -1.0, 1.0);
    p.bias = uniform(rng, co, -1.0, 1.0);
    let target = (h * s, w * s);
    let y = deconv_forward(&x, &p, target)?;
    let proj = uniform(rng, y.len(), -1.0, 1.0);
    let (gx, gp) = deconv_backward(&x, &p, target, &map_like(y.shape(), &proj))?;
    let sizes = [x.len(), p.weights.len(), p.bias.len()];
    let point = [x.values(), &p.weights[..], &p.bias[..]].concat();
    let analytic = [gx.values(), &gp.weights[..], &gp.bias[..]].concat();
    let f = |v: &[f64]| {
        let s = split(v, &sizes);
        let y = deconv_forward(&map_like(x.shape(), s[0]), &conv_with(&p, s[1], s[2]), target).expect("valid");
        dot(y.values(), &proj)
    };
    finish("deconv", f, &point, analytic, corrupt, rng)
}

fn check_relu(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    let n = rng.random_range(5..40);
    let x = away_from_zero(rng, n);
    let proj = uniform(rng, n, -1.0, 1.0);
    let analytic = relu_backward(&x, &proj);
    let f = |v: &[f64]| dot(&relu_forward(v), &proj);
    finish("relu", f, &x, analytic, corrupt, rng)
}

fn check_softmax_ce(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    let n = rng.random_range(2..8);
    let logits = uniform(rng, n, -3.0, 3.0);
    let label = rng.random_range(0..n);
    let analytic = softmax_cross_entropy_backward(&softmax_forward(&logits)?, label)?;
    let f = |v: &[f64]| cross_entropy_loss(&softmax_forward(v).expect("finite"), label).expect("label in range");
    finish("softmax_cross_entropy", f, &logits, analytic, corrupt, rng)
}

fn check_dense(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    let (i, o) = (rng.random_range(1..8), rng.random_range(1..8));
    let mut d = Dense::zeros(i, o);
    d.weights = uniform(rng, i * o, -1.0, 1.0);
    d.bias = uniform(rng, o, -1.0, 1.0);
    let x = uniform(rng, i, -1.0, 1.0);
    let proj = uniform(rng, o, -1.0, 1.0);
    let (gx, g) = d.backward(&x, &proj)?;
    let sizes = [i, i * o, o];
    let point = [&x[..], &d.weights[..], &d.bias[..]].concat();
    let analytic = [&gx[..], &g.weights[..], &g.bias[..]].concat();
    let f = |v: &[f64]| {
        let s = split(v, &sizes);
        let mut q = d.clone();
        q.weights = s[1].to_vec();
        q.bias = s[2].to_vec();
        dot(&q.forward(s[0]).expect("sized"), &proj)
    };
    finish("dense", f, &point, analytic, corrupt, rng)
}

fn check_gap(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
    let x = random_map(rng, c, h, w);
    let proj = uniform(rng, x.len(), -1.0, 1.0);
    let analytic = global_average_pool_unpool_backward(&map_like(x.shape(), &proj)).into_values();
    let f = |v: &[f64]| dot(global_average_pool_unpool(&map_like(x.shape(), v)).values(), &proj);
    finish("global_average", f, x.values(), analytic, corrupt, rng)
}

fn irnn_instance(rng: &mut Rng64, learned: bool, corrupt: bool, name: &str) -> Result<GradCheckReport> {
    let hid = rng.random_range(1..4);
    let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
    let dir = Direction::ALL[rng.random_range(0..4)];
    let x = random_map(rng, hid, h, w);
    let mut p = if learned {
        IrnnDirectionParams::learned(hid)
    } else {
        IrnnDirectionParams::fixed_identity(hid)
    }
    .with_first_step_bias();
    if let Recurrence::Learned(m) = &mut p.recurrence {
        for (i, v) in m.iter_mut().enumerate() {
            *v += rng.random_range(-0.3..0.3) * if i % (hid + 1) == 0 { 1.0 } else { 0.5 };
        }
    }
    p.first_step_bias = Some(uniform(rng, hid, -0.5, 0.5));
    let y = irnn_direction_forward(&x, dir, &p)?;
    let proj = uniform(rng, y.len(), -1.0, 1.0);
    let (gx, g) = irnn_direction_backward(&y, dir, &p, &map_like(y.shape(), &proj))?;
    let wl = if learned { hid * hid } else { 0 };
    let sizes = [x.len(), wl, hid];
    let w0 = match &p.recurrence {
        Recurrence::Learned(m) => m.clone(),
        Recurrence::Identity => vec![],
    };
    let point = [x.values(), &w0[..], p.first_step_bias.as_deref().expect("set")].concat();
    let analytic = [
        gx.values(),
        g.recurrence.as_deref().unwrap_or(&[]),
        g.first_step_bias.as_deref().expect("b0 enabled"),
    ]
    .concat();
    let f = |v: &[f64]| {
        let s = split(v, &sizes);
        let mut q = p.clone();
        if learned {
            q.recurrence = Recurrence::Learned(s[1].to_vec());
        }
        q.first_step_bias = Some(s[2].to_vec());
        dot(irnn_direction_forward(&map_like(x.shape(), s[0]), dir, &q).expect("valid").values(), &proj)
    };
    finish(name, f, &point, analytic, corrupt, rng)
}

fn check_irnn_learned(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    irnn_instance(rng, true, corrupt, "irnn_learned")
}

fn check_irnn_identity(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    irnn_instance(rng, false, corrupt, "irnn_identity")
}

/// Flattens every parameter of an IRNN block in a fixed order.
fn block_params(b: &IrnnBlockParams) -> Vec<f64> {
    let mut v = Vec::new();
    for l in &b.layers {
        for c in &l.input_to_hidden {
            v.extend_from_slice(&c.weights);
            v.extend_from_slice(&c.bias);
        }
        for (_, d) in &l.directions {
            if let Recurrence::Learned(m) = &d.recurrence {
                v.extend_from_slice(m);
            }
        }
        v.extend_from_slice(&l.post_concat_reduce.weights);
        v.extend_from_slice(&l.post_concat_reduce.bias);
    }
    v
}

fn set_block_params(b: &mut IrnnBlockParams, v: &[f64]) {
    let mut at = 0;
    let mut take = |dst: &mut Vec<f64>| {
        let n = dst.len();
        dst.copy_from_slice(&v[at..at + n]);
        at += n;
    };
    for l in &mut b.layers {
        for c in &mut l.input_to_hidden {
            take(&mut c.weights);
            take(&mut c.bias);
        }
        for (_, d) in &mut l.directions {
            if let Recurrence::Learned(m) = &mut d.recurrence {
                take(m);
            }
        }
        take(&mut l.post_concat_reduce.weights);
        take(&mut l.post_concat_reduce.bias);
    }
}

fn check_irnn_block(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    let spec = IrnnBlockSpec {
        in_channels: rng.random_range(1..3),
        hidden_units: rng.random_range(1..3),
        out_channels: rng.random_range(1..3),
        layers: 2,
        learned_recurrence: rng.random_bool(0.5),
        first_step_bias: false,
        dropout_p: 0.0,
    };
    let mut b = IrnnBlockParams::new(&spec, rng)?;
    for l in &mut b.layers {
        for c in &mut l.input_to_hidden {
            c.bias = uniform(rng, c.bias.len(), -0.5, 0.5);
        }
    }
    let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
    let x = random_map(rng, spec.in_channels, h, w);
    let (y, cache) = irnn_block_forward(&x, &b, None)?;
    let proj = uniform(rng, y.len(), -1.0, 1.0);
    let (gx, g) = irnn_block_backward(&b, &cache, &map_like(y.shape(), &proj))?;
    let mut gb = b.clone();
    for (l, lg) in gb.layers.iter_mut().zip(&g.layers) {
        for (c, cg) in l.input_to_hidden.iter_mut().zip(&lg.input_to_hidden) {
            c.weights = cg.weights.clone();
            c.bias = cg.bias.clone();
        }
        for ((_, d), dg) in l.directions.iter_mut().zip(&lg.directions) {
            if let (Recurrence::Learned(m), Some(gm)) = (&mut d.recurrence, &dg.recurrence) {
                *m = gm.clone();
            }
        }
        l.post_concat_reduce.weights = lg.post_concat_reduce.weights.clone();
        l.post_concat_reduce.bias = lg.post_concat_reduce.bias.clone();
    }
    let pv = block_params(&b);
    let sizes = [x.len(), pv.len()];
    let point = [x.values(), &pv[..]].concat();
    let analytic = [gx.values(), &block_params(&gb)[..]].concat();
    let f = |v: &[f64]| {
        let s = split(v, &sizes);
        let mut q = b.clone();
        set_block_params(&mut q, s[1]);
        dot(irnn_block_forward(&map_like(x.shape(), s[0]), &q, None).expect("valid").0.values(), &proj)
    };
    finish("irnn_block", f, &point, analytic, corrupt, rng)
}

fn l2_instance(rng: &mut Rng64, mode: NormMode, corrupt: bool, name: &str) -> Result<GradCheckReport> {
    let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    let x = random_map(rng, c, h, w);
    let scale = uniform(rng, c, 0.5, 2.0);
    let n = l2_normalize(&x, mode);
    let y = rescale(&n, &scale)?;
    let proj = uniform(rng, y.len(), -1.0, 1.0);
    let (g_n, g_s) = rescale_backward(&n, &scale, &map_like(y.shape(), &proj));
    let gx = l2_normalize_backward(&x, mode, &g_n);
    let sizes = [x.len(), c];
    let point = [x.values(), &scale[..]].concat();
    let analytic = [gx.values(), &g_s[..]].concat();
    let f = |v: &[f64]| {
        let s = split(v, &sizes);
        let y = rescale(&l2_normalize(&map_like(x.shape(), s[0]), mode), s[1]).expect("sized");
        dot(y.values(), &proj)
    };
    finish(name, f, &point, analytic, corrupt, rng)
}

fn check_l2_whole(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    l2_instance(rng, NormMode::WholeBlob, corrupt, "l2norm_scale_whole")
}

fn check_l2_channels(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    l2_instance(rng, NormMode::AcrossChannels, corrupt, "l2norm_scale_channels")
}

/// Feature map with well-separated values so no max flips within epsilon.
fn separated_map(rng: &mut Rng64, c: usize, h: usize, w: usize) -> FeatureMap {
    let n = c * h * w;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    FeatureMap::from_vec(c, h, w, vals).expect("sized")
}

fn check_roi_pool(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    let (c, h, w) = (rng.random_range(1..3), rng.random_range(3..7), rng.random_range(3..7));
    let stride = rng.random_range(1..3);
    let x = separated_map(rng, c, h, w);
    let (iw, ih) = ((w * stride) as f64, (h * stride) as f64);
    let x1 = rng.random_range(0.0..iw * 0.5);
    let y1 = rng.random_range(0.0..ih * 0.5);
    let roi = RoiBox::new(x1, y1, rng.random_range(x1 + 1.0..iw), rng.random_range(y1 + 1.0..ih));
    let (ph, pw) = (rng.random_range(1..4), rng.random_range(1..4));
    let pooled = roi_max_pool(&x, &roi, stride, ph, pw)?;
    let proj = uniform(rng, pooled.values.len(), -1.0, 1.0);
    let mut gx = FeatureMap::zeros(c, h, w);
    roi_max_pool_backward(&pooled.argmax, &map_like(pooled.values.shape(), &proj), &mut gx)?;
    let f = |v: &[f64]| {
        dot(roi_max_pool(&map_like(x.shape(), v), &roi, stride, ph, pw).expect("valid").values.values(), &proj)
    };
    finish("roi_max_pool", f, x.values(), gx.into_values(), corrupt, rng)
}

fn check_fusion(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    let (ph, pw) = (rng.random_range(1..3), rng.random_range(1..3));
    let chans: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..4)).collect();
    let norm = [NormMode::WholeBlob, NormMode::AcrossChannels, NormMode::None][rng.random_range(0..3)];
    let config = SkipPoolConfig {
        sources: chans
            .iter()
            .enumerate()
            .map(|(i, _)| SkipSource { name: format!("s{i}"), stride: 1 })
            .collect(),
        pooled_h: ph,
        pooled_w: pw,
        norm_mode: norm,
        scale_mode: ScaleMode::LearnedPerChannel,
        scale_init: 2.0,
        reduced_channels: rng.random_range(1..4),
    };
    let mut params = SkipPoolParams::new(&config, &chans, rng)?;
    for s in params.scales.iter_mut().flatten() {
        *s = rng.random_range(0.5..3.0);
    }
    let pooled: Vec<FeatureMap> = chans.iter().map(|&c| random_map(rng, c, ph, pw)).collect();
    let (y, cache) = fuse_descriptors(&pooled, &params, norm)?;
    let proj = uniform(rng, y.len(), -1.0, 1.0);
    let mut g = SkipPoolGrads::zeros_for(&params);
    let gp = fuse_descriptors_backward(&params, norm, config.scale_mode, &cache, &map_like(y.shape(), &proj), &mut g)?;
    let scales: Vec<f64> = params.scales.iter().flatten().copied().collect();
    let g_scales: Vec<f64> = g.scales.iter().flatten().copied().collect();
    let mut point: Vec<f64> = pooled.iter().flat_map(|p| p.values().iter().copied()).collect();
    let mut analytic: Vec<f64> = gp.iter().flat_map(|p| p.values().iter().copied()).collect();
    let n_in = point.len();
    // scales only matter when normalizing
    let use_scales = norm != NormMode::None;
    if use_scales {
        point.extend_from_slice(&scales);
        analytic.extend_from_slice(&g_scales);
    }
    point.extend_from_slice(&params.reduce.weights);
    point.extend_from_slice(&params.reduce.bias);
    analytic.extend_from_slice(&g.reduce.weights);
    analytic.extend_from_slice(&g.reduce.bias);
    let nw = params.reduce.weights.len();
    let f = |v: &[f64]| {
        let mut at = 0;
        let maps: Vec<FeatureMap> = pooled
            .iter()
            .map(|p| {
                let m = map_like(p.shape(), &v[at..at + p.len()]);
                at += p.len();
                m
            })
            .collect();
        debug_assert_eq!(at, n_in);
        let mut q = params.clone();
        if use_scales {
            for s in q.scales.iter_mut() {
                let n = s.len();
                s.copy_from_slice(&v[at..at + n]);
                at += n;
            }
        }
        q.reduce.weights = v[at..at + nw].to_vec();
        q.reduce.bias = v[at + nw..].to_vec();
        dot(fuse_descriptors(&maps, &q, norm).expect("valid").0.values(), &proj)
    };
    finish("skip_fusion", f, &point, analytic, corrupt, rng)
}

fn head_params_flat(p: &HeadParams) -> Vec<f64> {
    [&p.fc6, &p.fc7, &p.cls_out, &p.bbox_out]
        .iter()
        .flat_map(|d| d.weights.iter().chain(&d.bias).copied())
        .collect()
}

fn set_head_params(p: &mut HeadParams, v: &[f64]) {
    let mut at = 0;
    for d in [&mut p.fc6, &mut p.fc7, &mut p.cls_out, &mut p.bbox_out] {
        let nw = d.weights.len();
        d.weights.copy_from_slice(&v[at..at + nw]);
        at += nw;
        let nb = d.bias.len();
        d.bias.copy_from_slice(&v[at..at + nb]);
        at += nb;
    }
}

fn check_head(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    let (len, hid, k) = (rng.random_range(2..8), rng.random_range(2..8), rng.random_range(1..4));
    let mut p = HeadParams::new(len, hid, k, 0.0, rng)?;
    for d in [&mut p.fc6, &mut p.fc7] {
        d.bias = uniform(rng, d.bias.len(), 0.05, 0.5);
    }
    let mut pv = head_params_flat(&p);
    // larger output weights exercise the full chain
    for v in pv.iter_mut() {
        *v += rng.random_range(-0.2..0.2);
    }
    set_head_params(&mut p, &pv);
    let x = uniform(rng, len, -1.0, 1.0);
    let (out, cache) = head_forward(&x, &p, None)?;
    let pl = uniform(rng, out.logits.len(), -1.0, 1.0);
    let pd = uniform(rng, out.deltas.len(), -1.0, 1.0);
    let mut g = HeadGrads::zeros_for(&p);
    let gx = head_backward(&p, &cache, &pl, &pd, &mut g)?;
    let mut gp = p.clone();
    gp.fc6.weights = g.fc6.weights.clone();
    gp.fc6.bias = g.fc6.bias.clone();
    gp.fc7.weights = g.fc7.weights.clone();
    gp.fc7.bias = g.fc7.bias.clone();
    gp.cls_out.weights = g.cls_out.weights.clone();
    gp.cls_out.bias = g.cls_out.bias.clone();
    gp.bbox_out.weights = g.bbox_out.weights.clone();
    gp.bbox_out.bias = g.bbox_out.bias.clone();
    let point = [&x[..], &pv[..]].concat();
    let analytic = [&gx[..], &head_params_flat(&gp)[..]].concat();
    let f = |v: &[f64]| {
        let mut q = p.clone();
        set_head_params(&mut q, &v[len..]);
        let (o, _) = head_forward(&v[..len], &q, None).expect("sized");
        dot(&o.logits, &pl) + dot(&o.deltas, &pd)
    };
    finish("fc_head", f, &point, analytic, corrupt, rng)
}

fn check_multitask(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    let k = rng.random_range(1..4);
    let n = rng.random_range(1..6);
    let logits: Vec<Vec<f64>> = (0..n).map(|_| uniform(rng, k + 1, -2.0, 2.0)).collect();
    // deltas away from the smooth-L1 kink at |x| = 1
    let deltas: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..4 * k)
                .map(|_| {
                    let m: f64 = rng.random_range(0.05..0.9);
                    let far = if rng.random_bool(0.3) { 1.2 } else { 0.0 };
                    (m + far) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
                })
                .collect()
        })
        .collect();
    let targets: Vec<RoiTarget> = (0..n)
        .map(|_| {
            let label = rng.random_range(0..=k);
            RoiTarget {
                label,
                delta: (label > 0).then(|| BoxDelta {
                    dx: 0.0,
                    dy: 0.0,
                    dw: 0.0,
                    dh: 0.0,
                }),
            }
        })
        .collect();
    let build = |l: &[f64], d: &[f64]| -> Vec<HeadOutput> {
        (0..n)
            .map(|i| {
                let lg = l[i * (k + 1)..(i + 1) * (k + 1)].to_vec();
                HeadOutput {
                    probs: softmax_forward(&lg).expect("finite"),
                    logits: lg,
                    deltas: d[i * 4 * k..(i + 1) * 4 * k].to_vec(),
                }
            })
            .collect()
    };
    let lf: Vec<f64> = logits.concat();
    let df: Vec<f64> = deltas.concat();
    let ml = multitask_loss(&build(&lf, &df), &targets)?;
    let point = [&lf[..], &df[..]].concat();
    let analytic = [ml.grad_logits.concat(), ml.grad_deltas.concat()].concat();
    let nl = lf.len();
    let f = |v: &[f64]| multitask_loss(&build(&v[..nl], &v[nl..]), &targets).expect("valid").total;
    finish("multitask_loss", f, &point, analytic, corrupt, rng)
}

fn check_seg(rng: &mut Rng64, corrupt: bool) -> Result<GradCheckReport> {
    let (cin, k) = (rng.random_range(1..3), rng.random_range(2..4));
    let up = rng.random_range(1..3);
    let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
    let mut p = SegHeadParams::new(cin, k, up, rng)?;
    p.deconv.weights.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    p.score.bias = uniform(rng, k, -0.5, 0.5);
    p.loss_weight = rng.random_range(0.5..2.0);
    let x = random_map(rng, cin, h, w);
    let labels = ClassMap {
        height: h * up,
        width: w * up,
        labels: (0..h * up * w * up)
            .map(|_| if rng.random_bool(0.15) { IGNORE_LABEL } else { rng.random_range(0..k) })
            .collect(),
    };
    let (_, _, cache) = seg_head_forward(&x, &p, Some(&labels))?;
    let (gx, g) = seg_head_backward(&x, &p, &cache, &labels)?;
    let sizes = [x.len(), p.score.weights.len(), p.score.bias.len(), p.deconv.weights.len(), p.deconv.bias.len()];
    let point = [x.values(), &p.score.weights[..], &p.score.bias[..], &p.deconv.weights[..], &p.deconv.bias[..]].concat();
    let analytic = [gx.values(), &g.score.weights[..], &g.score.bias[..], &g.deconv.weights[..], &g.deconv.bias[..]].concat();
    let f = |v: &[f64]| {
        let s = split(v, &sizes);
        let mut q = p.clone();
        q.score = conv_with(&p.score, s[1], s[2]);
        q.deconv = conv_with(&p.deconv, s[3], s[4]);
        seg_head_forward(&map_like(x.shape(), s[0]), &q, Some(&labels)).expect("valid").1.expect("labels given")
    };
    finish("seg_head", f, &point, analytic, corrupt, rng)
}
