//! The toy detector: a small strided conv backbone, a context operator on
//! its last layer, skip pooling from several depths, the per-ROI head, and
//! an optional segmentation regularizer. Parameters are addressable by
//! name for checkpoints, freezing and the optimizer.

use std::collections::BTreeSet;

use rand::SeedableRng;

use crate::boxes::RoiBox;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::head::{head_backward, head_forward, multitask_loss, HeadCache, HeadGrads, HeadOutput, HeadParams, RoiTarget};
use crate::irnn::{
    irnn_block_backward, irnn_block_forward, seg_head_backward, seg_head_forward, IrnnBlockCache, IrnnBlockParams,
    IrnnBlockSpec, Recurrence, SegHeadParams,
};
use crate::nn::act::relu_backward_inplace;
use crate::nn::act::relu_map;
use crate::nn::pool::global_average_pool_unpool_backward;
use crate::nn::{conv2d_backward, conv2d_forward, global_average_pool_unpool, ConvGrads, ConvParams, Dense, DenseGrads, FeatureMap};
use crate::skip_pool::{
    measure_mean_descriptor_norm, roi_max_pool, skip_pool_roi, skip_pool_roi_backward, NormMode, ScaleMode,
    SkipPoolCache, SkipPoolConfig, SkipPoolGrads, SkipPoolParams, SkipSource,
};
use crate::Rng64;

use super::config::{ContextKind, ExperimentConfig, ScaleInit};
use super::data::SyntheticScene;
use super::sampler::SampledRoi;

#[derive(Debug, Clone, PartialEq)]
pub enum ContextParams {
    Irnn(IrnnBlockParams),
    /// Same-size convolutions, each followed by ReLU.
    Convs(Vec<ConvParams>),
    GlobalAverage,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SourceRef {
    Backbone(usize),
    Context,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IonModel {
    pub layer_names: Vec<String>,
    pub backbone: Vec<ConvParams>,
    pub context: ContextParams,
    pub skip_config: SkipPoolConfig,
    pub skip: SkipPoolParams,
    pub head: HeadParams,
    pub seg: Option<SegHeadParams>,
    sources: Vec<SourceRef>,
}

/// One named parameter tensor. Non-trainable entries (fixed scales) are
/// still checkpointed.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a mut Vec<f64>,
    pub trainable: bool,
}

impl ParamRef<'_> {
    /// Layer name used for freezing: the part before the first dot.
    pub fn layer(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }
}

fn push_conv<'a>(out: &mut Vec<ParamRef<'a>>, name: &str, p: &'a mut ConvParams) {
    let ConvParams {
        out_channels,
        in_channels,
        kernel_h,
        kernel_w,
        weights,
        bias,
        ..
    } = p;
    out.push(ParamRef {
        name: format!("{name}.weight"),
        shape: vec![*out_channels, *in_channels, *kernel_h, *kernel_w],
        values: weights,
        trainable: true,
    });
    out.push(ParamRef {
        name: format!("{name}.bias"),
        shape: vec![*out_channels],
        values: bias,
        trainable: true,
    });
}

fn push_dense<'a>(out: &mut Vec<ParamRef<'a>>, name: &str, d: &'a mut Dense) {
    let Dense {
        in_features,
        out_features,
        weights,
        bias,
    } = d;
    out.push(ParamRef {
        name: format!("{name}.weight"),
        shape: vec![*out_features, *in_features],
        values: weights,
        trainable: true,
    });
    out.push(ParamRef {
        name: format!("{name}.bias"),
        shape: vec![*out_features],
        values: bias,
        trainable: true,
    });
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn add_conv(dst: &mut ConvParams, g: &ConvGrads) {
    add_into(&mut dst.weights, &g.weights);
    add_into(&mut dst.bias, &g.bias);
}

fn add_dense(dst: &mut Dense, g: &DenseGrads) {
    add_into(&mut dst.weights, &g.weights);
    add_into(&mut dst.bias, &g.bias);
}

#[derive(Debug, Clone)]
enum ContextCache {
    Irnn(IrnnBlockCache),
    /// Post-ReLU output of each conv.
    Convs(Vec<FeatureMap>),
    GlobalAverage,
    None,
}

/// Everything computed once per image before the per-ROI stage.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    input: FeatureMap,
    /// Post-ReLU backbone outputs.
    pub activations: Vec<FeatureMap>,
    pub context: Option<FeatureMap>,
    context_cache: ContextCache,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub classification: f64,
    pub regression: f64,
    pub segmentation: f64,
}

impl LossReport {
    pub fn add(&mut self, o: &LossReport) {
        self.total += o.total;
        self.classification += o.classification;
        self.regression += o.regression;
        self.segmentation += o.segmentation;
    }
}

fn backbone_names(n: usize) -> Result<Vec<String>> {
    if n == 0 || n > 5 {
        return Err(Error::Config("backbone must have 1..=5 layers".into()));
    }
    Ok((0..n).map(|i| format!("conv{}", i + 6 - n)).collect())
}

/// Scale giving a normalized source unit per-entry RMS: whole-blob norms
/// are shared by every entry, per-cell norms by the channels of one cell.
pub fn unit_rms_scale(mode: NormMode, channels: usize, cells: usize) -> f64 {
    match mode {
        NormMode::WholeBlob => ((channels * cells) as f64).sqrt(),
        NormMode::AcrossChannels => (channels as f64).sqrt(),
        NormMode::None => 1.0,
    }
}

impl IonModel {
    /// Builds the model from the experiment configuration. With
    /// `scale_init = measured` the normalization default is used until
    /// [`IonModel::calibrate_scales`] runs.
    pub fn new(cfg: &ExperimentConfig, rng: &mut Rng64) -> Result<Self> {
        cfg.validate()?;
        let layer_names = backbone_names(cfg.backbone_channels.len())?;
        let mut backbone = Vec::new();
        let mut cin = 3;
        let mut strides = Vec::new();
        let mut total_stride = 1;
        for (&c, &s) in cfg.backbone_channels.iter().zip(&cfg.backbone_strides) {
            // stands in for a pretrained network: He init keeps activations O(1)
            backbone.push(ConvParams::he(c, cin, 3, 3, s, 1, rng)?);
            cin = c;
            total_stride *= s;
            strides.push(total_stride);
        }
        let last = cin;
        let (context, ctx_channels) = match cfg.context {
            ContextKind::Irnn | ContextKind::IrnnTwoDirection => {
                let spec = IrnnBlockSpec {
                    in_channels: last,
                    hidden_units: cfg.irnn_hidden,
                    out_channels: cfg.context_channels,
                    layers: cfg.irnn_layers,
                    learned_recurrence: cfg.irnn_learned_recurrence,
                    first_step_bias: cfg.irnn_first_step_bias,
                    dropout_p: cfg.dropout,
                };
                let p = if cfg.context == ContextKind::Irnn {
                    IrnnBlockParams::new(&spec, rng)?
                } else {
                    IrnnBlockParams::two_direction(&spec, rng)?
                };
                (ContextParams::Irnn(p), cfg.context_channels)
            }
            ContextKind::Conv3x3 | ContextKind::Conv5x5 => {
                let k = if cfg.context == ContextKind::Conv3x3 { 3 } else { 5 };
                let a = ConvParams::xavier(cfg.context_channels, last, k, k, 1, k / 2, rng)?;
                let b = ConvParams::xavier(cfg.context_channels, cfg.context_channels, k, k, 1, k / 2, rng)?;
                (ContextParams::Convs(vec![a, b]), cfg.context_channels)
            }
            ContextKind::GlobalAverage => (ContextParams::GlobalAverage, last),
            ContextKind::None => (ContextParams::None, 0),
        };
        let mut sources = Vec::new();
        let mut skip_sources = Vec::new();
        let mut source_channels = Vec::new();
        for name in &cfg.skip_sources {
            let (r, stride, ch) = if name == "context" {
                if context == ContextParams::None {
                    return Err(Error::Config("skip source `context` needs a context operator".into()));
                }
                (SourceRef::Context, total_stride, ctx_channels)
            } else {
                let i = layer_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::UnknownLayer(name.clone()))?;
                (SourceRef::Backbone(i), strides[i], cfg.backbone_channels[i])
            };
            if sources.contains(&r) {
                return Err(Error::Config(format!("skip source `{name}` listed twice")));
            }
            sources.push(r);
            skip_sources.push(SkipSource {
                name: name.clone(),
                stride,
            });
            source_channels.push(ch);
        }
        let skip_config = SkipPoolConfig {
            sources: skip_sources,
            pooled_h: cfg.pooled_size,
            pooled_w: cfg.pooled_size,
            norm_mode: cfg.norm_mode,
            scale_mode: cfg.scale_mode,
            scale_init: match cfg.scale_init {
                ScaleInit::Value(v) => v,
                _ => cfg.norm_mode.default_scale(),
            },
            reduced_channels: cfg.reduced_channels,
        };
        let mut skip = SkipPoolParams::new(&skip_config, &source_channels, rng)?;
        if cfg.scale_init == ScaleInit::UnitRms {
            let cells = cfg.pooled_size * cfg.pooled_size;
            for (scales, &c) in skip.scales.iter_mut().zip(&source_channels) {
                let s = unit_rms_scale(cfg.norm_mode, c, cells);
                scales.iter_mut().for_each(|v| *v = s);
            }
        }
        let head = HeadParams::new(
            cfg.reduced_channels * cfg.pooled_size * cfg.pooled_size,
            cfg.fc_hidden,
            cfg.num_classes,
            cfg.dropout,
            rng,
        )?;
        let seg = if cfg.seg_loss {
            // on the context features, or the top backbone layer without one
            let ch = if context == ContextParams::None { last } else { ctx_channels };
            let mut p = SegHeadParams::new(ch, cfg.num_classes + 1, total_stride, rng)?;
            p.loss_weight = cfg.seg_loss_weight;
            Some(p)
        } else {
            None
        };
        Ok(Self {
            layer_names,
            backbone,
            context,
            skip_config,
            skip,
            head,
            seg,
            sources,
        })
    }

    /// Every parameter tensor in a fixed order.
    pub fn params_mut(&mut self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        let IonModel {
            layer_names,
            backbone,
            context,
            skip_config,
            skip,
            head,
            seg,
            ..
        } = self;
        for (name, p) in layer_names.iter().zip(backbone.iter_mut()) {
            push_conv(&mut out, name, p);
        }
        match context {
            ContextParams::Irnn(block) => {
                for (l, layer) in block.layers.iter_mut().enumerate() {
                    let base = format!("irnn{}", l + 1);
                    for (t, c) in layer.input_to_hidden.iter_mut().enumerate() {
                        push_conv(&mut out, &format!("{base}.input{t}"), c);
                    }
                    for (dir, dp) in layer.directions.iter_mut() {
                        let h = dp.hidden_units;
                        if let Recurrence::Learned(w) = &mut dp.recurrence {
                            out.push(ParamRef {
                                name: format!("{base}.{}.whh", dir.name()),
                                shape: vec![h, h],
                                values: w,
                                trainable: true,
                            });
                        }
                        if let Some(b) = &mut dp.first_step_bias {
                            out.push(ParamRef {
                                name: format!("{base}.{}.b0", dir.name()),
                                shape: vec![h],
                                values: b,
                                trainable: true,
                            });
                        }
                    }
                    push_conv(&mut out, &format!("{base}.reduce"), &mut layer.post_concat_reduce);
                }
            }
            ContextParams::Convs(convs) => {
                for (i, c) in convs.iter_mut().enumerate() {
                    push_conv(&mut out, &format!("ctxconv{}", i + 1), c);
                }
            }
            ContextParams::GlobalAverage | ContextParams::None => {}
        }
        let learned = skip_config.scale_mode == ScaleMode::LearnedPerChannel;
        for (src, s) in skip_config.sources.iter().zip(skip.scales.iter_mut()) {
            out.push(ParamRef {
                name: format!("skip.scale.{}", src.name),
                shape: vec![s.len()],
                values: s,
                trainable: learned && skip_config.norm_mode != NormMode::None,
            });
        }
        push_conv(&mut out, "skip.reduce", &mut skip.reduce);
        push_dense(&mut out, "fc6", &mut head.fc6);
        push_dense(&mut out, "fc7", &mut head.fc7);
        push_dense(&mut out, "cls", &mut head.cls_out);
        push_dense(&mut out, "bbox", &mut head.bbox_out);
        if let Some(s) = seg {
            push_conv(&mut out, "seg.score", &mut s.score);
            push_conv(&mut out, "seg.deconv", &mut s.deconv);
        }
        out
    }

    /// Layer names available for freezing.
    pub fn layers(&mut self) -> BTreeSet<String> {
        self.params_mut().iter().map(|p| p.layer().to_string()).collect()
    }

    /// Fails with [`Error::UnknownLayer`] on the first name no parameter
    /// belongs to.
    pub fn check_layer_names(&mut self, names: &[String]) -> Result<()> {
        let known = self.layers();
        match names.iter().find(|n| !known.contains(*n)) {
            Some(n) => Err(Error::UnknownLayer(n.clone())),
            None => Ok(()),
        }
    }

    /// Same structure with every parameter zeroed: the gradient buffer.
    pub fn zeros_like(&self) -> IonModel {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn num_parameters(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.values.len()).sum()
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for p in self.params_mut() {
            ck.push(p.name, p.shape, p.values.clone());
        }
        ck
    }

    /// Overwrites every parameter from `ck`; names and shapes must match.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != ck.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                ck.tensors.len(),
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let t = ck
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if t.shape != p.shape || t.values.len() != p.values.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    p.name, t.shape, p.shape
                )));
            }
            p.values.copy_from_slice(&t.values);
        }
        Ok(())
    }

    fn context_input<'a>(&self, acts: &'a [FeatureMap]) -> Result<&'a FeatureMap> {
        acts.last().ok_or_else(|| Error::Config("empty backbone".into()))
    }

    /// Backbone and context. `rng` enables dropout (training only).
    pub fn features(&self, image: &FeatureMap, rng: Option<&mut Rng64>) -> Result<ImageFeatures> {
        if image.channels() != 3 {
            return Err(crate::error::shape_err("features", "images must have 3 channels"));
        }
        let mut acts: Vec<FeatureMap> = Vec::with_capacity(self.backbone.len());
        for p in &self.backbone {
            let x = acts.last().unwrap_or(image);
            let z = conv2d_forward(x, p)?;
            acts.push(relu_map(&z));
        }
        let top = self.context_input(&acts)?;
        let (context, context_cache) = match &self.context {
            ContextParams::Irnn(block) => {
                let (y, c) = irnn_block_forward(top, block, rng)?;
                (Some(y), ContextCache::Irnn(c))
            }
            ContextParams::Convs(convs) => {
                let mut outs: Vec<FeatureMap> = Vec::with_capacity(convs.len());
                for c in convs {
                    let x = outs.last().unwrap_or(top);
                    outs.push(relu_map(&conv2d_forward(x, c)?));
                }
                (outs.last().cloned(), ContextCache::Convs(outs))
            }
            ContextParams::GlobalAverage => (Some(global_average_pool_unpool(top)), ContextCache::GlobalAverage),
            ContextParams::None => (None, ContextCache::None),
        };
        Ok(ImageFeatures {
            input: image.clone(),
            activations: acts,
            context,
            context_cache,
        })
    }

    fn source_maps<'a>(&self, f: &'a ImageFeatures) -> Vec<&'a FeatureMap> {
        self.sources
            .iter()
            .map(|s| match s {
                SourceRef::Backbone(i) => &f.activations[*i],
                SourceRef::Context => f.context.as_ref().expect("context present when referenced"),
            })
            .collect()
    }

    fn seg_input<'a>(&self, f: &'a ImageFeatures) -> &'a FeatureMap {
        f.context.as_ref().unwrap_or_else(|| f.activations.last().expect("non-empty backbone"))
    }

    /// Head outputs for each ROI, without dropout.
    pub fn roi_outputs(&self, f: &ImageFeatures, rois: &[RoiBox]) -> Result<Vec<HeadOutput>> {
        let srcs = self.source_maps(f);
        rois.iter()
            .map(|r| {
                let (desc, _) = skip_pool_roi(&srcs, r, &self.skip_config, &self.skip)?;
                Ok(head_forward(desc.values(), &self.head, None)?.0)
            })
            .collect()
    }

    /// Sets the normalization scale to the mean norm of pooled descriptors
    /// of the top backbone layer over the given scenes' proposals, so that
    /// every normalized source gets that layer's amplitude.
    pub fn calibrate_scales(&mut self, scenes: &[SyntheticScene]) -> Result<f64> {
        let mode = self.skip_config.norm_mode;
        if mode == NormMode::None {
            return Ok(1.0);
        }
        let top = self.backbone.len() - 1;
        let stride = self
            .skip_config
            .sources
            .iter()
            .zip(&self.sources)
            .find(|(_, r)| **r == SourceRef::Backbone(top))
            .map(|(s, _)| s.stride)
            .unwrap_or_else(|| self.skip_config.sources.last().map(|s| s.stride).unwrap_or(1));
        let mut descs = Vec::new();
        for sc in scenes {
            let f = self.features(&sc.image, None)?;
            for p in &sc.proposals {
                descs.push(
                    roi_max_pool(&f.activations[top], p, stride, self.skip_config.pooled_h, self.skip_config.pooled_w)?.values,
                );
            }
        }
        let s = measure_mean_descriptor_norm(&descs, mode)?;
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::NonFinite(format!("measured descriptor norm {s}")));
        }
        self.skip_config.scale_init = s;
        for v in self.skip.scales.iter_mut().flatten() {
            *v = s;
        }
        Ok(s)
    }

    /// Forward and backward for one image; gradients are added into
    /// `grads` (a [`IonModel::zeros_like`] buffer). The loss is the
    /// ROI-mean multitask loss plus the weighted segmentation loss.
    pub fn forward_backward(
        &self,
        scene: &SyntheticScene,
        rois: &[SampledRoi],
        rng: &mut Rng64,
        grads: &mut IonModel,
    ) -> Result<LossReport> {
        let f = self.features(&scene.image, Some(rng))?;
        let srcs = self.source_maps(&f);
        let mut outs = Vec::with_capacity(rois.len());
        let mut caches: Vec<(FeatureMap, SkipPoolCache, HeadCache)> = Vec::with_capacity(rois.len());
        for r in rois {
            let (desc, sc) = skip_pool_roi(&srcs, &r.bbox, &self.skip_config, &self.skip)?;
            let (o, hc) = head_forward(desc.values(), &self.head, Some(rng))?;
            outs.push(o);
            caches.push((desc, sc, hc));
        }
        let targets: Vec<RoiTarget> = rois.iter().map(|r| r.target).collect();
        let ml = multitask_loss(&outs, &targets)?;
        let mut report = LossReport {
            total: ml.total,
            classification: ml.classification,
            regression: ml.regression,
            segmentation: 0.0,
        };

        let mut g_src: Vec<FeatureMap> = srcs
            .iter()
            .map(|m| FeatureMap::zeros(m.channels(), m.height(), m.width()))
            .collect();
        let mut head_g = HeadGrads::zeros_for(&self.head);
        let mut skip_g = SkipPoolGrads::zeros_for(&self.skip);
        for (i, (desc, sc, hc)) in caches.iter().enumerate() {
            let gd = head_backward(&self.head, hc, &ml.grad_logits[i], &ml.grad_deltas[i], &mut head_g)?;
            let gd = FeatureMap::from_vec(desc.channels(), desc.height(), desc.width(), gd)?;
            skip_pool_roi_backward(&self.skip_config, &self.skip, sc, &gd, &mut g_src, &mut skip_g)?;
        }
        add_dense(&mut grads.head.fc6, &head_g.fc6);
        add_dense(&mut grads.head.fc7, &head_g.fc7);
        add_dense(&mut grads.head.cls_out, &head_g.cls_out);
        add_dense(&mut grads.head.bbox_out, &head_g.bbox_out);
        if self.skip_config.scale_mode == ScaleMode::LearnedPerChannel {
            for (d, s) in grads.skip.scales.iter_mut().zip(&skip_g.scales) {
                add_into(d, s);
            }
        }
        add_conv(&mut grads.skip.reduce, &skip_g.reduce);

        let mut g_acts: Vec<FeatureMap> = f
            .activations
            .iter()
            .map(|m| FeatureMap::zeros(m.channels(), m.height(), m.width()))
            .collect();
        let mut g_ctx = f.context.as_ref().map(|c| FeatureMap::zeros(c.channels(), c.height(), c.width()));
        for (r, g) in self.sources.iter().zip(g_src) {
            match r {
                SourceRef::Backbone(i) => g_acts[*i].add_assign(&g)?,
                SourceRef::Context => g_ctx.as_mut().expect("context gradient buffer").add_assign(&g)?,
            }
        }

        if let Some(seg) = &self.seg {
            let x = self.seg_input(&f);
            let (_, loss, cache) = seg_head_forward(x, seg, Some(&scene.class_map))?;
            let loss = loss.unwrap_or(0.0);
            report.segmentation = loss;
            report.total += loss;
            let (gx, sg) = seg_head_backward(x, seg, &cache, &scene.class_map)?;
            let gs = grads.seg.as_mut().expect("gradient buffer mirrors the model");
            add_conv(&mut gs.score, &sg.score);
            add_conv(&mut gs.deconv, &sg.deconv);
            match g_ctx.as_mut() {
                Some(g) => g.add_assign(&gx)?,
                None => g_acts.last_mut().expect("non-empty backbone").add_assign(&gx)?,
            }
        }
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {} on image {} (cls {}, reg {}, seg {})",
                report.total, scene.image_id, report.classification, report.regression, report.segmentation
            )));
        }

        let top = self.backbone.len() - 1;
        match (&self.context, &f.context_cache, g_ctx) {
            (ContextParams::Irnn(block), ContextCache::Irnn(cache), Some(g)) => {
                let (g_in, bg) = irnn_block_backward(block, cache, &g)?;
                g_acts[top].add_assign(&g_in)?;
                let ContextParams::Irnn(gblock) = &mut grads.context else {
                    unreachable!("gradient buffer mirrors the model")
                };
                for (gl, lg) in gblock.layers.iter_mut().zip(&bg.layers) {
                    for (c, g) in gl.input_to_hidden.iter_mut().zip(&lg.input_to_hidden) {
                        add_conv(c, g);
                    }
                    for ((_, dp), dg) in gl.directions.iter_mut().zip(&lg.directions) {
                        if let (Recurrence::Learned(w), Some(g)) = (&mut dp.recurrence, &dg.recurrence) {
                            add_into(w, g);
                        }
                        if let (Some(b), Some(g)) = (&mut dp.first_step_bias, &dg.first_step_bias) {
                            add_into(b, g);
                        }
                    }
                    add_conv(&mut gl.post_concat_reduce, &lg.post_concat_reduce);
                }
            }
            (ContextParams::Convs(convs), ContextCache::Convs(outs), Some(mut g)) => {
                let ContextParams::Convs(gconvs) = &mut grads.context else {
                    unreachable!("gradient buffer mirrors the model")
                };
                for j in (0..convs.len()).rev() {
                    relu_backward_inplace(outs[j].values(), g.values_mut());
                    let x = if j == 0 { &f.activations[top] } else { &outs[j - 1] };
                    let (gi, cg) = conv2d_backward(x, &convs[j], &g)?;
                    add_conv(&mut gconvs[j], &cg);
                    g = gi;
                }
                g_acts[top].add_assign(&g)?;
            }
            (ContextParams::GlobalAverage, _, Some(g)) => {
                g_acts[top].add_assign(&global_average_pool_unpool_backward(&g))?;
            }
            _ => {}
        }

        for i in (0..self.backbone.len()).rev() {
            let mut g = std::mem::replace(&mut g_acts[i], FeatureMap::zeros(0, 0, 0));
            relu_backward_inplace(f.activations[i].values(), g.values_mut());
            let x = if i == 0 { &f.input } else { &f.activations[i - 1] };
            let (gi, cg) = conv2d_backward(x, &self.backbone[i], &g)?;
            add_conv(&mut grads.backbone[i], &cg);
            if i > 0 {
                g_acts[i - 1].add_assign(&gi)?;
            }
        }
        Ok(report)
    }
}

/// Model-building RNG derived from the experiment seed.
pub fn init_rng(seed: u64) -> Rng64 {
    Rng64::seed_from_u64(seed ^ 0x1a2b_3c4d_5e6f_7081)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::data::{generate_shapes_dataset, ShapesConfig};
    use crate::train::sampler::{sample_rois, SamplerConfig};

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            backbone_channels: vec![3, 4, 4],
            context_channels: 3,
            irnn_hidden: 3,
            reduced_channels: 4,
            fc_hidden: 8,
            pooled_size: 2,
            seg_loss: true,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn names_unique_and_checkpoint_round_trip() {
        let mut m = IonModel::new(&small_cfg(), &mut init_rng(1)).unwrap();
        let names: Vec<String> = m.params_mut().into_iter().map(|p| p.name).collect();
        let set: BTreeSet<&String> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names.contains(&"irnn2.up.whh".to_string()));
        let ck = m.to_checkpoint();
        let mut m2 = IonModel::new(&small_cfg(), &mut init_rng(2)).unwrap();
        assert_ne!(m2, m);
        m2.load_checkpoint(&ck).unwrap();
        assert_eq!(m2, m);
    }

    #[test]
    fn unknown_layer_rejected() {
        let mut m = IonModel::new(&small_cfg(), &mut init_rng(1)).unwrap();
        assert!(m.check_layer_names(&["conv3".into(), "irnn1".into(), "fc6".into()]).is_ok());
        assert!(matches!(m.check_layer_names(&["conv9".into()]), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn every_context_kind_builds_and_runs() {
        let scenes = generate_shapes_dataset(0, 1, 0, &ShapesConfig::default());
        for kind in [
            ContextKind::Irnn,
            ContextKind::IrnnTwoDirection,
            ContextKind::Conv3x3,
            ContextKind::Conv5x5,
            ContextKind::GlobalAverage,
        ] {
            let cfg = ExperimentConfig {
                context: kind,
                ..small_cfg()
            };
            let m = IonModel::new(&cfg, &mut init_rng(3)).unwrap();
            let mut rng = Rng64::seed_from_u64(0);
            let rois = sample_rois(&scenes[0].proposals, &scenes[0].objects, &SamplerConfig::default(), &mut rng).unwrap();
            let mut g = m.zeros_like();
            let r = m.forward_backward(&scenes[0], &rois[..8], &mut rng, &mut g).unwrap();
            assert!(r.total.is_finite() && r.segmentation > 0.0, "{kind:?}");
        }
        let cfg = ExperimentConfig {
            context: ContextKind::None,
            ..small_cfg()
        };
        assert!(IonModel::new(&cfg, &mut init_rng(3)).is_err());
    }
}
