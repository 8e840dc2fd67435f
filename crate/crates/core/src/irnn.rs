//! Four-directional IRNN context block.
//!
//! Each direction sweeps the map row by row (right/left) or column by column
//! (down/up). The input-to-hidden transition is a 1x1 convolution applied
//! once and shared across directions; its output seeds every hidden state,
//! so a step is only `h <- max(W_hh h_prev + h, 0)`. With `W_hh` fixed to
//! the identity this becomes a ReLU accumulator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::act::{apply_mask, dropout_mask, relu, softmax_forward};
use crate::nn::conv::{conv2d_backward, conv2d_forward, deconv_backward, deconv_forward, ConvGrads, ConvParams};
use crate::nn::tensor::FeatureMap;
use crate::Rng64;

/// Sweep direction. Concatenation order in a block is always the order
/// listed here: right, left, down, up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Right,
    Left,
    Down,
    Up,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Right, Direction::Left, Direction::Down, Direction::Up];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Right => "right",
            Direction::Left => "left",
            Direction::Down => "down",
            Direction::Up => "up",
        }
    }

    /// (lanes, steps) for a `height x width` map.
    fn extent(self, height: usize, width: usize) -> (usize, usize) {
        match self {
            Direction::Right | Direction::Left => (height, width),
            Direction::Down | Direction::Up => (width, height),
        }
    }

    /// Spatial position of `step` along `lane`.
    #[inline]
    fn cell(self, lane: usize, step: usize, height: usize, width: usize) -> (usize, usize) {
        match self {
            Direction::Right => (lane, step),
            Direction::Left => (lane, width - 1 - step),
            Direction::Down => (step, lane),
            Direction::Up => (height - 1 - step, lane),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Recurrence {
    /// Learned `hidden x hidden` matrix, row-major.
    Learned(Vec<f64>),
    /// `W_hh` fixed to the identity and removed from the computation.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrnnDirectionParams {
    pub hidden_units: usize,
    pub recurrence: Recurrence,
    /// Hidden state before the first step; zero when absent.
    pub first_step_bias: Option<Vec<f64>>,
}

impl IrnnDirectionParams {
    /// Learned recurrence initialized to the identity matrix.
    pub fn learned(hidden_units: usize) -> Self {
        let mut w = vec![0.0; hidden_units * hidden_units];
        for c in 0..hidden_units {
            w[c * hidden_units + c] = 1.0;
        }
        Self {
            hidden_units,
            recurrence: Recurrence::Learned(w),
            first_step_bias: None,
        }
    }

    pub fn fixed_identity(hidden_units: usize) -> Self {
        Self {
            hidden_units,
            recurrence: Recurrence::Identity,
            first_step_bias: None,
        }
    }

    pub fn with_first_step_bias(mut self) -> Self {
        self.first_step_bias = Some(vec![0.0; self.hidden_units]);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 {
            return Err(Error::InvalidArgument("IRNN hidden_units must be > 0".into()));
        }
        if let Recurrence::Learned(w) = &self.recurrence {
            if w.len() != self.hidden_units * self.hidden_units {
                return Err(shape_err("irnn", format!("W_hh has {} entries", w.len())));
            }
        }
        if let Some(b) = &self.first_step_bias {
            if b.len() != self.hidden_units {
                return Err(shape_err("irnn", format!("b0 has {} entries", b.len())));
            }
        }
        Ok(())
    }

    fn initial_state(&self) -> Vec<f64> {
        self.first_step_bias
            .clone()
            .unwrap_or_else(|| vec![0.0; self.hidden_units])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionGrads {
    pub recurrence: Option<Vec<f64>>,
    pub first_step_bias: Option<Vec<f64>>,
}

fn check_seeded(seeded: &FeatureMap, params: &IrnnDirectionParams) -> Result<()> {
    params.validate()?;
    if seeded.channels() != params.hidden_units {
        return Err(shape_err(
            "irnn_direction",
            format!("{} channels for {} hidden units", seeded.channels(), params.hidden_units),
        ));
    }
    Ok(())
}

/// Runs one direction over all lanes at once: each step is a single
/// `hidden x hidden` by `hidden x lanes` product.
pub fn irnn_direction_forward(
    seeded_hidden: &FeatureMap,
    dir: Direction,
    params: &IrnnDirectionParams,
) -> Result<FeatureMap> {
    check_seeded(seeded_hidden, params)?;
    let (hid, h, w) = seeded_hidden.shape();
    let (lanes, steps) = dir.extent(h, w);
    let mut out = FeatureMap::zeros(hid, h, w);
    if lanes == 0 || steps == 0 {
        return Ok(out);
    }
    // prev[k * lanes + l]: hidden unit k of lane l
    let init = params.initial_state();
    let mut prev = vec![0.0; hid * lanes];
    for k in 0..hid {
        prev[k * lanes..(k + 1) * lanes].iter_mut().for_each(|v| *v = init[k]);
    }
    let mut next = vec![0.0; hid * lanes];
    for step in 0..steps {
        match &params.recurrence {
            Recurrence::Learned(wm) => {
                next.iter_mut().for_each(|v| *v = 0.0);
                for c in 0..hid {
                    let row = &mut next[c * lanes..(c + 1) * lanes];
                    for k in 0..hid {
                        let wck = wm[c * hid + k];
                        let src = &prev[k * lanes..(k + 1) * lanes];
                        for (r, s) in row.iter_mut().zip(src) {
                            *r += wck * s;
                        }
                    }
                }
            }
            Recurrence::Identity => next.copy_from_slice(&prev),
        }
        for c in 0..hid {
            for l in 0..lanes {
                let (y, x) = dir.cell(l, step, h, w);
                let v = relu(next[c * lanes + l] + seeded_hidden.get(c, y, x));
                next[c * lanes + l] = v;
                out.set(c, y, x, v);
            }
        }
        std::mem::swap(&mut prev, &mut next);
    }
    Ok(out)
}

/// Identity-fixed variant: `h <- max(h_prev + h, 0)`.
pub fn irnn_accumulator_forward(seeded_hidden: &FeatureMap, dir: Direction) -> Result<FeatureMap> {
    let params = IrnnDirectionParams::fixed_identity(seeded_hidden.channels());
    irnn_direction_forward(seeded_hidden, dir, &params)
}

/// Reverse-order recurrence. `output` is the forward result.
pub fn irnn_direction_backward(
    output: &FeatureMap,
    dir: Direction,
    params: &IrnnDirectionParams,
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, DirectionGrads)> {
    check_seeded(output, params)?;
    if !output.same_shape(grad_out) {
        return Err(shape_err("irnn_direction_backward", "grad_out shape differs from output"));
    }
    let (hid, h, w) = output.shape();
    let (lanes, steps) = dir.extent(h, w);
    let mut grad_seeded = FeatureMap::zeros(hid, h, w);
    let mut grad_w = match params.recurrence {
        Recurrence::Learned(_) => Some(vec![0.0; hid * hid]),
        Recurrence::Identity => None,
    };
    let mut grad_b0 = params.first_step_bias.as_ref().map(|_| vec![0.0; hid]);
    if lanes == 0 || steps == 0 {
        return Ok((grad_seeded, DirectionGrads { recurrence: grad_w, first_step_bias: grad_b0 }));
    }
    let init = params.initial_state();
    // carry[k * lanes + l]: dL/dh_prev flowing from later steps
    let mut carry = vec![0.0; hid * lanes];
    let mut dpre = vec![0.0; hid * lanes];
    for step in (0..steps).rev() {
        for c in 0..hid {
            for l in 0..lanes {
                let (y, x) = dir.cell(l, step, h, w);
                let g = grad_out.get(c, y, x) + carry[c * lanes + l];
                let d = if output.get(c, y, x) > 0.0 { g } else { 0.0 };
                dpre[c * lanes + l] = d;
                grad_seeded.set(c, y, x, d);
            }
        }
        if let (Some(gw), Recurrence::Learned(_)) = (grad_w.as_mut(), &params.recurrence) {
            for c in 0..hid {
                for k in 0..hid {
                    let mut acc = 0.0;
                    for l in 0..lanes {
                        let prev = if step == 0 {
                            init[k]
                        } else {
                            let (y, x) = dir.cell(l, step - 1, h, w);
                            output.get(k, y, x)
                        };
                        acc += dpre[c * lanes + l] * prev;
                    }
                    gw[c * hid + k] += acc;
                }
            }
        }
        match &params.recurrence {
            Recurrence::Learned(wm) => {
                carry.iter_mut().for_each(|v| *v = 0.0);
                for c in 0..hid {
                    for k in 0..hid {
                        let wck = wm[c * hid + k];
                        for l in 0..lanes {
                            carry[k * lanes + l] += wck * dpre[c * lanes + l];
                        }
                    }
                }
            }
            Recurrence::Identity => carry.copy_from_slice(&dpre),
        }
    }
    if let Some(gb) = grad_b0.as_mut() {
        for k in 0..hid {
            gb[k] = carry[k * lanes..(k + 1) * lanes].iter().sum();
        }
    }
    Ok((
        grad_seeded,
        DirectionGrads {
            recurrence: grad_w,
            first_step_bias: grad_b0,
        },
    ))
}

/// One stacked layer: 1x1 input-to-hidden, directional sweeps, concat,
/// dropout, 1x1 reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrnnLayerParams {
    /// A single entry is shared by every direction; otherwise one per direction.
    pub input_to_hidden: Vec<ConvParams>,
    pub directions: Vec<(Direction, IrnnDirectionParams)>,
    pub post_concat_reduce: ConvParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrnnBlockParams {
    pub layers: Vec<IrnnLayerParams>,
    pub dropout_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrnnBlockSpec {
    pub in_channels: usize,
    pub hidden_units: usize,
    pub out_channels: usize,
    pub layers: usize,
    pub learned_recurrence: bool,
    pub first_step_bias: bool,
    pub dropout_p: f64,
}

impl Default for IrnnBlockSpec {
    fn default() -> Self {
        Self {
            in_channels: 512,
            hidden_units: 512,
            out_channels: 512,
            layers: 2,
            learned_recurrence: true,
            first_step_bias: false,
            dropout_p: 0.25,
        }
    }
}

impl IrnnLayerParams {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        hidden_units: usize,
        out_channels: usize,
        dirs: &[Direction],
        learned: bool,
        first_step_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let directions = dirs
            .iter()
            .map(|&d| {
                let p = if learned {
                    IrnnDirectionParams::learned(hidden_units)
                } else {
                    IrnnDirectionParams::fixed_identity(hidden_units)
                };
                (d, if first_step_bias { p.with_first_step_bias() } else { p })
            })
            .collect::<Vec<_>>();
        Ok(Self {
            input_to_hidden: vec![ConvParams::xavier(hidden_units, in_channels, 1, 1, 1, 0, rng)?],
            post_concat_reduce: ConvParams::xavier(out_channels, hidden_units * dirs.len(), 1, 1, 1, 0, rng)?,
            directions,
        })
    }

    pub fn hidden_units(&self) -> usize {
        self.directions.first().map(|d| d.1.hidden_units).unwrap_or(0)
    }

    pub fn concat_channels(&self) -> usize {
        self.directions.iter().map(|d| d.1.hidden_units).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.directions.is_empty() {
            return Err(Error::InvalidArgument("IRNN layer without directions".into()));
        }
        let n = self.input_to_hidden.len();
        if n != 1 && n != self.directions.len() {
            return Err(Error::InvalidArgument(format!(
                "{n} input-to-hidden transitions for {} directions",
                self.directions.len()
            )));
        }
        for (i, t) in self.input_to_hidden.iter().enumerate() {
            if t.kernel_h != 1 || t.kernel_w != 1 || t.stride != 1 || t.pad != 0 {
                return Err(Error::InvalidArgument("input-to-hidden must be a 1x1 stride-1 conv".into()));
            }
            let hid = if n == 1 {
                self.hidden_units()
            } else {
                self.directions[i].1.hidden_units
            };
            if t.out_channels != hid {
                return Err(shape_err("irnn_layer", "input-to-hidden width differs from hidden units"));
            }
        }
        if n == 1 && self.directions.iter().any(|d| d.1.hidden_units != self.hidden_units()) {
            return Err(shape_err("irnn_layer", "shared transition requires equal hidden units"));
        }
        if self.post_concat_reduce.in_channels != self.concat_channels() {
            return Err(shape_err(
                "irnn_layer",
                format!(
                    "reduce expects {} channels, concat has {}",
                    self.post_concat_reduce.in_channels,
                    self.concat_channels()
                ),
            ));
        }
        Ok(())
    }
}

impl IrnnBlockParams {
    /// Stacked four-direction block with identity-initialized recurrences.
    pub fn new<R: Rng + ?Sized>(spec: &IrnnBlockSpec, rng: &mut R) -> Result<Self> {
        let layers = (0..spec.layers)
            .map(|i| {
                let cin = if i == 0 { spec.in_channels } else { spec.out_channels };
                IrnnLayerParams::new(
                    cin,
                    spec.hidden_units,
                    spec.out_channels,
                    &Direction::ALL,
                    spec.learned_recurrence,
                    spec.first_step_bias,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            dropout_p: spec.dropout_p,
        })
    }

    /// Left-right sweeps in the first layer, up-down in the second.
    pub fn two_direction<R: Rng + ?Sized>(spec: &IrnnBlockSpec, rng: &mut R) -> Result<Self> {
        let l1 = IrnnLayerParams::new(
            spec.in_channels,
            spec.hidden_units,
            spec.out_channels,
            &[Direction::Right, Direction::Left],
            spec.learned_recurrence,
            spec.first_step_bias,
            rng,
        )?;
        let l2 = IrnnLayerParams::new(
            spec.out_channels,
            spec.hidden_units,
            spec.out_channels,
            &[Direction::Down, Direction::Up],
            spec.learned_recurrence,
            spec.first_step_bias,
            rng,
        )?;
        Ok(Self {
            layers: vec![l1, l2],
            dropout_p: spec.dropout_p,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.post_concat_reduce.out_channels).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct IrnnLayerCache {
    input: FeatureMap,
    /// Seeded hidden maps, one per transition.
    seeded: Vec<FeatureMap>,
    /// Concat of the directional outputs, before dropout.
    concat: FeatureMap,
    dropout_mask: Option<Vec<f64>>,
    dropped: FeatureMap,
    pub output: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct IrnnBlockCache {
    pub layers: Vec<IrnnLayerCache>,
}

impl IrnnBlockCache {
    /// Concatenated directional outputs of layer `i` (before dropout).
    pub fn concat(&self, i: usize) -> &FeatureMap {
        &self.layers[i].concat
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrnnLayerGrads {
    pub input_to_hidden: Vec<ConvGrads>,
    pub directions: Vec<DirectionGrads>,
    pub post_concat_reduce: ConvGrads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrnnBlockGrads {
    pub layers: Vec<IrnnLayerGrads>,
}

fn layer_forward(
    x: &FeatureMap,
    layer: &IrnnLayerParams,
    dropout_p: f64,
    rng: Option<&mut Rng64>,
) -> Result<IrnnLayerCache> {
    layer.validate()?;
    let seeded = layer
        .input_to_hidden
        .iter()
        .map(|t| conv2d_forward(x, t))
        .collect::<Result<Vec<_>>>()?;
    let outs = layer
        .directions
        .iter()
        .enumerate()
        .map(|(i, (dir, p))| {
            let s = if seeded.len() == 1 { &seeded[0] } else { &seeded[i] };
            irnn_direction_forward(s, *dir, p)
        })
        .collect::<Result<Vec<_>>>()?;
    let concat = FeatureMap::concat_channels(&outs.iter().collect::<Vec<_>>())?;
    let mut dropped = concat.clone();
    let dropout_mask = match rng {
        Some(rng) if dropout_p > 0.0 => {
            let m = dropout_mask(dropped.len(), dropout_p, rng);
            apply_mask(dropped.values_mut(), &m);
            Some(m)
        }
        _ => None,
    };
    let output = conv2d_forward(&dropped, &layer.post_concat_reduce)?;
    Ok(IrnnLayerCache {
        input: x.clone(),
        seeded,
        concat,
        dropout_mask,
        dropped,
        output,
    })
}

/// Full stacked block. Dropout is applied only when `rng` is given
/// (training); spatial dims are preserved throughout.
pub fn irnn_block_forward(
    features: &FeatureMap,
    params: &IrnnBlockParams,
    mut rng: Option<&mut Rng64>,
) -> Result<(FeatureMap, IrnnBlockCache)> {
    let mut caches = Vec::with_capacity(params.layers.len());
    let mut x = features.clone();
    for layer in &params.layers {
        let cache = layer_forward(&x, layer, params.dropout_p, rng.as_deref_mut())?;
        x = cache.output.clone();
        caches.push(cache);
    }
    Ok((x, IrnnBlockCache { layers: caches }))
}

/// The stacked block with only the sweeps configured in `params`; the
/// left-right-then-up-down arrangement comes from
/// [`IrnnBlockParams::two_direction`].
pub fn variant_two_direction_block(features: &FeatureMap, params: &IrnnBlockParams) -> Result<FeatureMap> {
    Ok(irnn_block_forward(features, params, None)?.0)
}

pub fn irnn_block_backward(
    params: &IrnnBlockParams,
    cache: &IrnnBlockCache,
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, IrnnBlockGrads)> {
    let mut g = grad_out.clone();
    let mut grads = Vec::with_capacity(params.layers.len());
    for (layer, lc) in params.layers.iter().zip(&cache.layers).rev() {
        let (mut g_dropped, g_reduce) = conv2d_backward(&lc.dropped, &layer.post_concat_reduce, &g)?;
        if let Some(m) = &lc.dropout_mask {
            apply_mask(g_dropped.values_mut(), m);
        }
        let sizes: Vec<usize> = layer.directions.iter().map(|d| d.1.hidden_units).collect();
        let dir_outs = lc.concat.split_channels(&sizes)?;
        let dir_grads = g_dropped.split_channels(&sizes)?;
        let mut seeded_grads: Vec<FeatureMap> = lc
            .seeded
            .iter()
            .map(|s| FeatureMap::zeros(s.channels(), s.height(), s.width()))
            .collect();
        let mut dgrads = Vec::with_capacity(layer.directions.len());
        for (i, (dir, p)) in layer.directions.iter().enumerate() {
            let (gs, dg) = irnn_direction_backward(&dir_outs[i], *dir, p, &dir_grads[i])?;
            let slot = if seeded_grads.len() == 1 { 0 } else { i };
            seeded_grads[slot].add_assign(&gs)?;
            dgrads.push(dg);
        }
        let mut g_in = FeatureMap::zeros(lc.input.channels(), lc.input.height(), lc.input.width());
        let mut t_grads = Vec::with_capacity(layer.input_to_hidden.len());
        for (t, gs) in layer.input_to_hidden.iter().zip(&seeded_grads) {
            let (gi, gt) = conv2d_backward(&lc.input, t, gs)?;
            g_in.add_assign(&gi)?;
            t_grads.push(gt);
        }
        grads.push(IrnnLayerGrads {
            input_to_hidden: t_grads,
            directions: dgrads,
            post_concat_reduce: g_reduce,
        });
        g = g_in;
    }
    grads.reverse();
    Ok((g, IrnnBlockGrads { layers: grads }))
}

/// Label value excluded from the segmentation loss.
pub const IGNORE_LABEL: usize = usize::MAX;

/// Per-pixel class labels, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

/// Segmentation regularizer: 1x1 class scoring, learned upsampling, and a
/// weighted per-pixel softmax loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegHeadParams {
    pub score: ConvParams,
    pub deconv: ConvParams,
    pub num_classes: usize,
    pub loss_weight: f64,
}

impl SegHeadParams {
    /// `upsample` is the stride of the context features relative to the
    /// image; the deconvolution kernel is twice that, bilinear-initialized.
    pub fn new<R: Rng + ?Sized>(in_channels: usize, num_classes: usize, upsample: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            score: ConvParams::xavier(num_classes, in_channels, 1, 1, 1, 0, rng)?,
            deconv: ConvParams::bilinear_upsample(num_classes, upsample),
            num_classes,
            loss_weight: 1.0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SegHeadCache {
    scores_low: FeatureMap,
    pub probs: FeatureMap,
    target: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegHeadGrads {
    pub score: ConvGrads,
    pub deconv: ConvGrads,
}

/// Returns upsampled per-pixel logits and, with labels, the weighted mean
/// cross-entropy over non-ignored pixels.
pub fn seg_head_forward(
    context: &FeatureMap,
    params: &SegHeadParams,
    labels: Option<&ClassMap>,
) -> Result<(FeatureMap, Option<f64>, SegHeadCache)> {
    let target = match labels {
        Some(l) => (l.height, l.width),
        None => (context.height() * params.deconv.stride, context.width() * params.deconv.stride),
    };
    let scores_low = conv2d_forward(context, &params.score)?;
    let logits = deconv_forward(&scores_low, &params.deconv, target)?;
    let k = params.num_classes;
    let (th, tw) = target;
    let mut probs = FeatureMap::zeros(k, th, tw);
    let mut pix = vec![0.0; k];
    for y in 0..th {
        for x in 0..tw {
            for (c, p) in pix.iter_mut().enumerate() {
                *p = logits.get(c, y, x);
            }
            let sm = softmax_forward(&pix)?;
            for (c, p) in sm.into_iter().enumerate() {
                probs.set(c, y, x, p);
            }
        }
    }
    let loss = match labels {
        None => None,
        Some(l) => {
            if l.labels.len() != th * tw {
                return Err(shape_err("seg_head_forward", "label map size mismatch"));
            }
            let mut total = 0.0;
            let mut count = 0usize;
            for (i, &lab) in l.labels.iter().enumerate() {
                if lab == IGNORE_LABEL {
                    continue;
                }
                if lab >= k {
                    return Err(Error::LabelOutOfRange { label: lab, classes: k });
                }
                total += -probs.get(lab, i / tw, i % tw).max(f64::MIN_POSITIVE).ln();
                count += 1;
            }
            Some(if count == 0 || params.loss_weight == 0.0 {
                0.0
            } else {
                params.loss_weight * total / count as f64
            })
        }
    };
    Ok((logits, loss, SegHeadCache { scores_low, probs, target }))
}

pub fn seg_head_backward(
    context: &FeatureMap,
    params: &SegHeadParams,
    cache: &SegHeadCache,
    labels: &ClassMap,
) -> Result<(FeatureMap, SegHeadGrads)> {
    let k = params.num_classes;
    let (th, tw) = cache.target;
    let count = labels.labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut g_logits = FeatureMap::zeros(k, th, tw);
    if count > 0 && params.loss_weight != 0.0 {
        let scale = params.loss_weight / count as f64;
        for (i, &lab) in labels.labels.iter().enumerate() {
            if lab == IGNORE_LABEL {
                continue;
            }
            let (y, x) = (i / tw, i % tw);
            for c in 0..k {
                let t = if c == lab { 1.0 } else { 0.0 };
                g_logits.set(c, y, x, scale * (cache.probs.get(c, y, x) - t));
            }
        }
    }
    let (g_low, g_deconv) = deconv_backward(&cache.scores_low, &params.deconv, cache.target, &g_logits)?;
    let (g_ctx, g_score) = conv2d_backward(context, &params.score, &g_low)?;
    Ok((
        g_ctx,
        SegHeadGrads {
            score: g_score,
            deconv: g_deconv,
        },
    ))
}
