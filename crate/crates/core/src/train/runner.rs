//! Momentum SGD with gradient accumulation, global-norm clipping, staged
//! freezing, and the detection/evaluation driver.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{coco_map, EvalResult, GroundTruthObject};
use crate::postprocess::{postprocess, two_round_raw, Detection, VotingConfig};
use crate::Rng64;

use super::config::{ClipMode, ExperimentConfig, ScaleInit};
use super::data::{generate_shapes_dataset, ShapesConfig, SyntheticScene};
use super::model::{init_rng, IonModel, LossReport};
use super::sampler::{sample_rois, SampledRoi, SamplerConfig};
use super::schedule::{clip_gradient, lr_at};

/// Caffe-style momentum SGD: `v <- momentum * v + lr * (g + wd * w)`,
/// `w <- w - v`. Weight decay applies to tensors named `*.weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(model: &mut IonModel, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model.params_mut().iter().map(|p| vec![0.0; p.values.len()]).collect(),
        }
    }

    /// Updates every trainable, non-frozen tensor of `model` from the
    /// matching tensor of `grads`.
    pub fn step(&mut self, model: &mut IonModel, grads: &mut IonModel, lr: f64, frozen: &BTreeSet<String>) -> Result<()> {
        let params = model.params_mut();
        let gs = grads.params_mut();
        if params.len() != gs.len() || params.len() != self.velocity.len() {
            return Err(Error::InvalidArgument("gradient buffer does not match the model".into()));
        }
        for ((p, g), v) in params.into_iter().zip(gs).zip(self.velocity.iter_mut()) {
            if !p.trainable || frozen.contains(p.layer()) {
                continue;
            }
            let wd = if p.name.ends_with(".weight") { self.weight_decay } else { 0.0 };
            for ((w, &gi), vi) in p.values.iter_mut().zip(g.values.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + lr * (gi + wd * *w);
                *w -= *vi;
            }
        }
        Ok(())
    }
}

/// Global L2 norm of the gradient entries that would be applied.
pub fn gradient_norm(grads: &mut IonModel, frozen: &BTreeSet<String>) -> f64 {
    grads
        .params_mut()
        .iter()
        .filter(|p| p.trainable && !frozen.contains(p.layer()))
        .flat_map(|p| p.values.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Clips the concatenation of all applied gradient entries as one vector;
/// returns `(norm before, factor applied)`.
pub fn clip_model_gradient(grads: &mut IonModel, threshold: f64, frozen: &BTreeSet<String>) -> (f64, f64) {
    let mut params: Vec<_> = grads
        .params_mut()
        .into_iter()
        .filter(|p| p.trainable && !frozen.contains(p.layer()))
        .collect();
    let mut flat: Vec<f64> = params.iter().flat_map(|p| p.values.iter().copied()).collect();
    let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    let factor = clip_gradient(&mut flat, threshold);
    if factor != 1.0 {
        let mut it = flat.into_iter();
        for p in params.iter_mut() {
            for v in p.values.iter_mut() {
                *v = it.next().expect("same length");
            }
        }
    }
    (norm, factor)
}

pub fn sampler_config(cfg: &ExperimentConfig) -> SamplerConfig {
    SamplerConfig {
        rois_per_image: cfg.rois_per_image,
        fg_fraction: cfg.fg_fraction,
        fg_iou: cfg.fg_iou,
        bg_iou_lo: cfg.bg_iou_lo,
        bg_iou_hi: cfg.bg_iou_hi,
    }
}

/// Adds every gradient entry of `g` into `total`.
fn add_gradients(total: &mut IonModel, g: &mut IonModel) {
    for (a, b) in total.params_mut().into_iter().zip(g.params_mut()) {
        for (x, y) in a.values.iter_mut().zip(b.values.iter()) {
            *x += y;
        }
    }
}

/// Summed gradients of several single-image passes, before clipping. Each
/// pass fills its own buffer which is then added whole, so the result is
/// exactly the elementwise sum of the single-image gradients.
pub fn accumulate_gradients(
    model: &IonModel,
    batch: &[(&SyntheticScene, Vec<SampledRoi>)],
    rng: &mut Rng64,
) -> Result<(IonModel, LossReport)> {
    let mut grads = model.zeros_like();
    let mut loss = LossReport::default();
    for (scene, rois) in batch {
        let mut g1 = model.zeros_like();
        loss.add(&model.forward_backward(scene, rois, rng, &mut g1)?);
        add_gradients(&mut grads, &mut g1);
    }
    Ok((grads, loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Losses summed over the images of the update.
    pub loss: f64,
    pub classification: f64,
    pub regression: f64,
    pub segmentation: f64,
    /// Norm of the accumulated gradient before clipping.
    pub grad_norm: f64,
    pub clip_factor: f64,
}

/// One parameter update from `scenes.len() == images_per_update` images:
/// per-image forward/backward, summed gradients, clipping, momentum SGD.
#[allow(clippy::too_many_arguments)]
pub fn train_step_accumulating(
    model: &mut IonModel,
    optimizer: &mut Optimizer,
    scenes: &[&SyntheticScene],
    cfg: &ExperimentConfig,
    lr: f64,
    frozen: &BTreeSet<String>,
    rng: &mut Rng64,
) -> Result<StepReport> {
    if scenes.len() != cfg.images_per_update {
        return Err(Error::InvalidArgument(format!(
            "{} scenes for images_per_update = {}",
            scenes.len(),
            cfg.images_per_update
        )));
    }
    let sc = sampler_config(cfg);
    let mut grads = model.zeros_like();
    let mut loss = LossReport::default();
    for scene in scenes {
        let rois = sample_rois(&scene.proposals, &scene.objects, &sc, rng)?;
        let mut g1 = model.zeros_like();
        loss.add(&model.forward_backward(scene, &rois, rng, &mut g1)?);
        if cfg.clip_mode == ClipMode::PerPass {
            clip_model_gradient(&mut g1, cfg.clip_norm_single, frozen);
        }
        add_gradients(&mut grads, &mut g1);
    }
    let threshold = match cfg.clip_mode {
        ClipMode::Accumulated => cfg.clip_norm_accum,
        ClipMode::PerPass => f64::INFINITY,
    };
    let (grad_norm, clip_factor) = clip_model_gradient(&mut grads, threshold, frozen);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {grad_norm}")));
    }
    optimizer.step(model, &mut grads, lr, frozen)?;
    Ok(StepReport {
        loss: loss.total,
        classification: loss.classification,
        regression: loss.regression,
        segmentation: loss.segmentation,
        grad_norm,
        clip_factor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub stage: usize,
    pub iter: usize,
    pub lr: f64,
    pub step: StepReport,
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("stage,iter,lr,loss,classification,regression,segmentation,grad_norm,clip_factor\n");
    for p in curve {
        writeln!(
            s,
            "{},{},{:e},{},{},{},{},{},{}",
            p.stage,
            p.iter,
            p.lr,
            p.step.loss,
            p.step.classification,
            p.step.regression,
            p.step.segmentation,
            p.step.grad_norm,
            p.step.clip_factor
        )
        .expect("writing to a String");
    }
    s
}

/// Visits training images in a fresh random order each epoch.
struct DataOrder {
    order: Vec<usize>,
    pos: usize,
}

impl DataOrder {
    fn next(&mut self, rng: &mut Rng64) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Runs every stage in order with its own schedule and frozen layers. The
/// seed fixes the image order, the ROI samples and dropout, so identical
/// configurations give bitwise-identical parameters.
pub fn run_staged_training(
    model: &mut IonModel,
    train: &[SyntheticScene],
    cfg: &ExperimentConfig,
) -> Result<Vec<CurvePoint>> {
    for st in &cfg.stages {
        model.check_layer_names(&st.frozen)?;
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = Rng64::seed_from_u64(cfg.seed);
    let mut order = DataOrder {
        order: (0..train.len()).collect(),
        pos: train.len(),
    };
    let mut optimizer = Optimizer::new(model, cfg.momentum, cfg.weight_decay);
    let mut curve = Vec::new();
    for (si, st) in cfg.stages.iter().enumerate() {
        let frozen: BTreeSet<String> = st.frozen.iter().cloned().collect();
        for it in 0..st.iters {
            let lr = lr_at(&st.schedule, it)?;
            let idx: Vec<usize> = (0..cfg.images_per_update).map(|_| order.next(&mut rng)).collect();
            let scenes: Vec<&SyntheticScene> = idx.iter().map(|&i| &train[i]).collect();
            let step = train_step_accumulating(model, &mut optimizer, &scenes, cfg, lr, &frozen, &mut rng)?;
            curve.push(CurvePoint {
                stage: si + 1,
                iter: it,
                lr,
                step,
            });
        }
    }
    Ok(curve)
}

pub fn shapes_config(cfg: &ExperimentConfig) -> ShapesConfig {
    ShapesConfig {
        image_size: cfg.image_size,
        num_classes: cfg.num_classes,
        ..ShapesConfig::default()
    }
}

/// Offset separating test image ids from training ids.
pub const TEST_ID_OFFSET: u64 = 1_000_000;

/// Training and test sets of the experiment; both depend only on the seed
/// and the data-shape keys, so every model variant sees the same images.
pub fn datasets(cfg: &ExperimentConfig) -> (Vec<SyntheticScene>, Vec<SyntheticScene>) {
    let sc = shapes_config(cfg);
    let train = generate_shapes_dataset(cfg.seed, cfg.train_images, 0, &sc);
    let test = generate_shapes_dataset(cfg.seed.wrapping_add(1), cfg.test_images, TEST_ID_OFFSET, &sc);
    (train, test)
}

/// Number of training images used to measure the normalization scale.
pub const CALIBRATION_IMAGES: usize = 50;

/// Initializes the model; with `scale_init = measured` the scale is
/// measured on the first training images.
pub fn build_model(cfg: &ExperimentConfig, train: &[SyntheticScene]) -> Result<IonModel> {
    let mut model = IonModel::new(cfg, &mut init_rng(cfg.seed))?;
    if cfg.scale_init == ScaleInit::Measured {
        model.calibrate_scales(&train[..train.len().min(CALIBRATION_IMAGES)])?;
    }
    Ok(model)
}

/// Unfiltered detections of one image (all rounds).
pub fn raw_detections(model: &IonModel, scene: &SyntheticScene, rounds: usize) -> Result<Vec<Detection>> {
    let f = model.features(&scene.image, None)?;
    let (h, w) = (scene.image.height() as f64, scene.image.width() as f64);
    two_round_raw(scene.image_id, &scene.proposals, w, h, rounds, |rois| model.roi_outputs(&f, rois))
}

pub fn detect(model: &IonModel, scenes: &[SyntheticScene], voting: &VotingConfig) -> Result<Vec<Detection>> {
    voting.validate()?;
    let mut out = Vec::new();
    for s in scenes {
        out.extend(postprocess(&raw_detections(model, s, voting.rounds)?, voting));
    }
    Ok(out)
}

pub fn ground_truth(scenes: &[SyntheticScene]) -> Vec<GroundTruthObject> {
    scenes.iter().flat_map(|s| s.objects.iter().copied()).collect()
}

pub fn evaluate_model(model: &IonModel, scenes: &[SyntheticScene], voting: &VotingConfig) -> Result<EvalResult> {
    Ok(coco_map(&detect(model, scenes, voting)?, &ground_truth(scenes)))
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub model: IonModel,
    pub curve: Vec<CurvePoint>,
    pub eval: EvalResult,
}

/// Data generation, initialization, staged training and test evaluation.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (train, test) = datasets(cfg);
    let mut model = build_model(cfg, &train)?;
    let curve = run_staged_training(&mut model, &train, cfg)?;
    let eval = evaluate_model(&model, &test, &cfg.voting)?;
    Ok(ExperimentOutcome { model, curve, eval })
}
