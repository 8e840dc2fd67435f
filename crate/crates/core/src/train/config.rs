//! Experiment configuration: flat `key = value` text, `#` comments, typed
//! parsing, unknown keys rejected.
//!
//! | key | type | default |
//! |-----|------|---------|
//! | `seed` | u64 | 7 |
//! | `num_classes` | count | 3 |
//! | `image_size` | count | 64 |
//! | `train_images` / `test_images` | count | 2000 / 200 |
//! | `backbone_channels` | list of counts (conv3,conv4,conv5) | 8,16,16 |
//! | `backbone_strides` | list of counts | 2,2,2 |
//! | `skip_sources` | list of backbone layers (`conv3`,`conv4`,`conv5`) and `context` | conv3,conv4,conv5,context |
//! | `context` | `irnn`,`irnn2dir`,`conv3x3`,`conv5x5`,`gap`,`none` | irnn |
//! | `context_channels` | count | 16 |
//! | `irnn_layers` | count (1-3) | 2 |
//! | `irnn_hidden` | count | 16 |
//! | `irnn_recurrence` | `learned`,`identity` | learned |
//! | `irnn_first_step_bias` | bool | false |
//! | `norm_mode` | `whole`,`channels`,`none` | whole |
//! | `scale_mode` | `learned`,`fixed` | learned |
//! | `scale_init` | `unit_rms`, `measured` or real | unit_rms |
//! | `pooled_size` | count | 3 |
//! | `reduced_channels` | count | 16 |
//! | `fc_hidden` | count | 64 |
//! | `dropout` | real | 0 |
//! | `seg_loss` | bool | false |
//! | `seg_loss_weight` | real | 1 |
//! | `images_per_update` | count | 4 |
//! | `rois_per_image` | count | 32 |
//! | `fg_fraction`, `fg_iou`, `bg_iou_lo`, `bg_iou_hi` | real | 0.25, 0.5, 0.1, 0.5 |
//! | `momentum` | real | 0.9 |
//! | `weight_decay` | real | 0.0005 |
//! | `clip_norm_single`, `clip_norm_accum` | real | 20, 80 |
//! | `clip_mode` | `accumulated`,`per_pass` | accumulated |
//! | `stages` | count | 2 |
//! | `stageN.iters` | count | 600, 300 |
//! | `stageN.lr_start`, `stageN.lr_end` | real | 5e-3/1e-4, 1e-3/1e-5 |
//! | `stageN.frozen` | list of layer names (may be empty) | (none), conv3 |
//! | `nms_iou`, `vote_iou` (`none` disables), `rounds`, `score_thresh`, `max_per_image` | | 0.3, 0.5, 2, 0.05, 100 |

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::postprocess::VotingConfig;
use crate::skip_pool::{NormMode, ScaleMode};

use super::schedule::LrSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextKind {
    Irnn,
    IrnnTwoDirection,
    Conv3x3,
    Conv5x5,
    GlobalAverage,
    None,
}

impl ContextKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "irnn" => Self::Irnn,
            "irnn2dir" => Self::IrnnTwoDirection,
            "conv3x3" => Self::Conv3x3,
            "conv5x5" => Self::Conv5x5,
            "gap" => Self::GlobalAverage,
            "none" => Self::None,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Irnn => "irnn",
            Self::IrnnTwoDirection => "irnn2dir",
            Self::Conv3x3 => "conv3x3",
            Self::Conv5x5 => "conv5x5",
            Self::GlobalAverage => "gap",
            Self::None => "none",
        }
    }
}

/// How normalized sources are scaled before fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleInit {
    /// Each normalized source gets unit per-entry RMS: the scale is the
    /// square root of the number of entries sharing one norm.
    UnitRms,
    /// The mean norm of the top backbone layer's pooled descriptor,
    /// measured on the first training images.
    Measured,
    Value(f64),
}

impl ScaleInit {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "unit_rms" => Some(Self::UnitRms),
            "measured" => Some(Self::Measured),
            _ => s.parse().ok().filter(|v: &f64| *v > 0.0 && v.is_finite()).map(Self::Value),
        }
    }

    pub fn name(self) -> String {
        match self {
            Self::UnitRms => "unit_rms".into(),
            Self::Measured => "measured".into(),
            Self::Value(v) => format!("{v:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    /// Clip the summed gradient of an update at `clip_norm_accum`.
    Accumulated,
    /// Clip each single-image gradient at `clip_norm_single` before summing.
    PerPass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub iters: usize,
    pub schedule: LrSchedule,
    pub frozen: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub image_size: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub skip_sources: Vec<String>,
    pub context: ContextKind,
    pub context_channels: usize,
    pub irnn_layers: usize,
    pub irnn_hidden: usize,
    pub irnn_learned_recurrence: bool,
    pub irnn_first_step_bias: bool,
    pub norm_mode: NormMode,
    pub scale_mode: ScaleMode,
    pub scale_init: ScaleInit,
    pub pooled_size: usize,
    pub reduced_channels: usize,
    pub fc_hidden: usize,
    pub dropout: f64,
    pub seg_loss: bool,
    pub seg_loss_weight: f64,
    pub images_per_update: usize,
    pub rois_per_image: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    pub bg_iou_lo: f64,
    pub bg_iou_hi: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm_single: f64,
    pub clip_norm_accum: f64,
    pub clip_mode: ClipMode,
    pub stages: Vec<Stage>,
    pub voting: VotingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_classes: 3,
            image_size: 64,
            train_images: 2000,
            test_images: 200,
            backbone_channels: vec![8, 16, 16],
            backbone_strides: vec![2, 2, 2],
            skip_sources: ["conv3", "conv4", "conv5", "context"].map(String::from).to_vec(),
            context: ContextKind::Irnn,
            context_channels: 16,
            irnn_layers: 2,
            irnn_hidden: 16,
            irnn_learned_recurrence: true,
            irnn_first_step_bias: false,
            norm_mode: NormMode::WholeBlob,
            scale_mode: ScaleMode::LearnedPerChannel,
            scale_init: ScaleInit::UnitRms,
            pooled_size: 3,
            reduced_channels: 16,
            fc_hidden: 64,
            dropout: 0.0,
            seg_loss: false,
            seg_loss_weight: 1.0,
            images_per_update: 4,
            rois_per_image: 32,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            bg_iou_lo: 0.1,
            bg_iou_hi: 0.5,
            momentum: 0.9,
            weight_decay: 0.0005,
            clip_norm_single: 20.0,
            clip_norm_accum: 80.0,
            clip_mode: ClipMode::Accumulated,
            stages: vec![
                Stage {
                    iters: 600,
                    schedule: LrSchedule::new(5e-3, 1e-4, 600),
                    frozen: vec![],
                },
                Stage {
                    iters: 300,
                    schedule: LrSchedule::new(1e-3, 1e-5, 300),
                    frozen: vec!["conv3".into()],
                },
            ],
            voting: VotingConfig::VOC,
        }
    }
}

fn parse_err(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("`{key}`: cannot parse `{value}` as {what}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<T> {
    v.parse().map_err(|_| parse_err(key, v, what))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(parse_err(key, v, "bool")),
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn counts(key: &str, v: &str) -> Result<Vec<usize>> {
    list(v).iter().map(|s| num(key, s, "count")).collect()
}

impl ExperimentConfig {
    /// Parses `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            kv.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let mut c = ExperimentConfig::default();
        let n_stages = match kv.remove("stages") {
            Some((_, v)) => num("stages", &v, "count")?,
            None => c.stages.len(),
        };
        c.stages.resize(
            n_stages,
            Stage {
                iters: 0,
                schedule: LrSchedule::new(1e-3, 1e-5, 0),
                frozen: vec![],
            },
        );
        for (key, (line, v)) in &kv {
            let v = v.as_str();
            let k = key.as_str();
            match k {
                "seed" => c.seed = num(k, v, "integer")?,
                "num_classes" => c.num_classes = num(k, v, "count")?,
                "image_size" => c.image_size = num(k, v, "count")?,
                "train_images" => c.train_images = num(k, v, "count")?,
                "test_images" => c.test_images = num(k, v, "count")?,
                "backbone_channels" => c.backbone_channels = counts(k, v)?,
                "backbone_strides" => c.backbone_strides = counts(k, v)?,
                "skip_sources" => c.skip_sources = list(v),
                "context" => c.context = ContextKind::parse(v).ok_or_else(|| parse_err(k, v, "context operator"))?,
                "context_channels" => c.context_channels = num(k, v, "count")?,
                "irnn_layers" => c.irnn_layers = num(k, v, "count")?,
                "irnn_hidden" => c.irnn_hidden = num(k, v, "count")?,
                "irnn_recurrence" => {
                    c.irnn_learned_recurrence = match v {
                        "learned" => true,
                        "identity" => false,
                        _ => return Err(parse_err(k, v, "`learned` or `identity`")),
                    }
                }
                "irnn_first_step_bias" => c.irnn_first_step_bias = boolean(k, v)?,
                "norm_mode" => {
                    c.norm_mode = match v {
                        "whole" => NormMode::WholeBlob,
                        "channels" => NormMode::AcrossChannels,
                        "none" => NormMode::None,
                        _ => return Err(parse_err(k, v, "`whole`, `channels` or `none`")),
                    }
                }
                "scale_mode" => {
                    c.scale_mode = match v {
                        "learned" => ScaleMode::LearnedPerChannel,
                        "fixed" => ScaleMode::Fixed,
                        _ => return Err(parse_err(k, v, "`learned` or `fixed`")),
                    }
                }
                "scale_init" => {
                    c.scale_init = ScaleInit::parse(v)
                        .ok_or_else(|| Error::Config(format!("{k}: expected unit_rms, measured or a positive real, got {v:?}")))?
                }
                "pooled_size" => c.pooled_size = num(k, v, "count")?,
                "reduced_channels" => c.reduced_channels = num(k, v, "count")?,
                "fc_hidden" => c.fc_hidden = num(k, v, "count")?,
                "dropout" => c.dropout = num(k, v, "real")?,
                "seg_loss" => c.seg_loss = boolean(k, v)?,
                "seg_loss_weight" => c.seg_loss_weight = num(k, v, "real")?,
                "images_per_update" => c.images_per_update = num(k, v, "count")?,
                "rois_per_image" => c.rois_per_image = num(k, v, "count")?,
                "fg_fraction" => c.fg_fraction = num(k, v, "real")?,
                "fg_iou" => c.fg_iou = num(k, v, "real")?,
                "bg_iou_lo" => c.bg_iou_lo = num(k, v, "real")?,
                "bg_iou_hi" => c.bg_iou_hi = num(k, v, "real")?,
                "momentum" => c.momentum = num(k, v, "real")?,
                "weight_decay" => c.weight_decay = num(k, v, "real")?,
                "clip_norm_single" => c.clip_norm_single = num(k, v, "real")?,
                "clip_norm_accum" => c.clip_norm_accum = num(k, v, "real")?,
                "clip_mode" => {
                    c.clip_mode = match v {
                        "accumulated" => ClipMode::Accumulated,
                        "per_pass" => ClipMode::PerPass,
                        _ => return Err(parse_err(k, v, "`accumulated` or `per_pass`")),
                    }
                }
                "nms_iou" => c.voting.nms_iou = num(k, v, "real")?,
                "vote_iou" => c.voting.vote_iou = if v == "none" { None } else { Some(num(k, v, "real")?) },
                "rounds" => c.voting.rounds = num(k, v, "count")?,
                "score_thresh" => c.voting.score_thresh = num(k, v, "real")?,
                "max_per_image" => c.voting.max_per_image = num(k, v, "count")?,
                _ => {
                    let stage_key = k
                        .strip_prefix("stage")
                        .and_then(|rest| rest.split_once('.'))
                        .and_then(|(n, field)| n.parse::<usize>().ok().map(|n| (n, field)));
                    match stage_key {
                        Some((n, field)) if n >= 1 && n <= c.stages.len() => {
                            let s = &mut c.stages[n - 1];
                            match field {
                                "iters" => s.iters = num(k, v, "count")?,
                                "lr_start" => s.schedule.lr_start = num(k, v, "real")?,
                                "lr_end" => s.schedule.lr_end = num(k, v, "real")?,
                                "frozen" => s.frozen = list(v),
                                _ => return Err(Error::Parse { line: *line, msg: format!("unknown key `{k}`") }),
                            }
                        }
                        _ => return Err(Error::Parse { line: *line, msg: format!("unknown key `{k}`") }),
                    }
                }
            }
        }
        for s in &mut c.stages {
            s.schedule.total_iters = s.iters;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1");
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.len() != self.backbone_strides.len() {
            return bad("backbone_channels and backbone_strides must be non-empty and equally long");
        }
        if self.backbone_strides.contains(&0) {
            return bad("backbone strides must be >= 1");
        }
        if self.skip_sources.is_empty() {
            return bad("skip_sources must not be empty");
        }
        // backbone layers are named conv(6-n) ..= conv5 for n layers
        let first = 6usize.saturating_sub(self.backbone_channels.len());
        for name in &self.skip_sources {
            let known = name == "context"
                || name.strip_prefix("conv").and_then(|k| k.parse::<usize>().ok()).is_some_and(|k| (first..=5).contains(&k));
            if !known {
                return Err(Error::Config(format!("unknown skip source `{name}`")));
            }
        }
        if !(1..=3).contains(&self.irnn_layers) {
            return bad("irnn_layers must be 1..=3");
        }
        if self.images_per_update == 0 || self.rois_per_image == 0 {
            return bad("images_per_update and rois_per_image must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return bad("fg_fraction must lie in [0, 1]");
        }
        for s in &self.stages {
            s.schedule.validate()?;
        }
        self.voting.validate()
    }

    /// ROIs contributing to one parameter update.
    pub fn rois_per_update(&self) -> usize {
        self.rois_per_image * self.images_per_update
    }

    /// Serializes back to the key/value format.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("image_size", self.image_size.to_string());
        kv("train_images", self.train_images.to_string());
        kv("test_images", self.test_images.to_string());
        kv("backbone_channels", join(&self.backbone_channels));
        kv("backbone_strides", join(&self.backbone_strides));
        kv("skip_sources", self.skip_sources.join(","));
        kv("context", self.context.name().into());
        kv("context_channels", self.context_channels.to_string());
        kv("irnn_layers", self.irnn_layers.to_string());
        kv("irnn_hidden", self.irnn_hidden.to_string());
        kv("irnn_recurrence", if self.irnn_learned_recurrence { "learned" } else { "identity" }.into());
        kv("irnn_first_step_bias", self.irnn_first_step_bias.to_string());
        kv(
            "norm_mode",
            match self.norm_mode {
                NormMode::WholeBlob => "whole",
                NormMode::AcrossChannels => "channels",
                NormMode::None => "none",
            }
            .into(),
        );
        kv(
            "scale_mode",
            match self.scale_mode {
                ScaleMode::LearnedPerChannel => "learned",
                ScaleMode::Fixed => "fixed",
            }
            .into(),
        );
        kv("scale_init", self.scale_init.name());
        kv("pooled_size", self.pooled_size.to_string());
        kv("reduced_channels", self.reduced_channels.to_string());
        kv("fc_hidden", self.fc_hidden.to_string());
        kv("dropout", format!("{:?}", self.dropout));
        kv("seg_loss", self.seg_loss.to_string());
        kv("seg_loss_weight", format!("{:?}", self.seg_loss_weight));
        kv("images_per_update", self.images_per_update.to_string());
        kv("rois_per_image", self.rois_per_image.to_string());
        kv("fg_fraction", format!("{:?}", self.fg_fraction));
        kv("fg_iou", format!("{:?}", self.fg_iou));
        kv("bg_iou_lo", format!("{:?}", self.bg_iou_lo));
        kv("bg_iou_hi", format!("{:?}", self.bg_iou_hi));
        kv("momentum", format!("{:?}", self.momentum));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("clip_norm_single", format!("{:?}", self.clip_norm_single));
        kv("clip_norm_accum", format!("{:?}", self.clip_norm_accum));
        kv(
            "clip_mode",
            match self.clip_mode {
                ClipMode::Accumulated => "accumulated",
                ClipMode::PerPass => "per_pass",
            }
            .into(),
        );
        kv("stages", self.stages.len().to_string());
        for (i, st) in self.stages.iter().enumerate() {
            let n = i + 1;
            kv(&format!("stage{n}.iters"), st.iters.to_string());
            kv(&format!("stage{n}.lr_start"), format!("{:?}", st.schedule.lr_start));
            kv(&format!("stage{n}.lr_end"), format!("{:?}", st.schedule.lr_end));
            kv(&format!("stage{n}.frozen"), st.frozen.join(","));
        }
        kv("nms_iou", format!("{:?}", self.voting.nms_iou));
        kv("vote_iou", self.voting.vote_iou.map(|v| format!("{v:?}")).unwrap_or_else(|| "none".into()));
        kv("rounds", self.voting.rounds.to_string());
        kv("score_thresh", format!("{:?}", self.voting.score_thresh));
        kv("max_per_image", self.voting.max_per_image.to_string());
        s
    }
}
