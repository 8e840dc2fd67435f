//! Empirical receptive fields by perturbation: add a unit bump to the center
//! input cell and record which output cells change. Weights and inputs are
//! drawn positive so no ReLU can mask a dependency.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irnn::{irnn_block_forward, IrnnBlockParams, IrnnBlockSpec, IrnnLayerParams, Recurrence};
use crate::nn::{conv2d_forward, global_average_pool_unpool, ConvParams, FeatureMap};
use crate::Rng64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeOperator {
    /// Two stacked 3x3 convolutions.
    Conv3x3x2,
    /// Two stacked 5x5 convolutions.
    Conv5x5x2,
    /// Global average pooling broadcast back to every cell.
    GlobalAverage,
    /// Two stacked four-direction IRNN layers.
    Irnn,
    /// First layer of the two-direction (left-right) IRNN variant.
    IrnnTwoDirection,
}

impl ProbeOperator {
    pub const ALL: [ProbeOperator; 5] = [
        ProbeOperator::Conv3x3x2,
        ProbeOperator::Conv5x5x2,
        ProbeOperator::GlobalAverage,
        ProbeOperator::Irnn,
        ProbeOperator::IrnnTwoDirection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeOperator::Conv3x3x2 => "conv3x3x2",
            ProbeOperator::Conv5x5x2 => "conv5x5x2",
            ProbeOperator::GlobalAverage => "gap",
            ProbeOperator::Irnn => "irnn",
            ProbeOperator::IrnnTwoDirection => "irnn2dir",
        }
    }
}

impl fmt::Display for ProbeOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown operator {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfieldReport {
    pub operator: String,
    pub height: usize,
    pub width: usize,
    /// Inclusive bounding box `[y0, x0, y1, x1]` of changed output cells.
    pub window: [usize; 4],
    pub window_h: usize,
    pub window_w: usize,
    pub changed_cells: usize,
    pub full_image: bool,
    /// Whether the output change differs between changed cells.
    pub spatially_varying: bool,
}

impl RfieldReport {
    pub fn to_text(&self) -> String {
        format!(
            "operator={} grid={}x{} window={}x{} rows={}..={} cols={}..={} changed={} full_image={} spatially_varying={}\n",
            self.operator,
            self.height,
            self.width,
            self.window_h,
            self.window_w,
            self.window[0],
            self.window[2],
            self.window[1],
            self.window[3],
            self.changed_cells,
            self.full_image,
            self.spatially_varying
        )
    }
}

const CHANNELS: usize = 2;
const CHANGE_TOL: f64 = 1e-12;

fn positive_conv(rng: &mut Rng64, k: usize) -> ConvParams {
    let mut p = ConvParams::zeros(CHANNELS, CHANNELS, k, k, 1, k / 2);
    p.weights.iter_mut().for_each(|w| *w = rng.random_range(0.1..1.0));
    p
}

fn make_positive(layer: &mut IrnnLayerParams, rng: &mut Rng64) {
    for c in layer.input_to_hidden.iter_mut().chain(std::iter::once(&mut layer.post_concat_reduce)) {
        c.weights.iter_mut().for_each(|w| *w = rng.random_range(0.1..1.0));
        c.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    for (_, d) in &mut layer.directions {
        d.recurrence = Recurrence::Identity;
    }
}

fn irnn_spec() -> IrnnBlockSpec {
    IrnnBlockSpec {
        in_channels: CHANNELS,
        hidden_units: CHANNELS,
        out_channels: CHANNELS,
        layers: 2,
        learned_recurrence: false,
        first_step_bias: false,
        dropout_p: 0.0,
    }
}

/// Probes `op` on a `size x size` grid (odd sizes have an exact center).
pub fn probe(op: ProbeOperator, size: usize, seed: u64) -> Result<RfieldReport> {
    if size < 3 {
        return Err(Error::InvalidArgument(format!("grid size {size} must be at least 3")));
    }
    let mut rng = Rng64::seed_from_u64(seed);
    let forward: Box<dyn Fn(&FeatureMap) -> Result<FeatureMap>> = match op {
        ProbeOperator::Conv3x3x2 | ProbeOperator::Conv5x5x2 => {
            let k = if op == ProbeOperator::Conv3x3x2 { 3 } else { 5 };
            let (a, b) = (positive_conv(&mut rng, k), positive_conv(&mut rng, k));
            Box::new(move |x| conv2d_forward(&conv2d_forward(x, &a)?, &b))
        }
        ProbeOperator::GlobalAverage => Box::new(|x| Ok(global_average_pool_unpool(x))),
        ProbeOperator::Irnn => {
            let mut block = IrnnBlockParams::new(&irnn_spec(), &mut rng)?;
            block.layers.iter_mut().for_each(|l| make_positive(l, &mut rng));
            Box::new(move |x| Ok(irnn_block_forward(x, &block, None)?.0))
        }
        ProbeOperator::IrnnTwoDirection => {
            let mut block = IrnnBlockParams::two_direction(&irnn_spec(), &mut rng)?;
            block.layers.truncate(1);
            block.layers.iter_mut().for_each(|l| make_positive(l, &mut rng));
            Box::new(move |x| Ok(irnn_block_forward(x, &block, None)?.0))
        }
    };
    let base = FeatureMap::from_fn(CHANNELS, size, size, |_, _, _| rng.random_range(0.1..1.0));
    let mut bumped = base.clone();
    let c = size / 2;
    for ch in 0..CHANNELS {
        bumped.add_at(ch, c, c, 1.0);
    }
    let (y0, y1) = (forward(&base)?, forward(&bumped)?);
    let (oc, oh, ow) = y0.shape();
    let delta = |y: usize, x: usize| -> Vec<f64> { (0..oc).map(|ch| y1.get(ch, y, x) - y0.get(ch, y, x)).collect() };
    let mut window = [usize::MAX, usize::MAX, 0, 0];
    let mut changed = 0;
    let mut first: Option<Vec<f64>> = None;
    let mut varying = false;
    for y in 0..oh {
        for x in 0..ow {
            let d = delta(y, x);
            if d.iter().all(|v| v.abs() <= CHANGE_TOL) {
                continue;
            }
            changed += 1;
            window[0] = window[0].min(y);
            window[1] = window[1].min(x);
            window[2] = window[2].max(y);
            window[3] = window[3].max(x);
            match &first {
                None => first = Some(d),
                Some(f) => {
                    let scale = f.iter().map(|v| v.abs()).fold(0.0, f64::max);
                    if f.iter().zip(&d).any(|(a, b)| (a - b).abs() > 1e-9 * scale.max(1.0)) {
                        varying = true;
                    }
                }
            }
        }
    }
    if changed == 0 {
        return Err(Error::Verification(format!("{op}: perturbation reached no output cell")));
    }
    // a constant change that does not cover every cell still varies spatially
    if changed < oh * ow {
        varying = true;
    }
    Ok(RfieldReport {
        operator: op.name().to_string(),
        height: oh,
        width: ow,
        window,
        window_h: window[2] - window[0] + 1,
        window_w: window[3] - window[1] + 1,
        changed_cells: changed,
        full_image: changed == oh * ow,
        spatially_varying: varying,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for op in ProbeOperator::ALL {
            assert_eq!(op.name().parse::<ProbeOperator>().unwrap(), op);
        }
        assert!("conv7".parse::<ProbeOperator>().is_err());
    }

    #[test]
    fn tiny_grid_rejected() {
        assert!(probe(ProbeOperator::GlobalAverage, 2, 0).is_err());
    }
}
