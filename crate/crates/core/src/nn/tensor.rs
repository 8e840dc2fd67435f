use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Dense `channels x height x width` array stored row-major by
/// (channel, row, column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(shape_err(
                "FeatureMap::from_vec",
                format!(
                    "{} values cannot form a {}x{}x{} map",
                    values.len(),
                    channels,
                    height,
                    width
                ),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            values,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.values[i] = v;
    }

    #[inline]
    pub fn add_at(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.values[i] += v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn dot(&self, other: &FeatureMap) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Adds `other` elementwise; shapes must agree.
    pub fn add_assign(&mut self, other: &FeatureMap) -> Result<()> {
        if !self.same_shape(other) {
            return Err(shape_err(
                "FeatureMap::add_assign",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    /// Stacks maps along the channel axis. All inputs must share spatial dims.
    pub fn concat_channels(maps: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = maps
            .first()
            .ok_or_else(|| shape_err("concat_channels", "no inputs"))?;
        let (h, w) = (first.height, first.width);
        let mut channels = 0;
        let mut values = Vec::new();
        for m in maps {
            if m.height != h || m.width != w {
                return Err(shape_err(
                    "concat_channels",
                    format!("spatial {}x{} vs {}x{}", m.height, m.width, h, w),
                ));
            }
            channels += m.channels;
            values.extend_from_slice(&m.values);
        }
        Ok(FeatureMap {
            channels,
            height: h,
            width: w,
            values,
        })
    }

    /// Inverse of [`FeatureMap::concat_channels`]: splits into consecutive
    /// channel groups of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<FeatureMap>> {
        if sizes.iter().sum::<usize>() != self.channels {
            return Err(shape_err(
                "split_channels",
                format!("group sizes {:?} do not sum to {}", sizes, self.channels),
            ));
        }
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &n in sizes {
            out.push(FeatureMap {
                channels: n,
                height: self.height,
                width: self.width,
                values: self.values[offset * plane..(offset + n) * plane].to_vec(),
            });
            offset += n;
        }
        Ok(out)
    }
}
