//! Small-scale versions of the learned beamformer's building blocks, all
//! recorded on [`DiffGraph`] so every operation can be gradient checked.
//!
//! Layers own plain `f64` parameters. A forward pass first records every
//! parameter as a tape input (in [`Parameters::visit`] order), binds the
//! layers to those nodes, and then applies them.

pub mod layers;
pub mod train;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffGraph, Var};
use crate::channel::ChannelInstance;
use crate::error::{Error, Result};

pub use crate::autodiff::softplus;
pub use layers::{
    AttentionBlock, BatchNorm, Conv1dLayer, CrossAttention, DenseLayer, EncoderBlock, Ffn,
    LayerNorm, Mca, MultiUserAttention, TransformerLayer,
};
pub use train::{
    check_tiny, mini_train, tiny_params, EpochRow, ModelConfig, TinyModel, TrainConfig, TrainReport,
};

/// Flat parameter access in a fixed order shared by `bind`.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(f64));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.visit(&mut |x| v.push(x));
        v
    }

    fn load_flat(&mut self, x: &[f64]) -> Result<()> {
        let n = self.num_params();
        if x.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {n} parameters",
                x.len()
            )));
        }
        let mut it = x.iter();
        self.visit_mut(&mut |p| *p = *it.next().expect("length checked"));
        Ok(())
    }
}

/// Hands out consecutive parameter nodes to layers being bound.
pub struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [Var]> {
        let end = self.pos + n;
        if end > self.vars.len() {
            return Err(Error::DimensionMismatch(format!(
                "binding needs {end} parameters, {} recorded",
                self.vars.len()
            )));
        }
        let s = &self.vars[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn remaining(&self) -> usize {
        self.vars.len() - self.pos
    }
}

/// Row-major matrix of tape nodes; rows are tokens, columns features.
#[derive(Debug, Clone, PartialEq)]
pub struct VMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Var>,
}

impl VMat {
    pub fn new(rows: usize, cols: usize, data: Vec<Var>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} nodes for a {rows} x {cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn inputs(g: &mut DiffGraph, rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        Self::new(rows, cols, g.inputs(values))
    }

    pub fn at(&self, r: usize, c: usize) -> Var {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[Var] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<Var> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }

    pub fn values(&self, g: &DiffGraph) -> Vec<f64> {
        self.data.iter().map(|&v| g.value(v)).collect()
    }

    pub fn transpose(&self) -> VMat {
        let data = (0..self.cols)
            .flat_map(|c| (0..self.rows).map(move |r| (r, c)))
            .map(|(r, c)| self.at(r, c))
            .collect();
        VMat {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn hcat(parts: &[&VMat]) -> Result<VMat> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::DimensionMismatch(
                "hcat of unequal row counts".into(),
            ));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(VMat { rows, cols, data })
    }

    /// Stacks matrices with equal column counts.
    pub fn vcat(parts: &[&VMat]) -> Result<VMat> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::DimensionMismatch(
                "vcat of unequal column counts".into(),
            ));
        }
        let data = parts
            .iter()
            .flat_map(|p| p.data.iter().copied())
            .collect::<Vec<_>>();
        Ok(VMat {
            rows: data.len() / cols.max(1),
            cols,
            data,
        })
    }

    pub fn add(&self, g: &mut DiffGraph, other: &VMat) -> Result<VMat> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} + {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| g.add(a, b))
            .collect();
        Ok(VMat { data, ..*self })
    }

    pub fn map(&self, mut f: impl FnMut(Var) -> Var) -> VMat {
        VMat {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }
}

/// `C × H × W` feature map; convolutions run along `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<Var>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<Var>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} nodes for a {channels} x {height} x {width} map",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> Var {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self, g: &DiffGraph) -> Vec<f64> {
        self.data.iter().map(|&v| g.value(v)).collect()
    }

    pub fn map(&self, mut f: impl FnMut(Var) -> Var) -> FeatureMap {
        FeatureMap {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn add(&self, g: &mut DiffGraph, other: &FeatureMap) -> Result<FeatureMap> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch(format!(
                "{:?} + {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| g.add(a, b))
            .collect();
        Ok(FeatureMap { data, ..*self })
    }

    /// Non-overlapping 2 × 2 max pooling; odd trailing rows and columns are
    /// dropped. The gradient flows to the selected entry.
    pub fn max_pool2(&self, g: &DiffGraph) -> Result<FeatureMap> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::DimensionMismatch(format!(
                "cannot pool a {} x {} map",
                self.height, self.width
            )));
        }
        let (h2, w2) = (self.height / 2, self.width / 2);
        let mut data = Vec::with_capacity(self.channels * h2 * w2);
        for c in 0..self.channels {
            for y in 0..h2 {
                for x in 0..w2 {
                    let cands = [
                        self.at(c, 2 * y, 2 * x),
                        self.at(c, 2 * y, 2 * x + 1),
                        self.at(c, 2 * y + 1, 2 * x),
                        self.at(c, 2 * y + 1, 2 * x + 1),
                    ];
                    let best = cands
                        .into_iter()
                        .reduce(|a, b| if g.value(b) > g.value(a) { b } else { a })
                        .expect("four candidates");
                    data.push(best);
                }
            }
        }
        FeatureMap::new(self.channels, h2, w2, data)
    }

    /// Tokens are spatial positions (row-major), features are channels.
    pub fn to_tokens(&self) -> VMat {
        let t = self.height * self.width;
        let data = (0..t)
            .flat_map(|p| (0..self.channels).map(move |c| (c, p)))
            .map(|(c, p)| self.data[c * t + p])
            .collect();
        VMat {
            rows: t,
            cols: self.channels,
            data,
        }
    }
}

/// Real-valued network input: `values[k, m, 2n]` and `values[k, m, 2n + 1]`
/// are the real and imaginary parts of user `k`'s response at subcarrier `m`
/// and antenna `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFeatureTensor {
    pub values: Array3<f64>,
}

impl ChannelFeatureTensor {
    pub fn from_instance(h: &ChannelInstance) -> Self {
        Self::from_responses(&h.responses)
    }

    pub fn from_responses(responses: &Array3<Complex64>) -> Self {
        let (k, m, n) = responses.dim();
        let values = Array3::from_shape_fn((k, m, 2 * n), |(kk, mm, j)| {
            let z = responses[[kk, mm, j / 2]];
            if j % 2 == 0 {
                z.re
            } else {
                z.im
            }
        });
        Self { values }
    }

    pub fn detensorize(&self) -> Array3<Complex64> {
        let (k, m, n2) = self.values.dim();
        Array3::from_shape_fn((k, m, n2 / 2), |(kk, mm, n)| {
            Complex64::new(
                self.values[[kk, mm, 2 * n]],
                self.values[[kk, mm, 2 * n + 1]],
            )
        })
    }

    /// Input map scaled to unit RMS, with users as channels.
    pub fn record(&self, g: &mut DiffGraph) -> FeatureMap {
        let (k, m, w) = self.values.dim();
        let rms = (self.values.iter().map(|v| v * v).sum::<f64>()
            / self.values.len().max(1) as f64)
            .sqrt();
        let s = if rms > 0.0 { 1.0 / rms } else { 1.0 };
        let data = self.values.iter().map(|&v| g.constant(v * s)).collect();
        FeatureMap::new(k, m, w, data).expect("shape from array")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionalCode {
    /// `P × D`; row `r` encodes position `p = r + 1`.
    pub values: Array2<f64>,
    pub base: f64,
}

/// Sinusoidal code: `(p, 2i) ↦ sin(p / base^{2i/D})`, `(p, 2i+1) ↦ cos(…)`.
pub fn positional_code(positions: usize, dim: usize, base: f64) -> Result<PositionalCode> {
    if dim % 2 != 0 {
        return Err(Error::InvalidParams(format!(
            "positional code dimension {dim} must be even"
        )));
    }
    if !(base > 1.0) {
        return Err(Error::InvalidParams(format!(
            "positional code base {base} must exceed 1"
        )));
    }
    let values = Array2::from_shape_fn((positions, dim), |(r, j)| {
        let i = (j / 2) as f64;
        let angle = (r + 1) as f64 / base.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    });
    Ok(PositionalCode { values, base })
}

impl PositionalCode {
    pub fn add_to(&self, g: &mut DiffGraph, x: &VMat) -> Result<VMat> {
        if self.values.dim() != (x.rows, x.cols) {
            return Err(Error::DimensionMismatch(format!(
                "positional code {:?} for a {} x {} input",
                self.values.dim(),
                x.rows,
                x.cols
            )));
        }
        let data = x
            .data
            .iter()
            .zip(self.values.iter())
            .map(|(&v, &c)| g.add_const(v, c))
            .collect();
        Ok(VMat { data, ..*x })
    }
}

/// Softmax of one row. The max is subtracted as a constant, which leaves
/// both the value and the derivative unchanged.
pub fn softmax(g: &mut DiffGraph, xs: &[Var]) -> Vec<Var> {
    let top = xs
        .iter()
        .map(|&v| g.value(v))
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<Var> = xs
        .iter()
        .map(|&v| {
            let s = g.add_const(v, -top);
            g.exp(s)
        })
        .collect();
    let z = g.sum(&e);
    e.iter().map(|&v| g.div(v, z)).collect()
}

/// Largest deviation of an attention row sum from one seen so far.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AttentionStats {
    pub max_row_error: f64,
    pub rows: usize,
}

/// `softmax(Q Kᵀ / √d_k) V`.
pub fn scaled_dot_attention(
    g: &mut DiffGraph,
    q: &VMat,
    k: &VMat,
    v: &VMat,
    stats: &mut AttentionStats,
) -> Result<VMat> {
    if q.cols != k.cols || k.rows != v.rows || q.cols == 0 {
        return Err(Error::DimensionMismatch(format!(
            "attention with Q {}x{}, K {}x{}, V {}x{}",
            q.rows, q.cols, k.rows, k.cols, v.rows, v.cols
        )));
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    let v_cols: Vec<Vec<Var>> = (0..v.cols).map(|c| v.col(c)).collect();
    let mut data = Vec::with_capacity(q.rows * v.cols);
    for r in 0..q.rows {
        let scores: Vec<Var> = (0..k.rows)
            .map(|j| {
                let d = g.dot(q.row(r), k.row(j));
                g.scale(d, scale)
            })
            .collect();
        let a = softmax(g, &scores);
        let total: f64 = a.iter().map(|&x| g.value(x)).sum();
        stats.max_row_error = stats.max_row_error.max((total - 1.0).abs());
        stats.rows += 1;
        for col in &v_cols {
            data.push(g.dot(&a, col));
        }
    }
    VMat::new(q.rows, v.cols, data)
}
