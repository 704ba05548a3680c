use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{scaled_dot_attention, AttentionStats, Cursor, FeatureMap, Parameters, VMat};
use crate::autodiff::{DiffGraph, Var};
use crate::error::{Error, Result};

fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> f64 {
    let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    rng.gen_range(-a..a)
}

/// `y = W x + b` applied to each token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, biases: Vec<f64>) -> Result<Self> {
        let (out, _) = weights.dim();
        if out == 0 {
            return Err(Error::InvalidParams("dense layer with no outputs".into()));
        }
        if biases.len() != out {
            return Err(Error::DimensionMismatch(format!(
                "{} biases for {out} outputs",
                biases.len()
            )));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite dense parameters".into()));
        }
        Ok(Self { weights, biases })
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weights: Array2::zeros((out, inp)),
            biases: vec![0.0; out],
        }
    }

    pub fn random<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        Self {
            weights: Array2::from_shape_simple_fn((out, inp), || glorot(rng, inp, out)),
            biases: vec![0.0; out],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn bind<'a>(&self, c: &mut Cursor<'a>) -> Result<BoundDense<'a>> {
        let (out, inp) = self.weights.dim();
        Ok(BoundDense {
            w: c.take(out * inp)?,
            b: c.take(out)?,
            out,
            inp,
        })
    }
}

impl Parameters for DenseLayer {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.weights.iter().chain(&self.biases).for_each(|&v| f(v));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .for_each(f);
    }
}

pub struct BoundDense<'a> {
    w: &'a [Var],
    b: &'a [Var],
    out: usize,
    inp: usize,
}

impl BoundDense<'_> {
    pub fn apply_vec(&self, g: &mut DiffGraph, x: &[Var]) -> Result<Vec<Var>> {
        if x.len() != self.inp {
            return Err(Error::DimensionMismatch(format!(
                "dense layer expects {} inputs, got {}",
                self.inp,
                x.len()
            )));
        }
        Ok((0..self.out)
            .map(|o| {
                let d = g.dot(&self.w[o * self.inp..(o + 1) * self.inp], x);
                g.add(d, self.b[o])
            })
            .collect())
    }

    /// Applies the layer to every row.
    pub fn apply(&self, g: &mut DiffGraph, x: &VMat) -> Result<VMat> {
        let mut data = Vec::with_capacity(x.rows * self.out);
        for r in 0..x.rows {
            data.extend(self.apply_vec(g, x.row(r))?);
        }
        VMat::new(x.rows, self.out, data)
    }
}

/// 1D cross-correlation with zero same-padding, stride 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1dLayer {
    /// `out × in × kernel`, odd kernel.
    pub weights: Array3<f64>,
    pub biases: Vec<f64>,
}

impl Conv1dLayer {
    pub fn new(weights: Array3<f64>, biases: Vec<f64>) -> Result<Self> {
        let (out, _, k) = weights.dim();
        if k % 2 == 0 {
            return Err(Error::InvalidParams(format!("kernel size {k} must be odd")));
        }
        if out == 0 || biases.len() != out {
            return Err(Error::DimensionMismatch(format!(
                "{} biases for {out} outputs",
                biases.len()
            )));
        }
        Ok(Self { weights, biases })
    }

    pub fn random<R: Rng>(out: usize, inp: usize, kernel: usize, rng: &mut R) -> Self {
        Self {
            weights: Array3::from_shape_simple_fn((out, inp, kernel), || {
                glorot(rng, inp * kernel, out * kernel)
            }),
            biases: vec![0.0; out],
        }
    }

    pub fn zeros(out: usize, inp: usize, kernel: usize) -> Self {
        Self {
            weights: Array3::zeros((out, inp, kernel)),
            biases: vec![0.0; out],
        }
    }

    pub fn bind<'a>(&self, c: &mut Cursor<'a>) -> Result<BoundConv<'a>> {
        let (out, inp, k) = self.weights.dim();
        Ok(BoundConv {
            w: c.take(out * inp * k)?,
            b: c.take(out)?,
            out,
            inp,
            k,
        })
    }
}

impl Parameters for Conv1dLayer {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.weights.iter().chain(&self.biases).for_each(|&v| f(v));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .for_each(f);
    }
}

pub struct BoundConv<'a> {
    w: &'a [Var],
    b: &'a [Var],
    out: usize,
    inp: usize,
    k: usize,
}

impl BoundConv<'_> {
    /// Convolves every row of every channel along the width.
    pub fn apply(&self, g: &mut DiffGraph, x: &FeatureMap) -> Result<FeatureMap> {
        if x.channels != self.inp {
            return Err(Error::DimensionMismatch(format!(
                "convolution expects {} channels, got {}",
                self.inp, x.channels
            )));
        }
        let half = self.k / 2;
        let mut data = Vec::with_capacity(self.out * x.height * x.width);
        let mut ws = Vec::with_capacity(self.inp * self.k);
        let mut xs = Vec::with_capacity(self.inp * self.k);
        for o in 0..self.out {
            for y in 0..x.height {
                for t in 0..x.width {
                    ws.clear();
                    xs.clear();
                    for c in 0..self.inp {
                        for j in 0..self.k {
                            let pos = t + j;
                            if pos < half || pos - half >= x.width {
                                continue;
                            }
                            ws.push(self.w[(o * self.inp + c) * self.k + j]);
                            xs.push(x.at(c, y, pos - half));
                        }
                    }
                    let d = g.dot(&ws, &xs);
                    data.push(g.add(d, self.b[o]));
                }
            }
        }
        FeatureMap::new(self.out, x.height, x.width, data)
    }

    /// Convolution of a `channels × length` sequence.
    pub fn apply_seq(&self, g: &mut DiffGraph, x: &VMat) -> Result<VMat> {
        let fm = FeatureMap::new(x.rows, 1, x.cols, x.data.clone())?;
        let y = self.apply(g, &fm)?;
        VMat::new(y.channels, y.width, y.data)
    }
}

/// Per-channel normalisation with statistics over every position of every
/// map in the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: 1e-5,
        }
    }

    pub fn bind<'a>(&self, c: &mut Cursor<'a>) -> Result<BoundNorm<'a>> {
        let n = self.gamma.len();
        Ok(BoundNorm {
            gamma: c.take(n)?,
            beta: c.take(n)?,
            eps: self.eps,
        })
    }
}

impl Parameters for BatchNorm {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.gamma.iter().chain(&self.beta).for_each(|&v| f(v));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.gamma
            .iter_mut()
            .chain(self.beta.iter_mut())
            .for_each(f);
    }
}

/// Per-token normalisation over features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            eps: 1e-5,
        }
    }

    pub fn bind<'a>(&self, c: &mut Cursor<'a>) -> Result<BoundNorm<'a>> {
        let n = self.gamma.len();
        Ok(BoundNorm {
            gamma: c.take(n)?,
            beta: c.take(n)?,
            eps: self.eps,
        })
    }
}

impl Parameters for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.gamma.iter().chain(&self.beta).for_each(|&v| f(v));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.gamma
            .iter_mut()
            .chain(self.beta.iter_mut())
            .for_each(f);
    }
}

pub struct BoundNorm<'a> {
    gamma: &'a [Var],
    beta: &'a [Var],
    eps: f64,
}

/// `(x − mean) / sqrt(var + eps)` over `xs`.
fn standardize(g: &mut DiffGraph, xs: &[Var], eps: f64) -> Vec<Var> {
    let inv_n = 1.0 / xs.len() as f64;
    let terms: Vec<(Var, f64)> = xs.iter().map(|&v| (v, inv_n)).collect();
    let mean = g.lin_comb(&terms, 0.0);
    let centered: Vec<Var> = xs.iter().map(|&v| g.sub(v, mean)).collect();
    let sq: Vec<(Var, f64)> = centered.iter().map(|&v| (g.square(v), inv_n)).collect();
    let var = g.lin_comb(&sq, eps);
    let sd = g.sqrt(var);
    centered.iter().map(|&v| g.div(v, sd)).collect()
}

impl BoundNorm<'_> {
    fn affine(&self, g: &mut DiffGraph, x: Var, i: usize) -> Var {
        let s = g.mul(x, self.gamma[i]);
        g.add(s, self.beta[i])
    }

    pub fn apply_batch(&self, g: &mut DiffGraph, batch: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        let c = self.gamma.len();
        if batch.iter().any(|m| m.channels != c) {
            return Err(Error::DimensionMismatch(format!(
                "batch norm over {c} channels"
            )));
        }
        let mut out: Vec<Vec<Var>> = batch.iter().map(|m| m.data.clone()).collect();
        for ch in 0..c {
            let mut slots = Vec::new();
            let mut xs = Vec::new();
            for (b, m) in batch.iter().enumerate() {
                let per = m.height * m.width;
                for j in 0..per {
                    slots.push((b, ch * per + j));
                    xs.push(m.data[ch * per + j]);
                }
            }
            let z = standardize(g, &xs, self.eps);
            for ((b, idx), v) in slots.into_iter().zip(z) {
                out[b][idx] = self.affine(g, v, ch);
            }
        }
        batch
            .iter()
            .zip(out)
            .map(|(m, data)| FeatureMap::new(m.channels, m.height, m.width, data))
            .collect()
    }

    pub fn apply_rows(&self, g: &mut DiffGraph, x: &VMat) -> Result<VMat> {
        if x.cols != self.gamma.len() {
            return Err(Error::DimensionMismatch(format!(
                "layer norm over {} features, got {}",
                self.gamma.len(),
                x.cols
            )));
        }
        let mut data = Vec::with_capacity(x.data.len());
        for r in 0..x.rows {
            let z = standardize(g, x.row(r), self.eps);
            for (i, v) in z.into_iter().enumerate() {
                data.push(self.affine(g, v, i));
            }
        }
        VMat::new(x.rows, x.cols, data)
    }
}

/// Conv → BN → ReLU → residual (Conv ∘ ReLU ∘ Conv + skip) → Conv → 2×2 max
/// pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub conv_in: Conv1dLayer,
    pub norm: BatchNorm,
    pub res_a: Conv1dLayer,
    pub res_b: Conv1dLayer,
    pub conv_out: Conv1dLayer,
}

impl EncoderBlock {
    pub fn random<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            conv_in: Conv1dLayer::random(c_out, c_in, 3, rng),
            norm: BatchNorm::new(c_out),
            res_a: Conv1dLayer::random(c_out, c_out, 3, rng),
            res_b: Conv1dLayer::random(c_out, c_out, 3, rng),
            conv_out: Conv1dLayer::random(c_out, c_out, 3, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv_out.weights.dim().0
    }

    /// `(C, H, W) ↦ (C_out, ⌊H/2⌋, ⌊W/2⌋)`.
    pub fn output_shape(
        c_out: usize,
        height: usize,
        width: usize,
    ) -> Result<(usize, usize, usize)> {
        if height < 2 || width < 2 {
            return Err(Error::DimensionMismatch(format!(
                "encoder input {height} x {width} is too small to pool"
            )));
        }
        Ok((c_out, height / 2, width / 2))
    }

    pub fn bind<'a>(&self, c: &mut Cursor<'a>) -> Result<BoundEncoder<'a>> {
        Ok(BoundEncoder {
            conv_in: self.conv_in.bind(c)?,
            norm: self.norm.bind(c)?,
            res_a: self.res_a.bind(c)?,
            res_b: self.res_b.bind(c)?,
            conv_out: self.conv_out.bind(c)?,
        })
    }
}

impl Parameters for EncoderBlock {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.conv_in.visit(f);
        self.norm.visit(f);
        self.res_a.visit(f);
        self.res_b.visit(f);
        self.conv_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.conv_in.visit_mut(f);
        self.norm.visit_mut(f);
        self.res_a.visit_mut(f);
        self.res_b.visit_mut(f);
        self.conv_out.visit_mut(f);
    }
}

pub struct BoundEncoder<'a> {
    conv_in: BoundConv<'a>,
    norm: BoundNorm<'a>,
    res_a: BoundConv<'a>,
    res_b: BoundConv<'a>,
    conv_out: BoundConv<'a>,
}

impl BoundEncoder<'_> {
    /// The residual block alone.
    pub fn residual(&self, g: &mut DiffGraph, x: &FeatureMap) -> Result<FeatureMap> {
        let a = self.res_a.apply(g, x)?;
        let a = a.map(|v| g.relu(v));
        let b = self.res_b.apply(g, &a)?;
        b.add(g, x)
    }

    pub fn apply_batch(&self, g: &mut DiffGraph, batch: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        for m in batch {
            EncoderBlock::output_shape(self.conv_out.out, m.height, m.width)?;
        }
        let pre = batch
            .iter()
            .map(|m| self.conv_in.apply(g, m))
            .collect::<Result<Vec<_>>>()?;
        let normed = self.norm.apply_batch(g, &pre)?;
        normed
            .iter()
            .map(|m| {
                let r = m.map(|v| g.relu(v));
                let r = self.residual(g, &r)?;
                let o = self.conv_out.apply(g, &r)?;
                o.max_pool2(g)
            })
            .collect()
    }
}

/// Single-head projections for `softmax(Q Kᵀ/√d_k) V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub query: DenseLayer,
    pub key: DenseLayer,
    pub value: DenseLayer,
}

impl AttentionBlock {
    pub fn random<R: Rng>(d_in: usize, key_dim: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            query: DenseLayer::random(key_dim, d_in, rng),
            key: DenseLayer::random(key_dim, d_in, rng),
            value: DenseLayer::random(d_out, d_in, rng),
        }
    }

    pub fn key_dim(&self) -> usize {
        self.query.out_dim()
    }

    pub fn bind<'a>(&self, c: &mut Cursor<'a>) -> Result<BoundAttention<'a>> {
        Ok(BoundAttention {
            query: self.query.bind(c)?,
            key: self.key.bind(c)?,
            value: self.value.bind(c)?,
        })
    }
}

impl Parameters for AttentionBlock {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
    }
}

pub struct BoundAttention<'a> {
    query: BoundDense<'a>,
    key: BoundDense<'a>,
    value: BoundDense<'a>,
}

impl BoundAttention<'_> {
    /// Queries from `from`, keys and values from `to`.
    pub fn apply(
        &self,
        g: &mut DiffGraph,
        from: &VMat,
        to: &VMat,
        stats: &mut AttentionStats,
    ) -> Result<VMat> {
        let q = self.query.apply(g, from)?;
        let k = self.key.apply(g, to)?;
        let v = self.value.apply(g, to)?;
        scaled_dot_attention(g, &q, &k, &v, stats)
    }
}

/// Maps the channel latent onto a beamformer latent and lets the channel
/// latent attend to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAttention {
    pub lift: DenseLayer,
    pub attention: AttentionBlock,
}

impl CrossAttention {
    pub fn random<R: Rng>(d: usize, key_dim: usize, rng: &mut R) -> Self {
        Self {
            lift: DenseLayer::random(d, d, rng),
            attention: AttentionBlock::random(d, key_dim, d, rng),
        }
    }

    pub fn bind<'a>(&self, c: &mut Cursor<'a>) -> Result<BoundCross<'a>> {
        Ok(BoundCross {
            lift: self.lift.bind(c)?,
            attention: self.attention.bind(c)?,
        })
    }
}

impl Parameters for CrossAttention {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.lift.visit(f);
        self.attention.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.lift.visit_mut(f);
        self.attention.visit_mut(f);
    }
}

pub struct BoundCross<'a> {
    lift: BoundDense<'a>,
    attention: BoundAttention<'a>,
}

impl BoundCross<'_> {
    pub fn apply(&self, g: &mut DiffGraph, x: &VMat, stats: &mut AttentionStats) -> Result<VMat> {
        let y = self.lift.apply(g, x)?;
        self.attention.apply(g, x, &y, stats)
    }
}

/// One linear expansion per user, one self-attention head per user over the
/// stacked expansions, an output projection, and a mean over the user axis
/// to return to the input token count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiUserAttention {
    pub expansions: Vec<DenseLayer>,
    pub heads: Vec<AttentionBlock>,
    pub output: DenseLayer,
}

impl MultiUserAttention {
    pub fn random<R: Rng>(d: usize, key_dim: usize, users: usize, rng: &mut R) -> Self {
        Self {
            expansions: (0..users).map(|_| DenseLayer::random(d, d, rng)).collect(),
            heads: (0..users)
                .map(|_| AttentionBlock::random(d, key_dim, key_dim, rng))
                .collect(),
            output: DenseLayer::random(d, users * key_dim, rng),
        }
    }

    pub fn bind<'a>(&self, c: &mut Cursor<'a>) -> Result<BoundMsa<'a>> {
        Ok(BoundMsa {
            expansions: self
                .expansions
                .iter()
                .map(|l| l.bind(c))
                .collect::<Result<_>>()?,
            heads: self
                .heads
                .iter()
                .map(|l| l.bind(c))
                .collect::<Result<_>>()?,
            output: self.output.bind(c)?,
        })
    }
}

impl Parameters for MultiUserAttention {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.expansions.iter().for_each(|l| l.visit(f));
        self.heads.iter().for_each(|l| l.visit(f));
        self.output.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.expansions.iter_mut().for_each(|l| l.visit_mut(f));
        self.heads.iter_mut().for_each(|l| l.visit_mut(f));
        self.output.visit_mut(f);
    }
}

pub struct BoundMsa<'a> {
    expansions: Vec<BoundDense<'a>>,
    heads: Vec<BoundAttention<'a>>,
    output: BoundDense<'a>,
}

impl BoundMsa<'_> {
    pub fn apply(&self, g: &mut DiffGraph, x: &VMat, stats: &mut AttentionStats) -> Result<VMat> {
        let users = self.expansions.len();
        let parts = self
            .expansions
            .iter()
            .map(|l| l.apply(g, x))
            .collect::<Result<Vec<_>>>()?;
        let stacked = VMat::vcat(&parts.iter().collect::<Vec<_>>())?;
        let heads = self
            .heads
            .iter()
            .map(|h| h.apply(g, &stacked, &stacked, stats))
            .collect::<Result<Vec<_>>>()?;
        let joined = VMat::hcat(&heads.iter().collect::<Vec<_>>())?;
        let y = self.output.apply(g, &joined)?;
        // mean over the user blocks
        let t = x.rows;
        let inv = 1.0 / users as f64;
        let mut data = Vec::with_capacity(t * y.cols);
        for r in 0..t {
            for c in 0..y.cols {
                let terms: Vec<(Var, f64)> =
                    (0..users).map(|u| (y.at(u * t + r, c), inv)).collect();
                data.push(g.lin_comb(&terms, 0.0));
            }
        }
        VMat::new(t, y.cols, data)
    }
}

/// Linear → GELU → Linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ffn {
    pub expand: DenseLayer,
    pub contract: DenseLayer,
}

impl Ffn {
    pub fn random<R: Rng>(d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            expand: DenseLayer::random(hidden, d, rng),
            contract: DenseLayer::random(d, hidden, rng),
        }
    }

    pub fn bind<'a>(&self, c: &mut Cursor<'a>) -> Result<BoundFfn<'a>> {
        Ok(BoundFfn {
            expand: self.expand.bind(c)?,
            contract: self.contract.bind(c)?,
        })
    }
}

impl Parameters for Ffn {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.expand.visit(f);
        self.contract.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.expand.visit_mut(f);
        self.contract.visit_mut(f);
    }
}

pub struct BoundFfn<'a> {
    expand: BoundDense<'a>,
    contract: BoundDense<'a>,
}

impl BoundFfn<'_> {
    pub fn apply(&self, g: &mut DiffGraph, x: &VMat) -> Result<VMat> {
        let h = self.expand.apply(g, x)?;
        let h = h.map(|v| g.gelu(v));
        self.contract.apply(g, &h)
    }
}

/// `X ← X + MSA(LN(X))`, then `X ← X + FFN(X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerLayer {
    pub norm: LayerNorm,
    pub attention: MultiUserAttention,
    pub ffn: Ffn,
}

impl TransformerLayer {
    pub fn random<R: Rng>(d: usize, key_dim: usize, users: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(d),
            attention: MultiUserAttention::random(d, key_dim, users, rng),
            ffn: Ffn::random(d, 4 * d, rng),
        }
    }

    pub fn bind<'a>(&self, c: &mut Cursor<'a>) -> Result<BoundTransformer<'a>> {
        Ok(BoundTransformer {
            norm: self.norm.bind(c)?,
            attention: self.attention.bind(c)?,
            ffn: self.ffn.bind(c)?,
        })
    }
}

impl Parameters for TransformerLayer {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.norm.visit(f);
        self.attention.visit(f);
        self.ffn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.norm.visit_mut(f);
        self.attention.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

pub struct BoundTransformer<'a> {
    norm: BoundNorm<'a>,
    attention: BoundMsa<'a>,
    ffn: BoundFfn<'a>,
}

impl BoundTransformer<'_> {
    pub fn apply(&self, g: &mut DiffGraph, x: &VMat, stats: &mut AttentionStats) -> Result<VMat> {
        let n = self.norm.apply_rows(g, x)?;
        let a = self.attention.apply(g, &n, stats)?;
        let x = a.add(g, x)?;
        let f = self.ffn.apply(g, &x)?;
        f.add(g, &x)
    }
}

/// Joint attention over several latents: queries from their side-by-side
/// concatenation, keys and values from each latent in turn; each latent is
/// replaced by its attention output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mca {
    pub query: DenseLayer,
    pub keys: Vec<DenseLayer>,
    pub values: Vec<DenseLayer>,
}

impl Mca {
    pub fn random<R: Rng>(d: usize, key_dim: usize, latents: usize, rng: &mut R) -> Self {
        Self {
            query: DenseLayer::random(key_dim, latents * d, rng),
            keys: (0..latents)
                .map(|_| DenseLayer::random(key_dim, d, rng))
                .collect(),
            values: (0..latents)
                .map(|_| DenseLayer::random(d, d, rng))
                .collect(),
        }
    }

    pub fn bind<'a>(&self, c: &mut Cursor<'a>) -> Result<BoundMca<'a>> {
        Ok(BoundMca {
            query: self.query.bind(c)?,
            keys: self.keys.iter().map(|l| l.bind(c)).collect::<Result<_>>()?,
            values: self
                .values
                .iter()
                .map(|l| l.bind(c))
                .collect::<Result<_>>()?,
        })
    }
}

impl Parameters for Mca {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.query.visit(f);
        self.keys.iter().for_each(|l| l.visit(f));
        self.values.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.query.visit_mut(f);
        self.keys.iter_mut().for_each(|l| l.visit_mut(f));
        self.values.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

pub struct BoundMca<'a> {
    query: BoundDense<'a>,
    keys: Vec<BoundDense<'a>>,
    values: Vec<BoundDense<'a>>,
}

impl BoundMca<'_> {
    pub fn apply(
        &self,
        g: &mut DiffGraph,
        latents: &[VMat],
        stats: &mut AttentionStats,
    ) -> Result<Vec<VMat>> {
        if latents.len() != self.keys.len() {
            return Err(Error::DimensionMismatch(format!(
                "joint attention over {} latents, got {}",
                self.keys.len(),
                latents.len()
            )));
        }
        let joined = VMat::hcat(&latents.iter().collect::<Vec<_>>())?;
        let q = self.query.apply(g, &joined)?;
        latents
            .iter()
            .zip(self.keys.iter().zip(&self.values))
            .map(|(x, (kl, vl))| {
                let k = kl.apply(g, x)?;
                let v = vl.apply(g, x)?;
                scaled_dot_attention(g, &q, &k, &v, stats)
            })
            .collect()
    }
}
