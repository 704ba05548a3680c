//! End-to-end unsupervised training of a miniature network on the composite
//! loss.
//!
//! Pipeline per batch: channel tensors → encoder blocks → one cross
//! attention per output (phases, delays, digital weights, switches) → the
//! switch latent gets a positional code and transformer layers → joint
//! attention over all four latents → linear decoders → composite loss. The
//! switch logits pass through the Hungarian step with a straight-through
//! gradient, so the loss gradient with respect to the network outputs comes
//! from [`LossEvaluator`] and is pulled back through the network with one
//! more reverse sweep.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{CrossAttention, DenseLayer, EncoderBlock, Mca, TransformerLayer};
use super::{
    positional_code, AttentionStats, ChannelFeatureTensor, Cursor, FeatureMap, Parameters, VMat,
};
use crate::autodiff::{DiffGraph, Var};
use crate::beamformer::{BeamformerSet, ConfigMode, DelayLimit};
use crate::channel::ChannelInstance;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::objective::{LossConfig, LossEvaluator, PenaltyWeights};
use crate::params::SystemParams;

/// Largest sizes accepted by [`mini_train`].
pub const TINY_MAX_ANTENNAS: usize = 32;
pub const TINY_MAX_SUBCARRIERS: usize = 4;
pub const TINY_MAX_USERS: usize = 2;
pub const TINY_MAX_TTDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder_blocks: usize,
    pub key_dim: usize,
    pub transformer_layers: usize,
    pub decoder_hidden: usize,
    pub positional_base: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_blocks: 2,
            key_dim: 8,
            transformer_layers: 1,
            decoder_hidden: 32,
            positional_base: 1000.0,
            seed: 0,
        }
    }
}

const HEADS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyModel {
    pub config: ModelConfig,
    pub num_users: usize,
    pub num_subcarriers: usize,
    pub num_antennas: usize,
    pub num_rf_chains: usize,
    pub num_groups: usize,
    pub encoders: Vec<EncoderBlock>,
    /// Phases, delays, digital weights, switches.
    pub cross: Vec<CrossAttention>,
    pub transformer: Vec<TransformerLayer>,
    pub mca: Mca,
    pub decoders: Vec<Vec<DenseLayer>>,
}

/// Checks the tiny-scale limits.
/// Default scale for training: 16 antennas, 4 TTDs per chain, 4 subcarriers.
pub fn tiny_params() -> SystemParams {
    SystemParams {
        num_antennas: 16,
        num_ttds_per_chain: 4,
        num_subcarriers: 4,
        ..SystemParams::desk()
    }
}

pub fn check_tiny(params: &SystemParams) -> Result<()> {
    params.validate()?;
    let ok = params.num_antennas <= TINY_MAX_ANTENNAS
        && params.num_subcarriers <= TINY_MAX_SUBCARRIERS
        && params.num_users <= TINY_MAX_USERS
        && params.num_ttds_per_chain <= TINY_MAX_TTDS;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!(
            "mini training needs N <= {TINY_MAX_ANTENNAS}, M <= {TINY_MAX_SUBCARRIERS}, \
             K <= {TINY_MAX_USERS}, L <= {TINY_MAX_TTDS}"
        )))
    }
}

impl TinyModel {
    pub fn new(params: &SystemParams, config: ModelConfig) -> Result<Self> {
        check_tiny(params)?;
        let (k, m, n) = (
            params.num_users,
            params.num_subcarriers,
            params.num_antennas,
        );
        let (nrf, groups) = (params.num_rf_chains, params.num_ttds_per_chain);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (mut c, mut h, mut w) = (k, m, 2 * n);
        let mut encoders = Vec::new();
        for _ in 0..config.encoder_blocks {
            (c, h, w) = EncoderBlock::output_shape(2 * c, h, w)?;
            encoders.push(EncoderBlock::random(c / 2, c, &mut rng));
        }
        let (d, tokens) = (c, h * w);
        if d % 2 != 0 || config.key_dim == 0 {
            return Err(Error::InvalidParams(format!(
                "latent width {d} must be even, key dim positive"
            )));
        }
        let cross = (0..HEADS)
            .map(|_| CrossAttention::random(d, config.key_dim, &mut rng))
            .collect();
        let transformer = (0..config.transformer_layers)
            .map(|_| TransformerLayer::random(d, config.key_dim, k, &mut rng))
            .collect();
        let mca = Mca::random(d, config.key_dim, HEADS, &mut rng);
        let outs = [
            2 * n * nrf,
            groups * nrf,
            2 * m * nrf * k,
            nrf * groups * groups,
        ];
        let mut decoders: Vec<Vec<DenseLayer>> = outs
            .iter()
            .map(|&o| {
                vec![
                    DenseLayer::random(config.decoder_hidden, tokens * d, &mut rng),
                    DenseLayer::random(o, config.decoder_hidden, &mut rng),
                ]
            })
            .collect();
        // Phase outputs start on the unit circle at φ = 1 with a small
        // channel-dependent spread, instead of near the origin.
        let phase_out = &mut decoders[0][1];
        phase_out.weights.mapv_inplace(|v| 0.1 * v);
        for (i, b) in phase_out.biases.iter_mut().enumerate() {
            *b = if i % 2 == 0 { 1.0 } else { 0.0 };
        }
        Ok(Self {
            config,
            num_users: k,
            num_subcarriers: m,
            num_antennas: n,
            num_rf_chains: nrf,
            num_groups: groups,
            encoders,
            cross,
            transformer,
            mca,
            decoders,
        })
    }

    pub fn num_outputs(&self) -> usize {
        self.decoders
            .iter()
            .map(|d| d.last().map_or(0, |l| l.out_dim()))
            .sum()
    }

    /// Records one forward pass over `batch` (batch-norm statistics span the
    /// whole batch) and returns each instance's output nodes in the layout
    /// of a cartesian-phase [`LossEvaluator`].
    pub fn forward(
        &self,
        g: &mut DiffGraph,
        vars: &[Var],
        batch: &[ChannelFeatureTensor],
        stats: &mut AttentionStats,
    ) -> Result<Vec<Vec<Var>>> {
        let mut cur = Cursor::new(vars);
        let enc = self
            .encoders
            .iter()
            .map(|e| e.bind(&mut cur))
            .collect::<Result<Vec<_>>>()?;
        let cross = self
            .cross
            .iter()
            .map(|e| e.bind(&mut cur))
            .collect::<Result<Vec<_>>>()?;
        let tr = self
            .transformer
            .iter()
            .map(|e| e.bind(&mut cur))
            .collect::<Result<Vec<_>>>()?;
        let mca = self.mca.bind(&mut cur)?;
        let dec = self
            .decoders
            .iter()
            .map(|d| {
                d.iter()
                    .map(|l| l.bind(&mut cur))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if cur.remaining() != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} unbound parameters",
                cur.remaining()
            )));
        }

        let mut maps: Vec<FeatureMap> = batch.iter().map(|t| t.record(g)).collect();
        for e in &enc {
            maps = e.apply_batch(g, &maps)?;
        }
        let mut outputs = Vec::with_capacity(batch.len());
        for fm in &maps {
            let x = fm.to_tokens();
            let mut lat = cross
                .iter()
                .map(|c| c.apply(g, &x, stats))
                .collect::<Result<Vec<VMat>>>()?;
            let pc = positional_code(x.rows, x.cols, self.config.positional_base)?;
            let mut s = pc.add_to(g, &lat[3])?;
            for layer in &tr {
                s = layer.apply(g, &s, stats)?;
            }
            lat[3] = s;
            let lat = mca.apply(g, &lat, stats)?;
            let mut y = Vec::with_capacity(self.num_outputs());
            for (l, d) in lat.iter().zip(&dec) {
                let mut v = l.data.clone();
                for layer in d {
                    v = layer.apply_vec(g, &v)?;
                }
                y.extend(v);
            }
            outputs.push(y);
        }
        Ok(outputs)
    }

    /// Network output values for one channel.
    pub fn output_values(&self, h: &ChannelInstance) -> Result<Vec<f64>> {
        let mut g = DiffGraph::new();
        let vars = g.inputs(&self.to_flat());
        let t = ChannelFeatureTensor::from_instance(h);
        let y = self.forward(&mut g, &vars, &[t], &mut AttentionStats::default())?;
        g.check_finite()?;
        Ok(y[0].iter().map(|&v| g.value(v)).collect())
    }

    /// Hardware parameters predicted for one channel; switches come from the
    /// Hungarian step on the predicted logits.
    pub fn predict(
        &self,
        h: &ChannelInstance,
        params: &SystemParams,
        limit: DelayLimit,
        loss: &LossConfig,
    ) -> Result<BeamformerSet> {
        let y = self.output_values(h)?;
        let ev = LossEvaluator::new(h, params, ConfigMode::Adaptive, limit, *loss)?
            .with_cartesian_phases();
        ev.decode(&y)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

impl Parameters for TinyModel {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.encoders.iter().for_each(|l| l.visit(f));
        self.cross.iter().for_each(|l| l.visit(f));
        self.transformer.iter().for_each(|l| l.visit(f));
        self.mca.visit(f);
        self.decoders.iter().flatten().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.encoders.iter_mut().for_each(|l| l.visit_mut(f));
        self.cross.iter_mut().for_each(|l| l.visit_mut(f));
        self.transformer.iter_mut().for_each(|l| l.visit_mut(f));
        self.mca.visit_mut(f);
        self.decoders
            .iter_mut()
            .flatten()
            .for_each(|l| l.visit_mut(f));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The step size follows a cosine from `learning_rate` down to this fraction of it.
    pub final_lr_fraction: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            learning_rate: 3e-3,
            final_lr_fraction: 0.05,
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig {
                weights: PenaltyWeights {
                    ps: 20.0,
                    ..PenaltyWeights::default()
                },
                ..LossConfig::default()
            },
        }
    }
}

/// Means over every instance seen in the epoch, measured before each update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_l_eff: f64,
    pub mean_l_ps: f64,
    pub mean_l_ttd: f64,
    pub mean_l_pc: f64,
    pub max_phase_modulus_residual: f64,
    pub max_attention_row_error: f64,
    pub permutations_valid: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: TinyModel,
    pub curve: Vec<EpochRow>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64) {
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

fn diverged(epoch: usize, batch: usize, e: Error) -> Error {
    Error::Diverged(format!("epoch {epoch}, batch {batch}: {e}"))
}

/// Trains a fresh [`TinyModel`] on `instances` with Adam on mini-batches.
pub fn mini_train(
    params: &SystemParams,
    instances: &[ChannelInstance],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_tiny(params)?;
    if instances.is_empty() || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config(
            "training needs instances, a positive batch size and learning rate".into(),
        ));
    }
    let mut model = TinyModel::new(params, cfg.model)?;
    let limit = DelayLimit::Bounded(params.max_delay_seconds);
    let tensors: Vec<ChannelFeatureTensor> = instances
        .iter()
        .map(ChannelFeatureTensor::from_instance)
        .collect();
    let mut theta = model.to_flat();
    let mut adam = Adam::new(theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut g = DiffGraph::new();
    let mut gy = Vec::new();
    let mut adj = Vec::new();
    let mut grad = vec![0.0; theta.len()];
    let n_phase = 2 * params.num_antennas * params.num_rf_chains;
    let mut curve = Vec::with_capacity(cfg.epochs);

    let steps_per_epoch = instances.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1) as f64;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut row = EpochRow {
            epoch,
            mean_total: 0.0,
            mean_l_eff: 0.0,
            mean_l_ps: 0.0,
            mean_l_ttd: 0.0,
            mean_l_pc: 0.0,
            max_phase_modulus_residual: 0.0,
            max_attention_row_error: 0.0,
            permutations_valid: true,
        };
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            model.load_flat(&theta)?;
            g.clear();
            let vars = g.inputs(&theta);
            let batch: Vec<ChannelFeatureTensor> =
                chunk.iter().map(|&i| tensors[i].clone()).collect();
            let mut stats = AttentionStats::default();
            let outputs = model
                .forward(&mut g, &vars, &batch, &mut stats)
                .map_err(|e| diverged(epoch, bi, e))?;
            g.check_finite().map_err(|e| diverged(epoch, bi, e))?;
            row.max_attention_row_error = row.max_attention_row_error.max(stats.max_row_error);

            let inv_b = 1.0 / chunk.len() as f64;
            let mut pull = Vec::new();
            for (&i, y) in chunk.iter().zip(&outputs) {
                let yv: Vec<f64> = y.iter().map(|&v| g.value(v)).collect();
                let mut ev = LossEvaluator::new(
                    &instances[i],
                    params,
                    ConfigMode::Adaptive,
                    limit,
                    cfg.loss,
                )?
                .with_cartesian_phases();
                let b = ev
                    .value_and_grad(&yv, &mut gy)
                    .map_err(|e| diverged(epoch, bi, e))?;
                for (s, v) in sums
                    .iter_mut()
                    .zip([b.total, b.l_eff, b.l_ps, b.l_ttd, b.l_pc])
                {
                    *s += v;
                }
                let set = ev.decode(&yv)?;
                row.permutations_valid &= set.switches.is_valid();
                for c in yv[..n_phase].chunks_exact(2) {
                    let r = (c[0].hypot(c[1]) - 1.0).abs();
                    row.max_phase_modulus_residual = row.max_phase_modulus_residual.max(r);
                }
                pull.extend(y.iter().zip(&gy).map(|(&v, &d)| (v, d * inv_b)));
            }
            let surrogate = g.lin_comb(&pull, 0.0);
            g.backward_into(surrogate, &mut adj);
            for (gr, v) in grad.iter_mut().zip(&vars) {
                *gr = adj[v.index()];
            }
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}, batch {bi}: non-finite gradient"
                )));
            }
            let progress = step as f64 / total_steps;
            let floor = cfg.final_lr_fraction.clamp(0.0, 1.0);
            let lr = cfg.learning_rate
                * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            adam.step(&mut theta, &grad, lr);
            step += 1;
        }
        let n = instances.len() as f64;
        row.mean_total = sums[0] / n;
        row.mean_l_eff = sums[1] / n;
        row.mean_l_ps = sums[2] / n;
        row.mean_l_ttd = sums[3] / n;
        row.mean_l_pc = sums[4] / n;
        curve.push(row);
    }
    model.load_flat(&theta)?;
    Ok(TrainReport { model, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient;
    use crate::channel::{generate_channel, sample_scenario, SamplingRegion};
    use crate::params::ArrayGeometry;

    fn tiny() -> SystemParams {
        SystemParams {
            num_antennas: 16,
            num_ttds_per_chain: 4,
            num_subcarriers: 4,
            ..SystemParams::desk()
        }
    }

    fn channels(p: &SystemParams, n: usize) -> Vec<ChannelInstance> {
        let geom = ArrayGeometry::ula(p);
        (0..n)
            .map(|i| {
                let s = sample_scenario(p, &SamplingRegion::default(), 100 + i as u64);
                generate_channel(p, &geom, &s).unwrap()
            })
            .collect()
    }

    #[test]
    fn rejects_non_tiny_sizes() {
        let p = SystemParams::desk();
        assert!(matches!(
            TinyModel::new(&p, ModelConfig::default()),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn parameter_round_trip_and_output_size() {
        let p = tiny();
        let m = TinyModel::new(&p, ModelConfig::default()).unwrap();
        let mut m2 = TinyModel::new(
            &p,
            ModelConfig {
                seed: 9,
                ..ModelConfig::default()
            },
        )
        .unwrap();
        assert_ne!(m, m2);
        m2.load_flat(&m.to_flat()).unwrap();
        assert_eq!(m.to_flat(), m2.to_flat());
        let h = &channels(&p, 1)[0];
        let y = m.output_values(h).unwrap();
        assert_eq!(y.len(), 2 * 16 * 2 + 4 * 2 + 2 * 4 * 2 * 2 + 2 * 16);
        let set = m
            .predict(
                h,
                &p,
                DelayLimit::Bounded(p.max_delay_seconds),
                &LossConfig::default(),
            )
            .unwrap();
        assert!(set.switches.is_valid());
    }

    #[test]
    fn whole_network_gradient() {
        let p = SystemParams {
            num_antennas: 4,
            num_ttds_per_chain: 2,
            num_subcarriers: 4,
            ..SystemParams::desk()
        };
        let cfg = ModelConfig {
            encoder_blocks: 1,
            key_dim: 2,
            decoder_hidden: 3,
            ..ModelConfig::default()
        };
        let model = TinyModel::new(&p, cfg).unwrap();
        let hs = channels(&p, 2);
        let batch: Vec<ChannelFeatureTensor> =
            hs.iter().map(ChannelFeatureTensor::from_instance).collect();
        let res = check_gradient(
            |g, v| {
                let y = model.forward(g, v, &batch, &mut AttentionStats::default())?;
                let terms: Vec<(Var, f64)> = y
                    .iter()
                    .flatten()
                    .enumerate()
                    .map(|(i, &x)| (x, 1.0 + (i % 5) as f64 * 0.1))
                    .collect();
                Ok(g.lin_comb(&terms, 0.0))
            },
            &model.to_flat(),
            1e-6,
        )
        .unwrap();
        assert!(res.max_rel_error < 1e-5, "{}", res.max_rel_error);
    }

    #[test]
    fn short_training_reduces_loss() {
        let p = tiny();
        let hs = channels(&p, 8);
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let r = mini_train(&p, &hs, &cfg).unwrap();
        assert_eq!(r.curve.len(), 6);
        assert!(r
            .curve
            .iter()
            .all(|e| e.permutations_valid && e.max_attention_row_error < 1e-9));
        assert!(r.curve[5].mean_total < r.curve[0].mean_total);
    }
}
