//! Unsupervised loss: negative spectral efficiency plus hardware penalties,
//! with a differentiable recording on a [`DiffGraph`].
//!
//! The graph never materialises the `N × N_RF` analog matrix per subcarrier.
//! Antennas sharing a delay group are first combined with the channel
//! (`c = Σ_{n∈p} h_n^* e^{jα_n}`), then groups are combined with their delay
//! phasors. Transmit power uses the Gram matrix `A_m^H A_m` in the same way.

use std::f64::consts::{LN_2, PI};

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian_max, CostMatrix};
use crate::autodiff::{softplus, CVar, DiffGraph, GradCheck, Var};
use crate::beamformer::{
    spectral_efficiency, transmit_power, BeamformerSet, ConfigMode, DelayBank, DelayLimit,
    DigitalBeamformer, PhaseShifterBank, SwitchMatrix,
};
use crate::channel::ChannelInstance;
use crate::error::{Error, Result};
use crate::params::SystemParams;

/// Delays inside the graph are expressed in picoseconds.
pub const PICOSECOND: f64 = 1e-12;

/// Added to `‖A_m R_m‖²` before normalising the digital stage.
pub const POWER_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerPenalty {
    /// `(Σ_m ‖A_m D_m‖² − P_t)²`.
    Aggregate,
    /// `Σ_m (‖A_m D_m‖² − P_t)_+²`.
    PerSubcarrier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DigitalDecoding {
    /// `D_m = R_m`.
    Raw,
    /// `D_m = √P_t · R_m / ‖A_m R_m‖_F`, i.e. every subcarrier at full power.
    FullPower,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyWeights {
    pub ps: f64,
    pub ttd: f64,
    pub pc: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        Self {
            ps: 1.0,
            ttd: 1.0,
            pc: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: PenaltyWeights,
    pub power_penalty: PowerPenalty,
    pub digital: DigitalDecoding,
    /// Scale of the softplus delay map, `t̃ = unit · softplus(raw)`, in seconds.
    pub delay_unit_s: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: PenaltyWeights::default(),
            power_penalty: PowerPenalty::PerSubcarrier,
            digital: DigitalDecoding::FullPower,
            delay_unit_s: 10.0 * PICOSECOND,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_eff: f64,
    /// Penalty terms are reported already multiplied by their weights.
    pub l_ps: f64,
    pub l_ttd: f64,
    pub l_pc: f64,
    pub total: f64,
}

/// Unconstrained optimisation variables for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameterization {
    pub mode: ConfigMode,
    /// `N × N_RF`, `φ = e^{jα}`.
    pub ps_angles: Array2<f64>,
    /// `G × N_RF`; empty for [`ConfigMode::PsOnly`].
    pub delay_raws: Array2<f64>,
    /// `M × N_RF × K`.
    pub digital_raws: Array3<Complex64>,
    /// One `G × G` score matrix per chain; empty unless adaptive.
    pub switch_logits: Vec<Array2<f64>>,
}

/// Inverse of the softplus map, clamped so zero delays stay finite.
pub fn softplus_inverse(y: f64) -> f64 {
    let y = y.max(1e-3);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl Parameterization {
    pub fn zeros(params: &SystemParams, mode: ConfigMode) -> Self {
        let g = mode.num_groups(params);
        let nrf = params.num_rf_chains;
        let g_delay = if mode.has_delays() { g } else { 0 };
        Self {
            mode,
            ps_angles: Array2::zeros((params.num_antennas, nrf)),
            delay_raws: Array2::zeros((g_delay, nrf)),
            digital_raws: Array3::zeros((params.num_subcarriers, nrf, params.num_users)),
            switch_logits: if mode.has_switches() {
                vec![Array2::zeros((g, g)); nrf]
            } else {
                Vec::new()
            },
        }
    }

    pub fn len(&self) -> usize {
        self.ps_angles.len()
            + self.delay_raws.len()
            + 2 * self.digital_raws.len()
            + self.switch_logits.iter().map(|s| s.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend(self.ps_angles.iter());
        v.extend(self.delay_raws.iter());
        for z in &self.digital_raws {
            v.push(z.re);
            v.push(z.im);
        }
        for s in &self.switch_logits {
            v.extend(s.iter());
        }
        v
    }

    /// Overwrites every variable from a flat vector in [`Self::to_vec`] order.
    pub fn set_from_slice(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} parameters",
                x.len(),
                self.len()
            )));
        }
        let mut it = x.iter().copied();
        self.ps_angles
            .iter_mut()
            .for_each(|a| *a = it.next().unwrap());
        self.delay_raws
            .iter_mut()
            .for_each(|a| *a = it.next().unwrap());
        for z in self.digital_raws.iter_mut() {
            *z = Complex64::new(it.next().unwrap(), it.next().unwrap());
        }
        for s in &mut self.switch_logits {
            s.iter_mut().for_each(|a| *a = it.next().unwrap());
        }
        Ok(())
    }

    /// Incremental delays in seconds.
    pub fn incremental_delays(&self, cfg: &LossConfig) -> Array2<f64> {
        self.delay_raws.mapv(|r| cfg.delay_unit_s * softplus(r))
    }

    /// Hard switch permutations from the logits, identity when not adaptive.
    pub fn permutations(&self, groups: usize, chains: usize) -> SwitchMatrix {
        if self.switch_logits.is_empty() {
            return SwitchMatrix::identity(groups, chains);
        }
        SwitchMatrix {
            perms: self
                .switch_logits
                .iter()
                .map(|s| {
                    let c = CostMatrix::new(s.clone()).expect("finite logits");
                    hungarian_max(&c).permutation
                })
                .collect(),
        }
    }

    /// Decodes into hardware parameters. Delays are not clamped here.
    pub fn decode(
        &self,
        params: &SystemParams,
        cfg: &LossConfig,
        delay_limit: DelayLimit,
    ) -> Result<BeamformerSet> {
        let mode = self.mode;
        let g = mode.num_groups(params);
        let nrf = params.num_rf_chains;
        if self
            .switch_logits
            .iter()
            .any(|s| s.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged("non-finite switch logits".into()));
        }
        let delays = if mode.has_delays() {
            DelayBank {
                incremental_delays: self.incremental_delays(cfg),
                cascaded: mode.is_cascaded(),
            }
        } else {
            DelayBank::zeros(g, nrf, false)
        };
        let mut set = BeamformerSet {
            ps: PhaseShifterBank {
                phases: self.ps_angles.mapv(|a| Complex64::from_polar(1.0, a)),
            },
            delays,
            switches: self.permutations(g, nrf),
            digital: DigitalBeamformer {
                weights: self.digital_raws.clone(),
            },
            mode,
            delay_limit,
        };
        if cfg.digital == DigitalDecoding::FullPower {
            normalize_digital(&mut set, params)?;
        }
        Ok(set)
    }

    /// Encodes an existing beamformer set; `decode(encode(s))` reproduces `s`
    /// up to the softplus floor on very small delays.
    pub fn encode(set: &BeamformerSet, cfg: &LossConfig) -> Self {
        let mode = set.mode;
        let delay_raws = if mode.has_delays() {
            set.delays
                .incremental_delays
                .mapv(|t| softplus_inverse(t / cfg.delay_unit_s))
        } else {
            Array2::zeros((0, set.num_rf_chains()))
        };
        let g = set.num_groups();
        let switch_logits = if mode.has_switches() {
            set.switches
                .perms
                .iter()
                .map(|perm| {
                    Array2::from_shape_fn((g, g), |(p, l)| f64::from(u8::from(perm[p] == l)))
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            mode,
            ps_angles: set.ps.phases.mapv(|z| z.arg()),
            delay_raws,
            digital_raws: set.digital.weights.clone(),
            switch_logits,
        }
    }
}

/// Rescales every `D_m` onto `‖A_m D_m‖² = P_t` (up to [`POWER_FLOOR`]).
pub fn normalize_digital(set: &mut BeamformerSet, params: &SystemParams) -> Result<()> {
    let analog = set.analog_all(params)?;
    for (m, a) in analog.iter().enumerate() {
        let p = transmit_power(a, set.digital.slice_m(m));
        let s = (params.transmit_power_watts / (p + POWER_FLOOR)).sqrt();
        set.digital
            .weights
            .slice_mut(ndarray::s![m, .., ..])
            .mapv_inplace(|z| z * s);
    }
    Ok(())
}

/// `−SE`, computed through the scalar evaluation path.
pub fn loss_eff(h: &ChannelInstance, set: &BeamformerSet, params: &SystemParams) -> Result<f64> {
    Ok(-spectral_efficiency(h, set, params)?.spectral_efficiency)
}

/// `Σ (|φ|² − 1)²`.
pub fn loss_ps(phases: &Array2<Complex64>) -> f64 {
    phases.iter().map(|z| (z.norm_sqr() - 1.0).powi(2)).sum()
}

/// `Σ ψ(t)` over delays in the units of `delays` (and of the bound).
pub fn loss_ttd(delays: &Array2<f64>, limit: DelayLimit) -> f64 {
    delays
        .iter()
        .map(|&t| crate::autodiff::range_penalty(t, 0.0, limit.max()))
        .sum()
}

/// Power penalty in watts².
pub fn loss_pc(set: &BeamformerSet, params: &SystemParams, kind: PowerPenalty) -> Result<f64> {
    let analog = set.analog_all(params)?;
    let powers: Vec<f64> = analog
        .iter()
        .enumerate()
        .map(|(m, a)| transmit_power(a, set.digital.slice_m(m)))
        .collect();
    let pt = params.transmit_power_watts;
    Ok(match kind {
        PowerPenalty::Aggregate => (powers.iter().sum::<f64>() - pt).powi(2),
        PowerPenalty::PerSubcarrier => powers.iter().map(|p| (p - pt).max(0.0).powi(2)).sum(),
    })
}

/// Evaluates every term of the composite loss for a decoded set, with the
/// TTD penalty measured in picoseconds.
pub fn loss_breakdown(
    h: &ChannelInstance,
    set: &BeamformerSet,
    params: &SystemParams,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let l_eff = loss_eff(h, set, params)?;
    let w = cfg.weights;
    let l_ps = w.ps * loss_ps(&set.ps.phases);
    let l_ttd = if set.mode.has_delays() {
        let ps_limit = match set.delay_limit {
            DelayLimit::Bounded(t) => DelayLimit::Bounded(t / PICOSECOND),
            DelayLimit::Unbounded => DelayLimit::Unbounded,
        };
        w.ttd
            * loss_ttd(
                &set.delays.incremental_delays.mapv(|t| t / PICOSECOND),
                ps_limit,
            )
    } else {
        0.0
    };
    let l_pc = w.pc * loss_pc(set, params, cfg.power_penalty)?;
    Ok(LossBreakdown {
        l_eff,
        l_ps,
        l_ttd,
        l_pc,
        total: l_eff + l_ps + l_ttd + l_pc,
    })
}

/// Records the composite loss of one instance on a reusable tape.
pub struct LossEvaluator<'a> {
    h: &'a ChannelInstance,
    params: &'a SystemParams,
    cfg: LossConfig,
    delay_limit: DelayLimit,
    template: Parameterization,
    graph: DiffGraph,
    adjoint: Vec<f64>,
    inputs: Vec<Var>,
    cartesian: bool,
}

impl<'a> LossEvaluator<'a> {
    pub fn new(
        h: &'a ChannelInstance,
        params: &'a SystemParams,
        mode: ConfigMode,
        delay_limit: DelayLimit,
        cfg: LossConfig,
    ) -> Result<Self> {
        params.validate()?;
        if h.num_users() != params.num_users
            || h.num_subcarriers() != params.num_subcarriers
            || h.num_antennas() != params.num_antennas
        {
            return Err(Error::DimensionMismatch(format!(
                "channel {:?} does not match parameters",
                h.responses.dim()
            )));
        }
        if !(h.noise_power_watts_per_subcarrier > 0.0) {
            return Err(Error::Config("noise power must be positive".into()));
        }
        Ok(Self {
            h,
            params,
            cfg,
            delay_limit,
            template: Parameterization::zeros(params, mode),
            graph: DiffGraph::new(),
            adjoint: Vec::new(),
            inputs: Vec::new(),
            cartesian: false,
        })
    }

    /// Takes each phase-shifter coefficient as a free `(re, im)` pair instead
    /// of an angle, so the modulus penalty is active. The first block of the
    /// flat vector then holds `2·N·N_RF` values, interleaved.
    pub fn with_cartesian_phases(mut self) -> Self {
        self.cartesian = true;
        self
    }

    pub fn mode(&self) -> ConfigMode {
        self.template.mode
    }

    pub fn delay_limit(&self) -> DelayLimit {
        self.delay_limit
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        let extra = if self.cartesian {
            self.template.ps_angles.len()
        } else {
            0
        };
        self.template.len() + extra
    }

    /// Leading parameters with a true derivative; the switch logits that
    /// follow are piecewise constant.
    pub fn num_smooth_params(&self) -> usize {
        let logits: usize = self.template.switch_logits.iter().map(|l| l.len()).sum();
        self.num_params() - logits
    }

    pub fn template(&self) -> &Parameterization {
        &self.template
    }

    pub fn graph(&self) -> &DiffGraph {
        &self.graph
    }

    /// Angle-form parameters; with cartesian phases the angles are the
    /// arguments of the given coefficients.
    pub fn unflatten(&self, x: &[f64]) -> Result<Parameterization> {
        let mut p = self.template.clone();
        if self.cartesian {
            let n_ps = 2 * p.ps_angles.len();
            if x.len() != self.num_params() {
                return Err(Error::DimensionMismatch(format!(
                    "{} values for {} parameters",
                    x.len(),
                    self.num_params()
                )));
            }
            let mut flat: Vec<f64> = x[..n_ps]
                .chunks_exact(2)
                .map(|c| c[1].atan2(c[0]))
                .collect();
            flat.extend_from_slice(&x[n_ps..]);
            p.set_from_slice(&flat)?;
        } else {
            p.set_from_slice(x)?;
        }
        Ok(p)
    }

    pub fn decode(&self, x: &[f64]) -> Result<BeamformerSet> {
        let p = self.unflatten(x)?;
        if !self.cartesian {
            return p.decode(self.params, &self.cfg, self.delay_limit);
        }
        let raw = LossConfig {
            digital: DigitalDecoding::Raw,
            ..self.cfg
        };
        let mut set = p.decode(self.params, &raw, self.delay_limit)?;
        let n_ps = 2 * p.ps_angles.len();
        for (z, c) in set.ps.phases.iter_mut().zip(x[..n_ps].chunks_exact(2)) {
            *z = Complex64::new(c[0], c[1]);
        }
        if self.cfg.digital == DigitalDecoding::FullPower {
            normalize_digital(&mut set, self.params)?;
        }
        Ok(set)
    }

    /// Forward pass only.
    pub fn value(&mut self, x: &[f64]) -> Result<LossBreakdown> {
        let terms = self.record(x)?;
        Ok(self.breakdown(&terms))
    }

    /// Forward and backward pass; the gradient is in flat parameter order.
    /// In adaptive mode the logits receive the gradient of the hard
    /// permutation matrix (straight-through).
    pub fn value_and_grad(&mut self, x: &[f64], grad: &mut Vec<f64>) -> Result<LossBreakdown> {
        let terms = self.record(x)?;
        self.graph.backward_into(terms[4], &mut self.adjoint);
        grad.clear();
        grad.extend(self.inputs.iter().map(|v| self.adjoint[v.index()]));
        Ok(self.breakdown(&terms))
    }

    fn breakdown(&self, t: &[Var; 5]) -> LossBreakdown {
        let v = |x: Var| self.graph.value(x);
        LossBreakdown {
            l_eff: v(t[0]),
            l_ps: v(t[1]),
            l_ttd: v(t[2]),
            l_pc: v(t[3]),
            total: v(t[4]),
        }
    }

    fn record(&mut self, x: &[f64]) -> Result<[Var; 5]> {
        if x.len() != self.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} parameters",
                x.len(),
                self.num_params()
            )));
        }
        let p = self.params;
        let mode = self.template.mode;
        let (nn, nrf, kk, mm) = (
            p.num_antennas,
            p.num_rf_chains,
            p.num_users,
            p.num_subcarriers,
        );
        let groups = mode.num_groups(p);
        let q = nn / groups;
        let g = &mut self.graph;
        g.clear();
        self.inputs.clear();

        let mut off = 0;
        let n_ps = if self.cartesian {
            2 * nn * nrf
        } else {
            nn * nrf
        };
        let ps: Vec<Var> = x[..n_ps].iter().map(|&a| g.input(a)).collect();
        self.inputs.extend(&ps);
        off += n_ps;
        let n_delay = self.template.delay_raws.len();
        let raws: Vec<Var> = x[off..off + n_delay].iter().map(|&a| g.input(a)).collect();
        self.inputs.extend(&raws);
        off += n_delay;
        let n_dig = 2 * mm * nrf * kk;
        let dig: Vec<Var> = x[off..off + n_dig].iter().map(|&a| g.input(a)).collect();
        self.inputs.extend(&dig);
        off += n_dig;
        // R[m][i][k]
        let r_at = |m: usize, i: usize, k: usize| {
            let idx = 2 * ((m * nrf + i) * kk + k);
            CVar {
                re: dig[idx],
                im: dig[idx + 1],
            }
        };

        // hard permutations; the leaves standing in for the logits hold the
        // 0/1 entries of S so the logit gradient is ∂L/∂S
        let mut perm_leaves: Vec<Vec<Var>> = Vec::new();
        if mode.has_switches() {
            for i in 0..nrf {
                let block = &x[off + i * groups * groups..off + (i + 1) * groups * groups];
                let logits =
                    Array2::from_shape_vec((groups, groups), block.to_vec()).expect("block shape");
                let cm = CostMatrix::new(logits)
                    .map_err(|_| Error::Diverged("non-finite switch logits".into()))?;
                let perm = hungarian_max(&cm).permutation;
                let leaves: Vec<Var> = (0..groups * groups)
                    .map(|idx| g.input(f64::from(u8::from(perm[idx / groups] == idx % groups))))
                    .collect();
                self.inputs.extend(&leaves);
                perm_leaves.push(leaves);
            }
        }

        // per-antenna phasors and their squared moduli
        let phasor: Vec<CVar> = if self.cartesian {
            ps.chunks_exact(2)
                .map(|c| CVar { re: c[0], im: c[1] })
                .collect()
        } else {
            ps.iter().map(|&a| g.c_expj(a)).collect()
        };
        let abs2: Vec<Var> = phasor.iter().map(|&z| g.c_abs2(z)).collect();

        // incremental delays (ps), outputs and per-group delays T[p][i]
        let unit_ps = self.cfg.delay_unit_s / PICOSECOND;
        let tinc: Vec<Var> = raws
            .iter()
            .map(|&r| {
                let s = g.softplus(r);
                g.scale(s, unit_ps)
            })
            .collect();
        let mut group_delay: Vec<Vec<Var>> = vec![Vec::new(); nrf];
        if mode.has_delays() {
            for i in 0..nrf {
                let mut outputs = Vec::with_capacity(groups);
                for l in 0..groups {
                    let t = tinc[l * nrf + i];
                    let out = match outputs.last() {
                        Some(&prev) if mode.is_cascaded() => g.add(prev, t),
                        _ => t,
                    };
                    outputs.push(out);
                }
                group_delay[i] = if mode.has_switches() {
                    (0..groups)
                        .map(|pp| {
                            let row = &perm_leaves[i][pp * groups..(pp + 1) * groups];
                            g.dot(row, &outputs)
                        })
                        .collect()
                } else {
                    outputs
                };
            }
        }

        let freqs = p.subcarrier_frequencies();
        // w[m][i][p] = exp(-j 2π f_m T[p][i])
        let w: Vec<Vec<Vec<CVar>>> = if mode.has_delays() {
            freqs
                .iter()
                .map(|&f| {
                    let c = -2.0 * PI * f * PICOSECOND;
                    (0..nrf)
                        .map(|i| {
                            group_delay[i]
                                .iter()
                                .map(|&t| {
                                    let th = g.scale(t, c);
                                    g.c_expj(th)
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };

        // channel normalised so the noise power is one
        let inv_sigma = 1.0 / self.h.noise_power_watts_per_subcarrier.sqrt();
        // gains[k][m][i] = Σ_n h*_n a_{n,i}
        let mut gains = vec![vec![Vec::with_capacity(nrf); mm]; kk];
        let mut terms = Vec::with_capacity(q);
        for k in 0..kk {
            for m in 0..mm {
                let h = self.h.user_channel(k, m);
                for i in 0..nrf {
                    let per_group: Vec<CVar> = (0..groups)
                        .map(|pp| {
                            terms.clear();
                            for n in pp * q..(pp + 1) * q {
                                terms.push((phasor[n * nrf + i], h[n].conj() * inv_sigma));
                            }
                            g.c_lin_comb(&terms, Complex64::new(0.0, 0.0))
                        })
                        .collect();
                    let gi = if mode.has_delays() {
                        g.c_dot(&w[m][i], &per_group)
                    } else {
                        g.c_sum(&per_group)
                    };
                    gains[k][m].push(gi);
                }
            }
        }

        // Gram entries: diagonal Σ_n |φ|², off-diagonal Σ_p conj(w_i) w_i' u_p
        let diag: Vec<Var> = (0..nrf)
            .map(|i| {
                let col: Vec<Var> = (0..nn).map(|n| abs2[n * nrf + i]).collect();
                g.sum(&col)
            })
            .collect();
        let mut pair_u: Vec<((usize, usize), Vec<CVar>)> = Vec::new();
        for i in 0..nrf {
            for j in i + 1..nrf {
                let u: Vec<CVar> = (0..groups)
                    .map(|pp| {
                        let prods: Vec<CVar> = (pp * q..(pp + 1) * q)
                            .map(|n| {
                                let a = g.c_conj(phasor[n * nrf + i]);
                                g.c_mul(a, phasor[n * nrf + j])
                            })
                            .collect();
                        g.c_sum(&prods)
                    })
                    .collect();
                pair_u.push(((i, j), u));
            }
        }

        let mut rates = Vec::with_capacity(kk * mm);
        let mut powers = Vec::with_capacity(mm);
        for m in 0..mm {
            let gram: Vec<((usize, usize), CVar)> = pair_u
                .iter()
                .map(|&((i, j), ref u)| {
                    let entry = if mode.has_delays() {
                        let v: Vec<CVar> = (0..groups)
                            .map(|pp| {
                                let a = g.c_conj(w[m][i][pp]);
                                g.c_mul(a, w[m][j][pp])
                            })
                            .collect();
                        g.c_dot(&v, u)
                    } else {
                        g.c_sum(u)
                    };
                    ((i, j), entry)
                })
                .collect();
            let mut pw_terms = Vec::new();
            for k in 0..kk {
                for i in 0..nrf {
                    let r2 = g.c_abs2(r_at(m, i, k));
                    pw_terms.push(g.mul(diag[i], r2));
                }
                for &((i, j), gij) in &gram {
                    let a = g.c_conj(r_at(m, i, k));
                    let rr = g.c_mul(a, r_at(m, j, k));
                    let z = g.c_mul(rr, gij);
                    pw_terms.push(g.scale(z.re, 2.0));
                }
            }
            let raw_power = g.sum(&pw_terms);
            let (scale2, power) = match self.cfg.digital {
                DigitalDecoding::FullPower => {
                    let den = g.add_const(raw_power, POWER_FLOOR);
                    let pt = g.constant(p.transmit_power_watts);
                    let s2 = g.div(pt, den);
                    let pw = g.mul(s2, raw_power);
                    (Some(s2), pw)
                }
                DigitalDecoding::Raw => (None, raw_power),
            };
            powers.push(power);

            for k in 0..kk {
                let mut sig = None;
                let mut interf = Vec::with_capacity(kk.saturating_sub(1));
                for j in 0..kk {
                    let d: Vec<CVar> = (0..nrf).map(|i| r_at(m, i, j)).collect();
                    let y = g.c_dot(&gains[k][m], &d);
                    let y2 = g.c_abs2(y);
                    if j == k {
                        sig = Some(y2);
                    } else {
                        interf.push(y2);
                    }
                }
                let sig = sig.expect("user k is among the streams");
                let mut interf = if interf.is_empty() {
                    g.constant(0.0)
                } else {
                    g.sum(&interf)
                };
                let mut sig = sig;
                if let Some(s2) = scale2 {
                    sig = g.mul(s2, sig);
                    interf = g.mul(s2, interf);
                }
                let den = g.add_const(interf, 1.0);
                let sinr = g.div(sig, den);
                let one_plus = g.add_const(sinr, 1.0);
                rates.push(g.ln(one_plus));
            }
        }

        let norm = -1.0 / ((p.num_subcarriers + p.cyclic_prefix_len) as f64 * LN_2);
        let rate_terms: Vec<(Var, f64)> = rates.iter().map(|&r| (r, norm)).collect();
        let l_eff = g.lin_comb(&rate_terms, 0.0);

        let ps_terms: Vec<Var> = abs2
            .iter()
            .map(|&a| {
                let d = g.add_const(a, -1.0);
                g.square(d)
            })
            .collect();
        let l_ps = g.sum(&ps_terms);

        let hi = self.delay_limit.max() / PICOSECOND;
        let ttd_terms: Vec<Var> = tinc.iter().map(|&t| g.range_penalty(t, 0.0, hi)).collect();
        let l_ttd = if ttd_terms.is_empty() {
            g.constant(0.0)
        } else {
            g.sum(&ttd_terms)
        };

        let pt = p.transmit_power_watts;
        let l_pc = match self.cfg.power_penalty {
            PowerPenalty::Aggregate => {
                let s = g.sum(&powers);
                let d = g.add_const(s, -pt);
                g.square(d)
            }
            PowerPenalty::PerSubcarrier => {
                let t: Vec<Var> = powers
                    .iter()
                    .map(|&pw| {
                        let d = g.add_const(pw, -pt);
                        let r = g.relu(d);
                        g.square(r)
                    })
                    .collect();
                g.sum(&t)
            }
        };

        let wts = self.cfg.weights;
        let l_ps = g.scale(l_ps, wts.ps);
        let l_ttd = g.scale(l_ttd, wts.ttd);
        let l_pc = g.scale(l_pc, wts.pc);
        let total = g.lin_comb(&[(l_eff, 1.0), (l_ps, 1.0), (l_ttd, 1.0), (l_pc, 1.0)], 0.0);
        g.check_finite()?;
        Ok([l_eff, l_ps, l_ttd, l_pc, total])
    }
}

/// Reverse-mode gradient of the total loss at `x` against central
/// differences with step `h · max(1, |x_i|)`, over the smooth parameters.
pub fn check_loss_gradient(ev: &mut LossEvaluator<'_>, x: &[f64], h: f64) -> Result<GradCheck> {
    let n = ev.num_smooth_params();
    let mut grad = Vec::new();
    ev.value_and_grad(x, &mut grad)?;
    grad.truncate(n);
    let mut pt = x.to_vec();
    let mut numeric = Vec::with_capacity(n);
    for i in 0..n {
        let step = h * x[i].abs().max(1.0);
        pt[i] = x[i] + step;
        let fp = ev.value(&pt)?.total;
        pt[i] = x[i] - step;
        let fm = ev.value(&pt)?.total;
        pt[i] = x[i];
        numeric.push((fp - fm) / (2.0 * step));
    }
    Ok(GradCheck::new(grad, numeric))
}

/// Composite loss and its gradient in flat parameter order.
pub fn total_loss(
    h: &ChannelInstance,
    params: &SystemParams,
    param: &Parameterization,
    delay_limit: DelayLimit,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut ev = LossEvaluator::new(h, params, param.mode, delay_limit, *cfg)?;
    let mut grad = Vec::new();
    let b = ev.value_and_grad(&param.to_vec(), &mut grad)?;
    Ok((b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_channel, sample_scenario, SamplingRegion};
    use crate::params::ArrayGeometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> SystemParams {
        SystemParams {
            num_antennas: 8,
            num_ttds_per_chain: 4,
            num_rf_chains: 2,
            num_users: 2,
            num_subcarriers: 3,
            num_scatterers_per_user: 1,
            ..SystemParams::desk()
        }
    }

    fn instance(p: &SystemParams, seed: u64) -> ChannelInstance {
        let s = sample_scenario(p, &SamplingRegion::default(), seed);
        generate_channel(p, &ArrayGeometry::ula(p), &s).unwrap()
    }

    fn random_point(p: &SystemParams, mode: ConfigMode, rng: &mut ChaCha8Rng) -> Parameterization {
        let mut x = Parameterization::zeros(p, mode);
        let v: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        x.set_from_slice(&v).unwrap();
        x
    }

    #[test]
    fn graph_matches_scalar_evaluation() {
        let p = small();
        let h = instance(&p, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = LossConfig::default();
        for mode in ConfigMode::ALL {
            for digital in [DigitalDecoding::Raw, DigitalDecoding::FullPower] {
                let cfg = LossConfig { digital, ..cfg };
                let x = random_point(&p, mode, &mut rng);
                let limit = DelayLimit::Bounded(15e-12);
                let (b, _) = total_loss(&h, &p, &x, limit, &cfg).unwrap();
                let set = x.decode(&p, &cfg, limit).unwrap();
                let s = loss_breakdown(&h, &set, &p, &cfg).unwrap();
                assert!((b.l_eff - s.l_eff).abs() < 1e-12, "{mode} {b:?} {s:?}");
                assert!((b.l_ttd - s.l_ttd).abs() < 1e-9 * (1.0 + s.l_ttd));
                assert!((b.l_pc - s.l_pc).abs() < 1e-12 * (1.0 + s.l_pc));
                assert!(b.l_ps.abs() < 1e-24);
            }
        }
    }

    #[test]
    fn cartesian_phases_match_scalar_and_finite_differences() {
        let p = small();
        let h = instance(&p, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let limit = DelayLimit::Bounded(15e-12);
        for digital in [DigitalDecoding::Raw, DigitalDecoding::FullPower] {
            let cfg = LossConfig {
                digital,
                ..LossConfig::default()
            };
            let mut ev = LossEvaluator::new(&h, &p, ConfigMode::Adaptive, limit, cfg)
                .unwrap()
                .with_cartesian_phases();
            let mut x: Vec<f64> = (0..ev.num_params())
                .map(|_| rng.gen_range(-1.5..1.5))
                .collect();
            if digital == DigitalDecoding::Raw {
                // keep the raw digital stage near the power budget
                let n_ps = 2 * p.num_antennas * p.num_rf_chains;
                let n_delay = p.num_ttds_per_chain * p.num_rf_chains;
                let n_dig = 2 * p.num_subcarriers * p.num_rf_chains * p.num_users;
                x[n_ps + n_delay..n_ps + n_delay + n_dig]
                    .iter_mut()
                    .for_each(|v| *v *= 0.05);
            }
            let mut grad = Vec::new();
            let b = ev.value_and_grad(&x, &mut grad).unwrap();
            let set = ev.decode(&x).unwrap();
            let s = loss_breakdown(&h, &set, &p, &cfg).unwrap();
            assert!((b.l_eff - s.l_eff).abs() < 1e-12, "{b:?} {s:?}");
            assert!((b.l_ps - s.l_ps).abs() < 1e-12 * (1.0 + s.l_ps));
            assert!((b.l_pc - s.l_pc).abs() < 1e-9 * (1.0 + s.l_pc));
            assert!(b.l_ps > 0.0);
            // logits are piecewise constant, so only the smooth block is checked
            let n_smooth = ev.num_params() - p.num_rf_chains * p.num_ttds_per_chain.pow(2);
            let fd = central_differences(&mut ev, &x, 1e-6);
            let err = (0..n_smooth).fold(0.0f64, |m, i| m.max((grad[i] - fd[i]).abs()));
            let scale = grad[..n_smooth].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err / scale < 1e-5, "{digital:?}: {}", err / scale);
        }
    }

    fn central_differences(ev: &mut LossEvaluator<'_>, x: &[f64], h: f64) -> Vec<f64> {
        let mut pt = x.to_vec();
        (0..x.len())
            .map(|i| {
                let step = h * x[i].abs().max(1.0);
                pt[i] = x[i] + step;
                let fp = ev.value(&pt).unwrap().total;
                pt[i] = x[i] - step;
                let fm = ev.value(&pt).unwrap().total;
                pt[i] = x[i];
                (fp - fm) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = small();
        let h = instance(&p, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mode in [
            ConfigMode::Parallel,
            ConfigMode::SerialFixed,
            ConfigMode::PsOnly,
        ] {
            let cfg = LossConfig {
                digital: DigitalDecoding::Raw,
                power_penalty: PowerPenalty::Aggregate,
                ..LossConfig::default()
            };
            let x = random_point(&p, mode, &mut rng);
            let mut ev = LossEvaluator::new(&h, &p, mode, DelayLimit::Bounded(8e-12), cfg).unwrap();
            let x0 = x.to_vec();
            let mut grad = Vec::new();
            ev.value_and_grad(&x0, &mut grad).unwrap();
            let numeric = central_differences(&mut ev, &x0, 1e-6);
            let diff = grad
                .iter()
                .zip(&numeric)
                .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
            let scale = grad.iter().fold(0.0f64, |m, a| m.max(a.abs()));
            assert!(diff / scale < 1e-5, "{mode}: {}", diff / scale);
        }
    }

    #[test]
    fn penalty_examples() {
        let mut ph = Array2::from_elem((2, 2), Complex64::new(1.0, 0.0));
        assert_eq!(loss_ps(&ph), 0.0);
        ph[[0, 1]] = Complex64::new(1.0, 1.0);
        assert!((loss_ps(&ph) - 1.0).abs() < 1e-15);

        let lim = DelayLimit::Bounded(80.0);
        let mut t = Array2::from_elem((3, 1), 40.0);
        assert_eq!(loss_ttd(&t, lim), 0.0);
        t[[1, 0]] = 80.5;
        assert!((loss_ttd(&t, lim) - 0.25).abs() < 1e-15);
        t[[1, 0]] = -0.5;
        assert!((loss_ttd(&t, lim) - 0.25).abs() < 1e-15);
        assert_eq!(
            loss_ttd(&Array2::from_elem((1, 1), 1e6), DelayLimit::Unbounded),
            0.0
        );
    }

    #[test]
    fn zero_digital_stage_has_no_rate_and_full_power_penalty() {
        let p = small();
        let h = instance(&p, 4);
        let set = BeamformerSet::zeros(&p, ConfigMode::SerialFixed, DelayLimit::Bounded(80e-12));
        assert_eq!(loss_eff(&h, &set, &p).unwrap(), 0.0);
        let pt = p.transmit_power_watts;
        assert_eq!(loss_pc(&set, &p, PowerPenalty::Aggregate).unwrap(), pt * pt);
    }

    #[test]
    fn full_power_decoding_is_on_budget() {
        let p = small();
        let h = instance(&p, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_point(&p, ConfigMode::Adaptive, &mut rng);
        let cfg = LossConfig::default();
        let set = x.decode(&p, &cfg, DelayLimit::Unbounded).unwrap();
        let r = crate::beamformer::spectral_efficiency(&h, &set, &p).unwrap();
        for pw in r.power_per_subcarrier {
            assert!((pw - p.transmit_power_watts).abs() < 1e-9);
        }
        assert!(set.switches.is_valid());
    }

    #[test]
    fn encode_decode_round_trip() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = LossConfig {
            digital: DigitalDecoding::Raw,
            ..LossConfig::default()
        };
        let x = random_point(&p, ConfigMode::Adaptive, &mut rng);
        let set = x.decode(&p, &cfg, DelayLimit::Unbounded).unwrap();
        let back = Parameterization::encode(&set, &cfg)
            .decode(&p, &cfg, DelayLimit::Unbounded)
            .unwrap();
        assert_eq!(back.switches, set.switches);
        for (a, b) in back
            .delays
            .incremental_delays
            .iter()
            .zip(&set.delays.incremental_delays)
        {
            assert!((a - b).abs() < 1e-20);
        }
        for (a, b) in back.ps.phases.iter().zip(&set.ps.phases) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
