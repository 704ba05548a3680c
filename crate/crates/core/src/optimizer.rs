//! Per-instance gradient descent on the composite loss.
//!
//! Each run starts from a channel-derived initial point (delays estimated
//! blindly from phase slopes across subcarriers, phases from a unit-modulus
//! eigenvector fit, regularised zero-forcing digital weights), a few seeded
//! perturbations of it, and any caller-supplied warm starts. Every candidate
//! is made hardware-feasible before it is scored, and the best spectral
//! efficiency wins. A warm start is also scored as-is, so a run never reports
//! less than the solutions it was seeded with.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian_max, CostMatrix};
use crate::beamformer::{
    project_power, spectral_efficiency, BeamformerSet, ConfigMode, DelayBank, DelayLimit,
    EvalReport, SwitchMatrix,
};
use crate::channel::ChannelInstance;
use crate::error::{Error, Result};
use crate::objective::{
    normalize_digital, DigitalDecoding, LossBreakdown, LossConfig, LossEvaluator, Parameterization,
};
use crate::params::SystemParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Adam direction, step halved whenever the loss would increase.
    Adam,
    /// Plain gradient step with the same halving rule.
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub max_iters: usize,
    /// Descents from the initial point and its perturbations.
    pub num_restarts: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Relative loss decrease below which an iteration counts as stalled.
    pub convergence_tol: f64,
    pub step_rule: StepRule,
    /// Half-width of the uniform perturbation applied to angles and delay
    /// variables for restarts after the first.
    pub perturbation: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-2,
            max_iters: 200,
            num_restarts: 5,
            seed: 0,
            loss: LossConfig::default(),
            convergence_tol: 1e-9,
            step_rule: StepRule::Adam,
            perturbation: 0.3,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || self.max_iters == 0 || self.num_restarts == 0 {
            return Err(Error::Config(
                "step size, iteration budget and restart count must be positive".into(),
            ));
        }
        if !(self.loss.delay_unit_s > 0.0) {
            return Err(Error::Config("delay unit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub restart: usize,
    pub iteration: usize,
    pub l_eff: f64,
    pub l_ps: f64,
    pub l_ttd: f64,
    pub l_pc: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub set: BeamformerSet,
    pub report: EvalReport,
    /// Accepted iterates of every descent, tagged with the restart index.
    pub trace: Vec<TraceRow>,
    /// Index of the winning candidate: restarts first, then warm starts.
    pub best_candidate: usize,
    /// False when the winning descent ran out of iterations before stalling.
    pub converged: bool,
}

/// Clamps delays, renormalises the digital stage if configured, and projects
/// onto the power budget.
pub fn finalize(
    set: &BeamformerSet,
    params: &SystemParams,
    cfg: &LossConfig,
) -> Result<BeamformerSet> {
    let mut out = set.clone();
    let limit = out.delay_limit;
    out.delays
        .incremental_delays
        .mapv_inplace(|t| limit.clamp(t));
    if cfg.digital == DigitalDecoding::FullPower {
        normalize_digital(&mut out, params)?;
    }
    project_power(&out, params)
}

/// Reinterprets a warm start for another mode or delay limit when the
/// hardware it describes is realisable there unchanged.
pub fn retarget(set: &BeamformerSet, mode: ConfigMode, limit: DelayLimit) -> Option<BeamformerSet> {
    let compatible =
        set.mode == mode || (set.mode == ConfigMode::SerialFixed && mode == ConfigMode::Adaptive);
    if !compatible {
        return None;
    }
    if set
        .delays
        .incremental_delays
        .iter()
        .any(|&t| limit.violation(t) > 0.0)
    {
        return None;
    }
    let mut out = set.clone();
    out.mode = mode;
    out.delay_limit = limit;
    Some(out)
}

/// Relative propagation delay of each antenna for user `k`, estimated from
/// the phase progression across adjacent subcarriers; the returned values are
/// the delays that align every antenna to the latest one.
pub fn estimate_delays(h: &ChannelInstance, k: usize, params: &SystemParams) -> Vec<f64> {
    let (mm, nn) = (h.num_subcarriers(), h.num_antennas());
    if mm < 2 || nn == 0 {
        return vec![0.0; nn];
    }
    let df = params.bandwidth_hz / params.num_subcarriers as f64;
    let mut rho = vec![0.0; nn];
    for n in 1..nn {
        let mut acc = Complex64::new(0.0, 0.0);
        for m in 0..mm - 1 {
            let a = h.responses[[k, m + 1, n]] * h.responses[[k, m, n]].conj();
            let b = h.responses[[k, m + 1, n - 1]] * h.responses[[k, m, n - 1]].conj();
            acc += a * b.conj();
        }
        rho[n] = rho[n - 1] + acc.arg() / (2.0 * PI * df);
    }
    let top = rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    rho.iter().map(|r| top - r).collect()
}

/// `Σ_m |Σ_n exp(-j2π(f_m − f_c) e_n)|²` for residual delays `e`.
fn coherence(residual: &[f64], freqs: &[f64], fc: f64) -> f64 {
    freqs
        .iter()
        .map(|&f| {
            let w = -2.0 * PI * (f - fc);
            residual
                .iter()
                .map(|&e| Complex64::from_polar(1.0, w * e))
                .sum::<Complex64>()
                .norm_sqr()
        })
        .sum()
}

fn offsets(targets: &[f64], limit: DelayLimit) -> Vec<f64> {
    match limit {
        DelayLimit::Unbounded => vec![0.0],
        DelayLimit::Bounded(tmax) => {
            let top = targets.iter().copied().fold(0.0, f64::max);
            let steps = 64;
            (0..=steps)
                .map(|j| -tmax + (top + tmax) * j as f64 / steps as f64)
                .collect()
        }
    }
}

/// Greedy cascaded fit of non-decreasing output delays to `targets − offset`;
/// returns the incremental delays.
fn cascade_fit(targets: &[f64], offset: f64, limit: DelayLimit) -> Vec<f64> {
    let mut acc = 0.0;
    targets
        .iter()
        .map(|&t| {
            let inc = limit.clamp(t - offset - acc);
            acc += inc;
            inc
        })
        .collect()
}

/// Per-antenna delays realised by one chain's incremental delays and switch.
fn antenna_delays(inc: &[f64], perm: &[usize], cascaded: bool, q: usize) -> Vec<f64> {
    let outputs: Vec<f64> = if cascaded {
        crate::beamformer::cumulative_delays(inc)
    } else {
        inc.to_vec()
    };
    perm.iter()
        .flat_map(|&l| std::iter::repeat(outputs[l]).take(q))
        .collect()
}

struct ChainFit {
    inc: Vec<f64>,
    perm: Vec<usize>,
}

fn fit_chain(
    tau: &[f64],
    mode: ConfigMode,
    limit: DelayLimit,
    groups: usize,
    freqs: &[f64],
    fc: f64,
) -> ChainFit {
    let nn = tau.len();
    let q = nn / groups;
    let identity: Vec<usize> = (0..groups).collect();
    if !mode.has_delays() {
        return ChainFit {
            inc: vec![0.0; groups],
            perm: identity,
        };
    }
    let score = |inc: &[f64], perm: &[usize]| {
        let t = antenna_delays(inc, perm, mode.is_cascaded(), q);
        let e: Vec<f64> = tau.iter().zip(&t).map(|(a, b)| a - b).collect();
        coherence(&e, freqs, fc)
    };
    let group_targets: Vec<f64> = (0..groups)
        .map(|p| tau[p * q..(p + 1) * q].iter().sum::<f64>() / q as f64)
        .collect();

    let mut best: Option<(f64, ChainFit)> = None;
    let consider = |fit: ChainFit, best: &mut Option<(f64, ChainFit)>| {
        let s = score(&fit.inc, &fit.perm);
        if best.as_ref().map_or(true, |(b, _)| s > *b) {
            *best = Some((s, fit));
        }
    };
    for o in offsets(&group_targets, limit) {
        match mode {
            ConfigMode::Parallel => {
                let inc = group_targets.iter().map(|&t| limit.clamp(t - o)).collect();
                consider(
                    ChainFit {
                        inc,
                        perm: identity.clone(),
                    },
                    &mut best,
                );
            }
            ConfigMode::SerialFixed => {
                let inc = cascade_fit(&group_targets, o, limit);
                consider(
                    ChainFit {
                        inc,
                        perm: identity.clone(),
                    },
                    &mut best,
                );
            }
            ConfigMode::Adaptive => {
                // rank order first, then alternate assignment and refit
                let mut order: Vec<usize> = (0..groups).collect();
                order.sort_by(|&a, &b| group_targets[a].total_cmp(&group_targets[b]));
                let mut perm = vec![0; groups];
                for (l, &p) in order.iter().enumerate() {
                    perm[p] = l;
                }
                for _ in 0..3 {
                    let mut sorted = vec![0.0; groups];
                    for (p, &l) in perm.iter().enumerate() {
                        sorted[l] = group_targets[p];
                    }
                    let inc = cascade_fit(&sorted, o, limit);
                    consider(
                        ChainFit {
                            inc: inc.clone(),
                            perm: perm.clone(),
                        },
                        &mut best,
                    );
                    let outputs = crate::beamformer::cumulative_delays(&inc);
                    let cost = Array2::from_shape_fn((groups, groups), |(p, l)| {
                        -(group_targets[p] - o - outputs[l]).powi(2)
                    });
                    let next =
                        hungarian_max(&CostMatrix::new(cost).expect("finite cost")).permutation;
                    if next == perm {
                        break;
                    }
                    perm = next;
                }
            }
            ConfigMode::PsOnly => unreachable!(),
        }
    }
    best.expect("at least one offset").1
}

/// Unit-modulus phases maximising `Σ_m |Σ_n b_{m,n} v_n|²`.
fn fit_phases(b: &[Vec<Complex64>]) -> Vec<f64> {
    let nn = b.first().map_or(0, Vec::len);
    let mid = b.len() / 2;
    let mut v: Vec<Complex64> = b[mid]
        .iter()
        .map(|z| Complex64::from_polar(1.0, -z.arg()))
        .collect();
    for _ in 0..30 {
        let mut next = vec![Complex64::new(0.0, 0.0); nn];
        for row in b {
            let s: Complex64 = row.iter().zip(&v).map(|(x, y)| x * y).sum();
            for (n, x) in row.iter().enumerate() {
                next[n] += x.conj() * s;
            }
        }
        v = next
            .iter()
            .map(|z| {
                if z.norm() > 0.0 {
                    z / z.norm()
                } else {
                    Complex64::new(1.0, 0.0)
                }
            })
            .collect();
    }
    v.iter().map(|z| z.arg()).collect()
}

/// Regularised zero-forcing `D = G^H (G G^H + λI)^{-1}` for the `K × N_RF`
/// effective channel `G`.
pub(crate) fn regularized_zf(g: &DMatrix<Complex64>, lambda: f64) -> DMatrix<Complex64> {
    let k = g.nrows();
    let gram = g * g.adjoint() + DMatrix::identity(k, k) * Complex64::new(lambda, 0.0);
    match gram.clone().try_inverse() {
        Some(inv) => g.adjoint() * inv,
        None => g.adjoint(),
    }
}

/// Channel-derived starting point for `mode`.
pub fn heuristic_init(
    h: &ChannelInstance,
    params: &SystemParams,
    mode: ConfigMode,
    limit: DelayLimit,
) -> Result<BeamformerSet> {
    params.validate()?;
    let (nn, nrf, kk, mm) = (
        params.num_antennas,
        params.num_rf_chains,
        params.num_users,
        params.num_subcarriers,
    );
    let groups = mode.num_groups(params);
    let q = nn / groups;
    let freqs = params.subcarrier_frequencies();
    let fc = params.carrier_frequency_hz;

    let mut set = BeamformerSet::zeros(params, mode, limit);
    let mut inc = Array2::zeros((groups, nrf));
    let mut perms = Vec::with_capacity(nrf);
    for i in 0..nrf {
        let user = i % kk;
        let tau = estimate_delays(h, user, params);
        let fit = fit_chain(&tau, mode, limit, groups, &freqs, fc);
        let t_ant = antenna_delays(&fit.inc, &fit.perm, mode.is_cascaded(), q);
        let b: Vec<Vec<Complex64>> = freqs
            .iter()
            .enumerate()
            .map(|(m, &f)| {
                let hrow = h.user_channel(user, m);
                (0..nn)
                    .map(|n| hrow[n].conj() * Complex64::from_polar(1.0, -2.0 * PI * f * t_ant[n]))
                    .collect()
            })
            .collect();
        for (n, a) in fit_phases(&b).into_iter().enumerate() {
            set.ps.phases[[n, i]] = Complex64::from_polar(1.0, a);
        }
        for (l, t) in fit.inc.iter().enumerate() {
            inc[[l, i]] = *t;
        }
        perms.push(fit.perm);
    }
    set.delays = DelayBank {
        incremental_delays: inc,
        cascaded: mode.is_cascaded(),
    };
    set.switches = SwitchMatrix { perms };

    let analog = set.analog_all(params)?;
    let noise = h.noise_power_watts_per_subcarrier;
    let lambda = kk as f64 * noise * nn as f64 / params.transmit_power_watts;
    let mut digital = Array3::zeros((mm, nrf, kk));
    for (m, a) in analog.iter().enumerate() {
        let g = DMatrix::from_fn(kk, nrf, |k, i| {
            let hrow = h.user_channel(k, m);
            (0..nn)
                .map(|n| hrow[n].conj() * a[[n, i]])
                .sum::<Complex64>()
        });
        let d = regularized_zf(&g, lambda);
        for i in 0..nrf {
            for k in 0..kk {
                digital[[m, i, k]] = d[(i, k)];
            }
        }
    }
    set.digital.weights = digital;
    normalize_digital(&mut set, params)?;
    Ok(set)
}

struct Descent {
    x: Vec<f64>,
    converged: bool,
}

fn descend(
    ev: &mut LossEvaluator<'_>,
    x0: Vec<f64>,
    cfg: &OptimizerConfig,
    restart: usize,
    trace: &mut Vec<TraceRow>,
) -> Result<Descent> {
    let n = x0.len();
    let mut x = x0;
    let mut grad = Vec::with_capacity(n);
    let mut cur = ev.value_and_grad(&x, &mut grad)?;
    let push = |trace: &mut Vec<TraceRow>, it: usize, b: &LossBreakdown| {
        trace.push(TraceRow {
            restart,
            iteration: it,
            l_eff: b.l_eff,
            l_ps: b.l_ps,
            l_ttd: b.l_ttd,
            l_pc: b.l_pc,
            total: b.total,
        })
    };
    push(trace, 0, &cur);

    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut step = cfg.step_size;
    let min_step = cfg.step_size * 1e-6;
    let mut stalled = 0;
    let mut t_adam = 0i32;
    let mut direction = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial_grad = Vec::with_capacity(n);

    for it in 1..=cfg.max_iters {
        match cfg.step_rule {
            StepRule::Adam => {
                t_adam += 1;
                let c1 = 1.0 - beta1.powi(t_adam);
                let c2 = 1.0 - beta2.powi(t_adam);
                for j in 0..n {
                    m1[j] = beta1 * m1[j] + (1.0 - beta1) * grad[j];
                    m2[j] = beta2 * m2[j] + (1.0 - beta2) * grad[j] * grad[j];
                    direction[j] = (m1[j] / c1) / ((m2[j] / c2).sqrt() + eps);
                }
            }
            StepRule::Backtracking => direction.copy_from_slice(&grad),
        }
        let mut accepted = false;
        while step >= min_step {
            for j in 0..n {
                trial[j] = x[j] - step * direction[j];
            }
            match ev.value_and_grad(&trial, &mut trial_grad) {
                Ok(b) if b.total <= cur.total => {
                    let gain = cur.total - b.total;
                    stalled = if gain <= cfg.convergence_tol * (1.0 + cur.total.abs()) {
                        stalled + 1
                    } else {
                        0
                    };
                    std::mem::swap(&mut x, &mut trial);
                    std::mem::swap(&mut grad, &mut trial_grad);
                    cur = b;
                    accepted = true;
                    break;
                }
                Ok(_) | Err(Error::NonFinite { .. }) | Err(Error::Diverged(_)) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            return Ok(Descent { x, converged: true });
        }
        push(trace, it, &cur);
        step = (step * 1.5).min(cfg.step_size);
        if stalled >= 5 {
            return Ok(Descent { x, converged: true });
        }
    }
    Ok(Descent {
        x,
        converged: false,
    })
}

/// Optimises one channel instance for `mode` under `limit`.
pub fn optimize_instance(
    h: &ChannelInstance,
    params: &SystemParams,
    mode: ConfigMode,
    limit: DelayLimit,
    cfg: &OptimizerConfig,
    warm_starts: &[BeamformerSet],
) -> Result<Outcome> {
    cfg.validate()?;
    let mut ev = LossEvaluator::new(h, params, mode, limit, cfg.loss)?;
    let init = heuristic_init(h, params, mode, limit)?;
    let x_init = Parameterization::encode(&init, &cfg.loss).to_vec();
    let n_angles = params.num_antennas * params.num_rf_chains;
    let n_perturbed = n_angles + ev.template().delay_raws.len();

    let mode_salt = ConfigMode::ALL.iter().position(|&m| m == mode).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2 + mode_salt);

    let mut starts: Vec<Vec<f64>> = vec![x_init.clone()];
    for _ in 1..cfg.num_restarts {
        let mut x = x_init.clone();
        for v in &mut x[..n_perturbed] {
            *v += rng.gen_range(-cfg.perturbation..=cfg.perturbation);
        }
        starts.push(x);
    }
    let warm: Vec<BeamformerSet> = warm_starts
        .iter()
        .filter_map(|s| retarget(s, mode, limit))
        .collect();
    for s in &warm {
        starts.push(Parameterization::encode(s, &cfg.loss).to_vec());
    }

    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, BeamformerSet, EvalReport, bool)> = None;
    let mut consider = |idx: usize, set: BeamformerSet, converged: bool| -> Result<()> {
        let set = finalize(&set, params, &cfg.loss)?;
        let report = spectral_efficiency(h, &set, params)?;
        let se = report.spectral_efficiency;
        if se.is_finite() && best.as_ref().map_or(true, |b| se > b.0) {
            best = Some((se, idx, set, report, converged));
        }
        Ok(())
    };
    for (idx, x0) in starts.into_iter().enumerate() {
        match descend(&mut ev, x0, cfg, idx, &mut trace) {
            Ok(d) => consider(idx, ev.decode(&d.x)?, d.converged)?,
            Err(Error::NonFinite { .. }) | Err(Error::Diverged(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let n_desc = cfg.num_restarts + warm.len();
    for (j, s) in warm.into_iter().enumerate() {
        consider(n_desc + j, s, true)?;
    }
    let (_, best_candidate, set, report, converged) =
        best.ok_or_else(|| Error::Diverged("no candidate produced a finite loss".into()))?;
    Ok(Outcome {
        set,
        report,
        trace,
        best_candidate,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_channel, sample_scenario, SamplingRegion};
    use crate::params::ArrayGeometry;

    fn small() -> SystemParams {
        SystemParams {
            num_antennas: 16,
            num_ttds_per_chain: 4,
            num_rf_chains: 2,
            num_users: 2,
            num_subcarriers: 4,
            ..SystemParams::desk()
        }
    }

    fn quick() -> OptimizerConfig {
        OptimizerConfig {
            max_iters: 30,
            num_restarts: 2,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn blind_delay_estimate_matches_geometry_for_los() {
        let p = SystemParams {
            num_users: 1,
            num_rf_chains: 1,
            num_scatterers_per_user: 0,
            ..small()
        };
        let geom = ArrayGeometry::ula(&p);
        let s = sample_scenario(&p, &SamplingRegion::default(), 3);
        let h = generate_channel(&p, &geom, &s).unwrap();
        let est = estimate_delays(&h, 0, &p);
        let r = crate::channel::element_distances(&geom, s.user_placements[0]);
        let top = r.iter().copied().fold(f64::MIN, f64::max);
        for (e, rn) in est.iter().zip(&r) {
            let truth = (top - rn) / crate::params::SPEED_OF_LIGHT;
            assert!((e - truth).abs() < 1e-15, "{e} vs {truth}");
        }
    }

    #[test]
    fn cascade_fit_respects_bounds() {
        let inc = cascade_fit(&[5.0, 3.0, 20.0, 21.0], 0.0, DelayLimit::Bounded(8.0));
        assert_eq!(inc, vec![5.0, 0.0, 8.0, 8.0]);
    }

    #[test]
    fn outcome_is_feasible_and_deterministic() {
        let p = small();
        let s = sample_scenario(&p, &SamplingRegion::default(), 12);
        let h = generate_channel(&p, &ArrayGeometry::ula(&p), &s).unwrap();
        let limit = DelayLimit::Bounded(p.max_delay_seconds);
        for mode in ConfigMode::ALL {
            let a = optimize_instance(&h, &p, mode, limit, &quick(), &[]).unwrap();
            let b = optimize_instance(&h, &p, mode, limit, &quick(), &[]).unwrap();
            assert_eq!(a.set, b.set);
            assert_eq!(
                a.report.spectral_efficiency.to_bits(),
                b.report.spectral_efficiency.to_bits()
            );
            assert!(
                a.report.constraint_residuals.max() < 1e-9,
                "{mode}: {:?}",
                a.report.constraint_residuals
            );
        }
    }

    #[test]
    fn accepted_steps_never_increase_the_loss() {
        let p = small();
        let s = sample_scenario(&p, &SamplingRegion::default(), 2);
        let h = generate_channel(&p, &ArrayGeometry::uca(&p), &s).unwrap();
        let out = optimize_instance(
            &h,
            &p,
            ConfigMode::Adaptive,
            DelayLimit::Bounded(20e-12),
            &quick(),
            &[],
        )
        .unwrap();
        for w in out.trace.windows(2) {
            if w[0].restart == w[1].restart {
                assert!(w[1].total <= w[0].total);
            }
        }
    }

    #[test]
    fn warm_start_is_never_lost() {
        let p = small();
        let s = sample_scenario(&p, &SamplingRegion::default(), 8);
        let h = generate_channel(&p, &ArrayGeometry::ula(&p), &s).unwrap();
        let lim = DelayLimit::Bounded(p.max_delay_seconds);
        let serial =
            optimize_instance(&h, &p, ConfigMode::SerialFixed, lim, &quick(), &[]).unwrap();
        let adaptive = optimize_instance(
            &h,
            &p,
            ConfigMode::Adaptive,
            lim,
            &quick(),
            &[serial.set.clone()],
        )
        .unwrap();
        assert!(adaptive.report.spectral_efficiency >= serial.report.spectral_efficiency);
        let unbounded = optimize_instance(
            &h,
            &p,
            ConfigMode::SerialFixed,
            DelayLimit::Unbounded,
            &quick(),
            &[serial.set.clone()],
        )
        .unwrap();
        assert!(unbounded.report.spectral_efficiency >= serial.report.spectral_efficiency);
    }
}
