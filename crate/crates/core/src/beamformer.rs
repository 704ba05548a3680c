//! Hybrid beamformer representation and evaluation.
//!
//! The analog stage of RF chain `i` feeds sub-array `p` through one of the
//! chain's TTD outputs `l` (selected by a per-chain permutation) followed by a
//! per-antenna phase shifter:
//!
//! ```text
//! a[m, n, i] = φ[n, i] · exp(-j 2π f_m t[perm_i(p(n)), i])
//! ```
//!
//! where `t` are the cumulative delays of the cascaded TTD line (or the raw
//! per-antenna delays in the parallel layout).

use std::f64::consts::PI;

use ndarray::{Array2, Array3, ArrayView1, ArrayView2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelInstance;
use crate::error::{Error, Result};
use crate::params::SystemParams;

/// TTD network layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfigMode {
    /// One independent TTD per antenna.
    Parallel,
    /// Cascaded TTDs, sub-array `p` fixed to TTD output `p`.
    SerialFixed,
    /// Cascaded TTDs with a switch network choosing the output per sub-array.
    Adaptive,
    /// Phase shifters only, all delays pinned to zero.
    PsOnly,
}

impl ConfigMode {
    pub const ALL: [ConfigMode; 4] = [
        ConfigMode::Parallel,
        ConfigMode::SerialFixed,
        ConfigMode::Adaptive,
        ConfigMode::PsOnly,
    ];

    /// Number of delay groups per RF chain.
    pub fn num_groups(self, params: &SystemParams) -> usize {
        match self {
            ConfigMode::Parallel => params.num_antennas,
            _ => params.num_ttds_per_chain,
        }
    }

    pub fn is_cascaded(self) -> bool {
        matches!(self, ConfigMode::SerialFixed | ConfigMode::Adaptive)
    }

    pub fn has_delays(self) -> bool {
        !matches!(self, ConfigMode::PsOnly)
    }

    pub fn has_switches(self) -> bool {
        matches!(self, ConfigMode::Adaptive)
    }

    pub fn name(self) -> &'static str {
        match self {
            ConfigMode::Parallel => "parallel",
            ConfigMode::SerialFixed => "serial-fixed",
            ConfigMode::Adaptive => "adaptive",
            ConfigMode::PsOnly => "ps-only",
        }
    }
}

impl std::fmt::Display for ConfigMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ConfigMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "parallel" => Ok(ConfigMode::Parallel),
            "serial-fixed" | "serial" => Ok(ConfigMode::SerialFixed),
            "adaptive" => Ok(ConfigMode::Adaptive),
            "ps-only" | "conventional" => Ok(ConfigMode::PsOnly),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Range constraint on each incremental delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DelayLimit {
    Bounded(f64),
    Unbounded,
}

impl DelayLimit {
    pub fn max(self) -> f64 {
        match self {
            DelayLimit::Bounded(t) => t,
            DelayLimit::Unbounded => f64::INFINITY,
        }
    }

    pub fn is_bounded(self) -> bool {
        matches!(self, DelayLimit::Bounded(_))
    }

    /// Distance of `t` from `[0, max]`.
    pub fn violation(self, t: f64) -> f64 {
        if t < 0.0 {
            -t
        } else if t > self.max() {
            t - self.max()
        } else {
            0.0
        }
    }

    pub fn clamp(self, t: f64) -> f64 {
        t.max(0.0).min(self.max())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseShifterBank {
    /// `N × N_RF`.
    pub phases: Array2<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayBank {
    /// `G × N_RF` incremental delays in seconds.
    pub incremental_delays: Array2<f64>,
    /// Whether output `l` accumulates all stages `1..=l`.
    pub cascaded: bool,
}

impl DelayBank {
    pub fn zeros(groups: usize, chains: usize, cascaded: bool) -> Self {
        Self {
            incremental_delays: Array2::zeros((groups, chains)),
            cascaded,
        }
    }

    /// Delay seen at each TTD output.
    pub fn output_delays(&self) -> Array2<f64> {
        if !self.cascaded {
            return self.incremental_delays.clone();
        }
        let mut out = self.incremental_delays.clone();
        for mut col in out.columns_mut() {
            let mut acc = 0.0;
            col.iter_mut().for_each(|t| {
                acc += *t;
                *t = acc;
            });
        }
        out
    }
}

/// Prefix sums of a cascaded delay line: `t_l = Σ_{j≤l} t̃_j`.
pub fn cumulative_delays(incremental: &[f64]) -> Vec<f64> {
    incremental
        .iter()
        .scan(0.0, |acc, &t| {
            *acc += t;
            Some(*acc)
        })
        .collect()
}

/// Per-chain switch permutations; `perms[i][p]` is the TTD output feeding
/// sub-array `p` on chain `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchMatrix {
    pub perms: Vec<Vec<usize>>,
}

impl SwitchMatrix {
    pub fn identity(groups: usize, chains: usize) -> Self {
        Self {
            perms: vec![(0..groups).collect(); chains],
        }
    }

    /// Binary coefficient `s[p, l, i]`.
    pub fn entry(&self, p: usize, l: usize, i: usize) -> u8 {
        u8::from(self.perms[i][p] == l)
    }

    /// Largest deviation of a row or column sum from one, over all chains.
    pub fn residual(&self) -> f64 {
        let mut worst = 0usize;
        for perm in &self.perms {
            let g = perm.len();
            let mut counts = vec![0usize; g];
            for &l in perm {
                if l >= g {
                    // an out-of-range output leaves its row empty
                    worst = worst.max(1);
                } else {
                    counts[l] += 1;
                }
            }
            for c in counts {
                worst = worst.max(c.abs_diff(1));
            }
        }
        worst as f64
    }

    pub fn is_valid(&self) -> bool {
        self.residual() == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DigitalBeamformer {
    /// `M × N_RF × K`; `weights[m, .., k]` is `d_{m,k}`.
    pub weights: Array3<Complex64>,
}

impl DigitalBeamformer {
    pub fn slice_m(&self, m: usize) -> ArrayView2<'_, Complex64> {
        self.weights.slice(ndarray::s![m, .., ..])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerSet {
    pub ps: PhaseShifterBank,
    pub delays: DelayBank,
    pub switches: SwitchMatrix,
    pub digital: DigitalBeamformer,
    pub mode: ConfigMode,
    pub delay_limit: DelayLimit,
}

impl BeamformerSet {
    /// All-zero delays, identity switches, unit phases and a zero digital stage.
    pub fn zeros(params: &SystemParams, mode: ConfigMode, delay_limit: DelayLimit) -> Self {
        let g = mode.num_groups(params);
        let (n, nrf, m, k) = (
            params.num_antennas,
            params.num_rf_chains,
            params.num_subcarriers,
            params.num_users,
        );
        Self {
            ps: PhaseShifterBank {
                phases: Array2::from_elem((n, nrf), Complex64::new(1.0, 0.0)),
            },
            delays: DelayBank::zeros(g, nrf, mode.is_cascaded()),
            switches: SwitchMatrix::identity(g, nrf),
            digital: DigitalBeamformer {
                weights: Array3::zeros((m, nrf, k)),
            },
            mode,
            delay_limit,
        }
    }

    pub fn num_antennas(&self) -> usize {
        self.ps.phases.nrows()
    }

    pub fn num_rf_chains(&self) -> usize {
        self.ps.phases.ncols()
    }

    pub fn num_groups(&self) -> usize {
        self.delays.incremental_delays.nrows()
    }

    fn check_structure(&self) -> Result<()> {
        let (n, nrf) = self.ps.phases.dim();
        let (g, dc) = self.delays.incremental_delays.dim();
        if dc != nrf || self.switches.perms.len() != nrf || self.digital.weights.dim().1 != nrf {
            return Err(Error::DimensionMismatch(format!(
                "RF chain count disagrees between stages ({nrf}, {dc}, {}, {})",
                self.switches.perms.len(),
                self.digital.weights.dim().1
            )));
        }
        if g == 0 || n % g != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{g} delay groups do not partition {n} antennas"
            )));
        }
        if self.switches.perms.iter().any(|p| p.len() != g) || !self.switches.is_valid() {
            return Err(Error::InvalidSwitch(format!(
                "switch network is not a {g}x{g} permutation per chain: {:?}",
                self.switches.perms
            )));
        }
        Ok(())
    }

    /// Frequency-dependent analog beamformer `A_m` at frequency `f`.
    pub fn analog(&self, f: f64) -> Result<Array2<Complex64>> {
        self.check_structure()?;
        let (n, nrf) = self.ps.phases.dim();
        let g = self.num_groups();
        let q = n / g;
        let t = self.delays.output_delays();
        let mut a = Array2::zeros((n, nrf));
        for i in 0..nrf {
            let perm = &self.switches.perms[i];
            for p in 0..g {
                let w = Complex64::from_polar(1.0, -2.0 * PI * f * t[[perm[p], i]]);
                for n in p * q..(p + 1) * q {
                    a[[n, i]] = self.ps.phases[[n, i]] * w;
                }
            }
        }
        Ok(a)
    }

    pub fn analog_all(&self, params: &SystemParams) -> Result<Vec<Array2<Complex64>>> {
        params
            .subcarrier_frequencies()
            .into_iter()
            .map(|f| self.analog(f))
            .collect()
    }
}

/// Same as [`BeamformerSet::analog`].
pub fn build_analog(set: &BeamformerSet, f_m: f64) -> Result<Array2<Complex64>> {
    set.analog(f_m)
}

/// `‖A D‖_F²`.
pub fn transmit_power(a: &Array2<Complex64>, d: ArrayView2<'_, Complex64>) -> f64 {
    a.dot(&d).iter().map(|z| z.norm_sqr()).sum()
}

/// `h^H A D`, one entry per stream.
pub fn effective_gains(
    h: ArrayView1<'_, Complex64>,
    a: &Array2<Complex64>,
    d: ArrayView2<'_, Complex64>,
) -> Vec<Complex64> {
    let (n, nrf) = a.dim();
    let g: Vec<Complex64> = (0..nrf)
        .map(|i| (0..n).map(|r| h[r].conj() * a[[r, i]]).sum())
        .collect();
    (0..d.ncols())
        .map(|j| (0..nrf).map(|i| g[i] * d[[i, j]]).sum())
        .collect()
}

fn rate_from_gains(gains: &[Complex64], k: usize, noise: f64) -> f64 {
    let signal = gains[k].norm_sqr();
    let interference: f64 = gains
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(_, g)| g.norm_sqr())
        .sum();
    (1.0 + signal / (interference + noise)).log2()
}

/// Achievable rate of user `k` on subcarrier `m` in bit/s/Hz.
pub fn user_rate(
    h: &ChannelInstance,
    a_m: &Array2<Complex64>,
    d_m: ArrayView2<'_, Complex64>,
    k: usize,
    m: usize,
) -> Result<f64> {
    let noise = h.noise_power_watts_per_subcarrier;
    if !(noise > 0.0) {
        return Err(Error::Config(format!(
            "noise power {noise} must be positive"
        )));
    }
    if k >= h.num_users() || m >= h.num_subcarriers() {
        return Err(Error::DimensionMismatch(format!(
            "user {k} / subcarrier {m} outside {}x{}",
            h.num_users(),
            h.num_subcarriers()
        )));
    }
    if a_m.nrows() != h.num_antennas() || d_m.nrows() != a_m.ncols() || d_m.ncols() != h.num_users()
    {
        return Err(Error::DimensionMismatch(format!(
            "A is {:?}, D is {:?}, channel has N={} K={}",
            a_m.dim(),
            d_m.dim(),
            h.num_antennas(),
            h.num_users()
        )));
    }
    let gains = effective_gains(h.user_channel(k, m), a_m, d_m);
    Ok(rate_from_gains(&gains, k, noise))
}

/// Largest deviation from each constraint family; all zero iff feasible.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResiduals {
    pub ps_modulus: f64,
    pub delay_range: f64,
    pub switch_validity: f64,
    /// Excess of `‖A_m D_m‖_F²` over `P_t` in watts, worst subcarrier.
    pub power: f64,
}

impl ConstraintResiduals {
    pub fn max(&self) -> f64 {
        self.ps_modulus
            .max(self.delay_range)
            .max(self.switch_validity)
            .max(self.power)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `K × M`.
    pub per_user_rates: Array2<f64>,
    pub spectral_efficiency: f64,
    pub power_per_subcarrier: Vec<f64>,
    pub constraint_residuals: ConstraintResiduals,
}

/// Constraint residuals of a beamformer set.
pub fn validate(set: &BeamformerSet, params: &SystemParams) -> ConstraintResiduals {
    let ps_modulus = set
        .ps
        .phases
        .iter()
        .map(|z| (z.norm() - 1.0).abs())
        .fold(0.0, f64::max);
    let delay_range = set
        .delays
        .incremental_delays
        .iter()
        .map(|&t| set.delay_limit.violation(t))
        .fold(0.0, f64::max);
    let switch_validity = set.switches.residual();
    let power = match set.analog_all(params) {
        Ok(analog) => analog
            .iter()
            .enumerate()
            .map(|(m, a)| {
                (transmit_power(a, set.digital.slice_m(m)) - params.transmit_power_watts).max(0.0)
            })
            .fold(0.0, f64::max),
        Err(_) => f64::INFINITY,
    };
    ConstraintResiduals {
        ps_modulus,
        delay_range,
        switch_validity,
        power,
    }
}

/// Evaluates every user rate and the cyclic-prefix-normalised spectral efficiency.
pub fn spectral_efficiency(
    h: &ChannelInstance,
    set: &BeamformerSet,
    params: &SystemParams,
) -> Result<EvalReport> {
    let analog = set.analog_all(params)?;
    let (kk, mm) = (h.num_users(), h.num_subcarriers());
    if mm != analog.len() || set.digital.weights.dim().0 != mm {
        return Err(Error::DimensionMismatch(format!(
            "channel has {mm} subcarriers, beamformer {}",
            set.digital.weights.dim().0
        )));
    }
    let mut rates = Array2::zeros((kk, mm));
    let mut power = Vec::with_capacity(mm);
    for (m, a) in analog.iter().enumerate() {
        let d = set.digital.slice_m(m);
        for k in 0..kk {
            rates[[k, m]] = user_rate(h, a, d, k, m)?;
        }
        power.push(transmit_power(a, d));
    }
    let total: f64 = rates.sum();
    Ok(EvalReport {
        spectral_efficiency: total / (params.num_subcarriers + params.cyclic_prefix_len) as f64,
        per_user_rates: rates,
        power_per_subcarrier: power,
        constraint_residuals: validate(set, params),
    })
}

/// Scales each `D_m` whose transmit power exceeds `P_t` back onto the budget.
pub fn project_power(set: &BeamformerSet, params: &SystemParams) -> Result<BeamformerSet> {
    let analog = set.analog_all(params)?;
    let mut out = set.clone();
    for (m, a) in analog.iter().enumerate() {
        let p = transmit_power(a, set.digital.slice_m(m));
        if p > params.transmit_power_watts {
            let scale = (params.transmit_power_watts / p).sqrt();
            out.digital
                .weights
                .slice_mut(ndarray::s![m, .., ..])
                .mapv_inplace(|z| z * scale);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(n: usize, l: usize, nrf: usize, k: usize, m: usize) -> SystemParams {
        SystemParams {
            num_antennas: n,
            num_ttds_per_chain: l,
            num_rf_chains: nrf,
            num_users: k,
            num_subcarriers: m,
            ..SystemParams::desk()
        }
    }

    #[test]
    fn cumulative_examples() {
        assert_eq!(cumulative_delays(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(cumulative_delays(&[1.0, 2.0, 4.0]), vec![1.0, 3.0, 7.0]);
        let line = cumulative_delays(&[80e-12; 32]);
        assert!((line[31] - 2.56e-9).abs() < 1e-21);
    }

    #[test]
    fn single_group_zero_delay_returns_phases() {
        let p = tiny_params(4, 1, 1, 1, 1);
        let mut set = BeamformerSet::zeros(&p, ConfigMode::SerialFixed, DelayLimit::Bounded(1e-10));
        for (n, z) in set.ps.phases.iter_mut().enumerate() {
            *z = Complex64::from_polar(1.0, 0.3 * n as f64);
        }
        let a = set.analog(100e9).unwrap();
        assert_eq!(a, set.ps.phases);
    }

    #[test]
    fn swapped_switch_routes_longer_delay_to_first_block() {
        let p = tiny_params(4, 2, 1, 1, 1);
        let tau = 13e-12;
        let f = 97e9;
        let mut set = BeamformerSet::zeros(&p, ConfigMode::Adaptive, DelayLimit::Unbounded);
        set.delays.incremental_delays[[0, 0]] = tau;
        set.delays.incremental_delays[[1, 0]] = tau;
        set.switches.perms[0] = vec![1, 0];
        let a = set.analog(f).unwrap();
        // general per-antenna form: a_n = φ_n Σ_l s̃_{n,l} exp(-j2πf t_l)
        let t = [tau, 2.0 * tau];
        for n in 0..4 {
            let block = n / 2;
            let mut expect = Complex64::new(0.0, 0.0);
            for (l, tl) in t.iter().enumerate() {
                let s = if set.switches.perms[0][block] == l {
                    1.0
                } else {
                    0.0
                };
                expect += s * Complex64::from_polar(1.0, -2.0 * PI * f * tl);
            }
            assert!((a[[n, 0]] - expect).norm() < 1e-12);
        }
        assert!((a[[0, 0]] - Complex64::from_polar(1.0, -2.0 * PI * f * 2.0 * tau)).norm() < 1e-12);
        assert!((a[[2, 0]] - Complex64::from_polar(1.0, -2.0 * PI * f * tau)).norm() < 1e-12);
    }

    #[test]
    fn invalid_switch_is_structural_error() {
        let p = tiny_params(4, 2, 1, 1, 1);
        let mut set = BeamformerSet::zeros(&p, ConfigMode::Adaptive, DelayLimit::Unbounded);
        set.switches.perms[0] = vec![0, 0];
        assert!(matches!(set.analog(1e11), Err(Error::InvalidSwitch(_))));
        assert_eq!(set.switches.residual(), 1.0);
    }

    #[test]
    fn validate_reports_individual_violations() {
        let p = tiny_params(4, 2, 1, 1, 1);
        let tmax = 80e-12;
        let mut set = BeamformerSet::zeros(&p, ConfigMode::SerialFixed, DelayLimit::Bounded(tmax));
        set.ps.phases[[1, 0]] = Complex64::new(1.1, 0.0);
        set.delays.incremental_delays[[1, 0]] = tmax + 1e-12;
        let r = validate(&set, &p);
        assert!((r.ps_modulus - 0.1).abs() < 1e-12);
        assert!((r.delay_range - 1e-12).abs() < 1e-24);
        assert_eq!(r.switch_validity, 0.0);
        assert_eq!(r.power, 0.0);
    }

    #[test]
    fn delay_limit_clamps_and_measures() {
        let lim = DelayLimit::Bounded(2.0);
        assert_eq!(lim.clamp(3.0), 2.0);
        assert_eq!(lim.clamp(-1.0), 0.0);
        assert_eq!(lim.violation(-0.5), 0.5);
        assert_eq!(DelayLimit::Unbounded.violation(1e9), 0.0);
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in ConfigMode::ALL {
            assert_eq!(mode.name().parse::<ConfigMode>().unwrap(), mode);
        }
    }
}
