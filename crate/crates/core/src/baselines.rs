//! Reference designs: fully digital precoding, unlimited-range TTDs, phase
//! shifters only, and the closed-form matched-delay design for a single
//! line-of-sight user.

use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex64;

use crate::beamformer::{
    BeamformerSet, ConfigMode, ConstraintResiduals, DelayBank, DelayLimit, EvalReport,
};
use crate::channel::{element_distances, ChannelInstance, Placement};
use crate::error::{Error, Result};
use crate::optimizer::{optimize_instance, OptimizerConfig, Outcome};
use crate::params::{ArrayGeometry, SystemParams, SPEED_OF_LIGHT};

#[derive(Debug, Clone)]
pub struct FullDigitalReport {
    pub report: EvalReport,
    /// Set when some subcarrier's user channels were rank deficient and a
    /// regularised inverse replaced exact zero-forcing.
    pub regularized: bool,
}

/// Water-filling of `total` over parallel channels with gain-to-noise ratios
/// `g`; returns per-channel powers.
pub fn water_filling(g: &[f64], total: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..g.len()).filter(|&i| g[i] > 0.0).collect();
    order.sort_by(|&a, &b| g[b].total_cmp(&g[a]));
    let mut p = vec![0.0; g.len()];
    // drop the weakest channel until every active level is positive
    for active in (1..=order.len()).rev() {
        let set = &order[..active];
        let inv: f64 = set.iter().map(|&i| 1.0 / g[i]).sum();
        let mu = (total + inv) / active as f64;
        if mu - 1.0 / g[set[active - 1]] > 0.0 {
            for &i in set {
                p[i] = mu - 1.0 / g[i];
            }
            return p;
        }
    }
    p
}

/// Fully digital upper bound: matched filtering for one user, otherwise
/// zero-forcing directions with water-filled user powers per subcarrier.
pub fn full_digital_baseline(
    h: &ChannelInstance,
    params: &SystemParams,
) -> Result<FullDigitalReport> {
    let (kk, mm, nn) = (h.num_users(), h.num_subcarriers(), h.num_antennas());
    let noise = h.noise_power_watts_per_subcarrier;
    if !(noise > 0.0) {
        return Err(Error::Config(format!(
            "noise power {noise} must be positive"
        )));
    }
    let pt = params.transmit_power_watts;
    let mut rates = Array2::zeros((kk, mm));
    let mut powers: Vec<f64> = Vec::with_capacity(mm);
    let mut regularized = false;
    for m in 0..mm {
        // rows are h_k^H
        let hm = DMatrix::from_fn(kk, nn, |k, n| h.responses[[k, m, n]].conj());
        let gram = &hm * hm.adjoint();
        let scale = (0..kk).map(|k| gram[(k, k)].re).fold(0.0, f64::max);
        let inv = match gram.clone().try_inverse() {
            Some(inv) if is_well_conditioned(&gram, &inv, scale) => inv,
            _ => {
                regularized = true;
                let reg = gram
                    + DMatrix::identity(kk, kk)
                        * Complex64::new(1e-9 * scale.max(f64::MIN_POSITIVE), 0.0);
                reg.try_inverse()
                    .ok_or_else(|| Error::Diverged("singular user channel matrix".into()))?
            }
        };
        // unit-norm directions; K = 1 reduces to matched filtering
        let mut w = hm.adjoint() * inv;
        let mut gains = vec![0.0; kk];
        for k in 0..kk {
            let norm = w.column(k).norm();
            if norm > 0.0 {
                w.column_mut(k).unscale_mut(norm);
            }
            gains[k] = (hm.row(k) * w.column(k))[(0, 0)].norm_sqr() / noise;
        }
        let p = water_filling(&gains, pt);
        for k in 0..kk {
            w.column_mut(k).scale_mut(p[k].sqrt());
        }
        let y = &hm * &w;
        for k in 0..kk {
            let sig = y[(k, k)].norm_sqr();
            let interf: f64 = (0..kk)
                .filter(|&j| j != k)
                .map(|j| y[(k, j)].norm_sqr())
                .sum();
            rates[[k, m]] = (1.0 + sig / (interf + noise)).log2();
        }
        powers.push(w.iter().map(|z| z.norm_sqr()).sum::<f64>());
    }
    let total: f64 = rates.sum();
    let power_excess = powers.iter().map(|p| (p - pt).max(0.0)).fold(0.0, f64::max);
    Ok(FullDigitalReport {
        report: EvalReport {
            spectral_efficiency: total / (params.num_subcarriers + params.cyclic_prefix_len) as f64,
            per_user_rates: rates,
            power_per_subcarrier: powers,
            constraint_residuals: ConstraintResiduals {
                power: power_excess,
                ..ConstraintResiduals::default()
            },
        },
        regularized,
    })
}

fn is_well_conditioned(gram: &DMatrix<Complex64>, inv: &DMatrix<Complex64>, scale: f64) -> bool {
    let k = gram.nrows();
    let resid = (gram * inv - DMatrix::<Complex64>::identity(k, k))
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    let inv_norm = inv.iter().map(|z| z.norm()).fold(0.0, f64::max);
    resid < 1e-8 && inv_norm * scale < 1e12
}

/// Hybrid design with unlimited-range delays.
pub fn ttd_infinite_baseline(
    h: &ChannelInstance,
    params: &SystemParams,
    mode: ConfigMode,
    cfg: &OptimizerConfig,
    warm_starts: &[BeamformerSet],
) -> Result<Outcome> {
    if !mode.has_delays() {
        return Err(Error::Config(format!("{mode} has no delays to relax")));
    }
    optimize_instance(h, params, mode, DelayLimit::Unbounded, cfg, warm_starts)
}

/// Frequency-flat analog beamforming with phase shifters only.
pub fn conventional_baseline(
    h: &ChannelInstance,
    params: &SystemParams,
    cfg: &OptimizerConfig,
) -> Result<Outcome> {
    optimize_instance(
        h,
        params,
        ConfigMode::PsOnly,
        DelayLimit::Bounded(params.max_delay_seconds),
        cfg,
        &[],
    )
}

/// Closed-form single-user design for a known line-of-sight placement: one
/// independent delay per antenna, `τ_n = (max_n r_n − r_n)/c`, unit phases,
/// and the single stream at full power.
pub fn matched_delay_beamformer(
    params: &SystemParams,
    geom: &ArrayGeometry,
    user: Placement,
) -> Result<BeamformerSet> {
    if params.num_users != 1 || params.num_rf_chains != 1 {
        return Err(Error::InvalidParams(
            "matched delays need exactly one user and one RF chain".into(),
        ));
    }
    let r = element_distances(geom, user);
    let top = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tau: Vec<f64> = r.iter().map(|rn| (top - rn) / SPEED_OF_LIGHT).collect();
    let mut set = BeamformerSet::zeros(params, ConfigMode::Parallel, DelayLimit::Unbounded);
    set.delays = DelayBank {
        incremental_delays: Array2::from_shape_vec((tau.len(), 1), tau).expect("N x 1"),
        cascaded: false,
    };
    let amp = (params.transmit_power_watts / params.num_antennas as f64).sqrt();
    set.digital.weights.fill(Complex64::new(amp, 0.0));
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamformer::spectral_efficiency;
    use crate::channel::{generate_channel, sample_scenario, SamplingRegion};

    fn empty_scenario() -> crate::channel::Scenario {
        crate::channel::Scenario {
            user_placements: Vec::new(),
            scatterer_placements: Vec::new(),
            rng_seed: 0,
        }
    }

    #[test]
    fn water_filling_examples() {
        let p = water_filling(&[1.0, 1.0], 2.0);
        assert_eq!(p, vec![1.0, 1.0]);
        // second channel too weak to receive power
        let p = water_filling(&[10.0, 0.1], 1.0);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] == 0.0);
        let p = water_filling(&[2.0, 1.0, 0.5], 3.0);
        assert!((p.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        assert!((p[0] + 0.5 - (p[1] + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn single_user_matches_matched_filter_closed_form() {
        let p = SystemParams {
            num_users: 1,
            num_rf_chains: 1,
            num_antennas: 16,
            num_ttds_per_chain: 4,
            ..SystemParams::desk()
        };
        let s = sample_scenario(&p, &SamplingRegion::default(), 1);
        let h = generate_channel(&p, &ArrayGeometry::ula(&p), &s).unwrap();
        let r = full_digital_baseline(&h, &p).unwrap();
        for m in 0..p.num_subcarriers {
            let hn: f64 = h.user_channel(0, m).iter().map(|z| z.norm_sqr()).sum();
            let expect =
                (1.0 + p.transmit_power_watts * hn / h.noise_power_watts_per_subcarrier).log2();
            assert!((r.report.per_user_rates[[0, m]] - expect).abs() < 1e-12);
        }
        assert!(!r.regularized);
    }

    #[test]
    fn matched_delays_reach_the_digital_bound_for_los() {
        let p = SystemParams {
            num_users: 1,
            num_rf_chains: 1,
            num_antennas: 16,
            num_ttds_per_chain: 4,
            num_scatterers_per_user: 0,
            ..SystemParams::desk()
        };
        let geom = ArrayGeometry::ula(&p);
        let s = sample_scenario(&p, &SamplingRegion::default(), 4);
        let h = generate_channel(&p, &geom, &s).unwrap();
        let set = matched_delay_beamformer(&p, &geom, s.user_placements[0]).unwrap();
        let se = spectral_efficiency(&h, &set, &p)
            .unwrap()
            .spectral_efficiency;
        let fd = full_digital_baseline(&h, &p)
            .unwrap()
            .report
            .spectral_efficiency;
        assert!((se - fd).abs() < 1e-9 * fd);
    }

    #[test]
    fn orthogonal_users_see_no_interference() {
        let p = SystemParams {
            num_users: 2,
            num_rf_chains: 2,
            num_antennas: 4,
            num_ttds_per_chain: 2,
            num_subcarriers: 1,
            ..SystemParams::desk()
        };
        let mut resp = ndarray::Array3::zeros((2, 1, 4));
        resp[[0, 0, 0]] = Complex64::new(1e-4, 0.0);
        resp[[1, 0, 1]] = Complex64::new(0.0, 2e-4);
        let h = ChannelInstance::from_responses(resp, empty_scenario(), &p).unwrap();
        let r = full_digital_baseline(&h, &p).unwrap().report;
        // each user gets a matched filter on its own antenna
        let sigma = h.noise_power_watts_per_subcarrier;
        let g = [1e-8 / sigma, 4e-8 / sigma];
        let pw = water_filling(&g, p.transmit_power_watts);
        for k in 0..2 {
            assert!((r.per_user_rates[[k, 0]] - (1.0 + pw[k] * g[k]).log2()).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_deficient_users_are_flagged() {
        let p = SystemParams {
            num_users: 2,
            num_rf_chains: 2,
            num_antennas: 4,
            num_ttds_per_chain: 2,
            num_subcarriers: 1,
            ..SystemParams::desk()
        };
        let mut resp = ndarray::Array3::zeros((2, 1, 4));
        for n in 0..4 {
            resp[[0, 0, n]] = Complex64::new(1e-4, 0.0);
            resp[[1, 0, n]] = Complex64::new(1e-4, 0.0);
        }
        let h = ChannelInstance::from_responses(resp, empty_scenario(), &p).unwrap();
        let r = full_digital_baseline(&h, &p).unwrap();
        assert!(r.regularized);
        assert!(r.report.spectral_efficiency.is_finite());
    }
}
