//! Spherical-wave wideband channel model.
//!
//! Each user sees a line-of-sight path plus `L_k` single-bounce scatterer
//! paths. Every path contributes a frequency-dependent array response
//! `b*(f, r, θ)` whose entries are pure phases of the exact element-to-point
//! distance, scaled by a complex gain whose power follows free-space spreading
//! with medium absorption.

use std::f64::consts::PI;

use ndarray::{Array3, ArrayView1};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{db_to_linear, uca_angle, ArrayGeometry, SystemParams, SPEED_OF_LIGHT};

/// Polar position of a user or scatterer relative to the array centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub distance_m: f64,
    pub angle_rad: f64,
}

impl Placement {
    pub fn new(distance_m: f64, angle_rad: f64) -> Self {
        Self {
            distance_m,
            angle_rad,
        }
    }

    pub fn from_degrees(distance_m: f64, angle_deg: f64) -> Self {
        Self::new(distance_m, angle_deg.to_radians())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub user_placements: Vec<Placement>,
    /// `K` rows of `L_k` scatterer placements.
    pub scatterer_placements: Vec<Vec<Placement>>,
    pub rng_seed: u64,
}

/// Discrete sampling grid for placements.
///
/// Distances are drawn from `{min, min + step, …, max}` and angles from
/// `{min, min + step, …, max}` (degrees), uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingRegion {
    pub min_distance_m: f64,
    pub max_distance_m: f64,
    pub distance_step_m: f64,
    pub min_angle_deg: f64,
    pub max_angle_deg: f64,
    pub angle_step_deg: f64,
    /// Pins every user (not the scatterers) to this distance.
    #[serde(default)]
    pub fixed_user_distance_m: Option<f64>,
}

impl Default for SamplingRegion {
    fn default() -> Self {
        Self {
            min_distance_m: 5.0,
            max_distance_m: 15.0,
            distance_step_m: 0.1,
            min_angle_deg: 0.0,
            max_angle_deg: 180.0,
            angle_step_deg: 0.5,
            fixed_user_distance_m: None,
        }
    }
}

impl SamplingRegion {
    fn distance_steps(&self) -> u64 {
        ((self.max_distance_m - self.min_distance_m) / self.distance_step_m).round() as u64
    }

    fn angle_steps(&self) -> u64 {
        ((self.max_angle_deg - self.min_angle_deg) / self.angle_step_deg).round() as u64
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Placement {
        let i = rng.gen_range(0..=self.distance_steps());
        let j = rng.gen_range(0..=self.angle_steps());
        let first = (self.min_distance_m / self.distance_step_m).round();
        let distance = (first + i as f64) * self.distance_step_m;
        let angle_deg = self.min_angle_deg + j as f64 * self.angle_step_deg;
        Placement::new(distance, angle_deg.to_radians())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelInstance {
    /// Entry `[k, m, n]` is `h_{m,k,n}`.
    pub responses: Array3<Complex64>,
    pub scenario: Scenario,
    pub params_fingerprint: String,
    pub noise_power_watts_per_subcarrier: f64,
}

impl ChannelInstance {
    pub fn num_users(&self) -> usize {
        self.responses.dim().0
    }

    pub fn num_subcarriers(&self) -> usize {
        self.responses.dim().1
    }

    pub fn num_antennas(&self) -> usize {
        self.responses.dim().2
    }

    /// `h_{m,k}` as a length-`N` view.
    pub fn user_channel(&self, k: usize, m: usize) -> ArrayView1<'_, Complex64> {
        self.responses.slice(ndarray::s![k, m, ..])
    }

    /// Builds an instance from raw responses (used by deserialization and tests).
    pub fn from_responses(
        responses: Array3<Complex64>,
        scenario: Scenario,
        params: &SystemParams,
    ) -> Result<Self> {
        let (k, m, n) = responses.dim();
        if k != params.num_users || m != params.num_subcarriers || n != params.num_antennas {
            return Err(Error::DimensionMismatch(format!(
                "responses {k}x{m}x{n} do not match K={} M={} N={}",
                params.num_users, params.num_subcarriers, params.num_antennas
            )));
        }
        Ok(Self {
            responses,
            scenario,
            params_fingerprint: params.fingerprint(),
            noise_power_watts_per_subcarrier: params.noise_power_per_subcarrier(),
        })
    }
}

/// Distance from antenna `n` (0-based) to the point `p`.
pub fn element_distance(geom: &ArrayGeometry, p: Placement, n: usize) -> f64 {
    let (r, theta) = (p.distance_m, p.angle_rad);
    let sq = match *geom {
        ArrayGeometry::Ula {
            num_antennas,
            element_spacing_m,
        } => {
            let delta = n as f64 - (num_antennas as f64 - 1.0) / 2.0;
            let x = delta * element_spacing_m;
            r * r + x * x - 2.0 * r * x * theta.cos()
        }
        ArrayGeometry::Uca {
            num_antennas,
            radius_m,
        } => {
            let psi = uca_angle(n, num_antennas);
            r * r + radius_m * radius_m - 2.0 * r * radius_m * (theta - psi).cos()
        }
    };
    sq.max(0.0).sqrt()
}

/// All element distances for a placement.
pub fn element_distances(geom: &ArrayGeometry, p: Placement) -> Vec<f64> {
    (0..geom.num_antennas())
        .map(|n| element_distance(geom, p, n))
        .collect()
}

/// Near-field array response `b(f, r, θ)`, entry `n = exp(-j 2π f r_n / c)`.
pub fn array_response(geom: &ArrayGeometry, f: f64, p: Placement) -> Vec<Complex64> {
    let k = 2.0 * PI * f / SPEED_OF_LIGHT;
    (0..geom.num_antennas())
        .map(|n| Complex64::from_polar(1.0, -k * element_distance(geom, p, n)))
        .collect()
}

/// Linear path loss `(4π f r / c)² · exp(k_abs r)`.
pub fn path_loss(f: f64, r: f64, k_abs: f64) -> f64 {
    let spread = 4.0 * PI * f * r / SPEED_OF_LIGHT;
    spread * spread * (k_abs * r).exp()
}

/// Draws user and scatterer placements on the region grid, reproducibly.
pub fn sample_scenario(params: &SystemParams, region: &SamplingRegion, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users = Vec::with_capacity(params.num_users);
    let mut scatterers = Vec::with_capacity(params.num_users);
    for _ in 0..params.num_users {
        let mut u = region.sample(&mut rng);
        if let Some(r) = region.fixed_user_distance_m {
            u.distance_m = r;
        }
        users.push(u);
        scatterers.push(
            (0..params.num_scatterers_per_user)
                .map(|_| region.sample(&mut rng))
                .collect(),
        );
    }
    Scenario {
        user_placements: users,
        scatterer_placements: scatterers,
        rng_seed: seed,
    }
}

/// Minimum admissible element distance: ten half-wavelengths.
pub fn min_element_distance(params: &SystemParams) -> f64 {
    10.0 * params.wavelength_m() / 2.0
}

/// Generates `h_{m,k}` for every user and subcarrier.
///
/// Path gains have modulus `sqrt(G_r G_t / η(f_m, r_k))` (times `sqrt(Λ)` for
/// scatterer paths) and i.i.d. uniform phases drawn from a stream derived from
/// `scenario.rng_seed`, so the result is a pure function of its inputs.
pub fn generate_channel(
    params: &SystemParams,
    geom: &ArrayGeometry,
    scenario: &Scenario,
) -> Result<ChannelInstance> {
    params.validate()?;
    let (kk, mm, nn) = (
        params.num_users,
        params.num_subcarriers,
        params.num_antennas,
    );
    if geom.num_antennas() != nn {
        return Err(Error::DimensionMismatch(format!(
            "geometry has {} antennas, params {}",
            geom.num_antennas(),
            nn
        )));
    }
    if scenario.user_placements.len() != kk || scenario.scatterer_placements.len() != kk {
        return Err(Error::DimensionMismatch(format!(
            "scenario has {} users, params {}",
            scenario.user_placements.len(),
            kk
        )));
    }
    if let Some(row) = scenario
        .scatterer_placements
        .iter()
        .find(|row| row.len() != params.num_scatterers_per_user)
    {
        return Err(Error::DimensionMismatch(format!(
            "{} scatterers for a user, params {}",
            row.len(),
            params.num_scatterers_per_user
        )));
    }

    let min_dist = min_element_distance(params);
    let all_points = scenario
        .user_placements
        .iter()
        .chain(scenario.scatterer_placements.iter().flatten());
    let mut distances = Vec::new();
    for p in all_points {
        let d = element_distances(geom, *p);
        if let Some(dmin) = d.iter().copied().reduce(f64::min) {
            if !(dmin >= min_dist) {
                return Err(Error::DegeneratePlacement(format!(
                    "point at r={} m, θ={} rad is {dmin} m from an antenna",
                    p.distance_m, p.angle_rad
                )));
            }
        }
        distances.push(d);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.rng_seed);
    rng.set_stream(1);
    let gain = db_to_linear(params.tx_gain_db) * db_to_linear(params.rx_gain_db);
    let scatter = db_to_linear(params.scattering_loss_db);
    let freqs = params.subcarrier_frequencies();
    let paths_per_user = 1 + params.num_scatterers_per_user;

    let mut h = Array3::<Complex64>::zeros((kk, mm, nn));
    for k in 0..kk {
        let r_k = scenario.user_placements[k].distance_m;
        for (m, &f) in freqs.iter().enumerate() {
            let base = gain / path_loss(f, r_k, params.absorption_coeff_per_meter);
            let wavenumber = 2.0 * PI * f / SPEED_OF_LIGHT;
            for l in 0..paths_per_user {
                let power = if l == 0 { base } else { base * scatter };
                let phase = rng.gen_range(0.0..2.0 * PI);
                if power == 0.0 {
                    continue;
                }
                let beta = Complex64::from_polar(power.sqrt(), phase);
                let dist = &distances[if l == 0 {
                    k
                } else {
                    kk + k * params.num_scatterers_per_user + l - 1
                }];
                for n in 0..nn {
                    // conjugated response: exp(+j 2π f r_n / c)
                    h[[k, m, n]] += beta * Complex64::from_polar(1.0, wavenumber * dist[n]);
                }
            }
        }
    }

    Ok(ChannelInstance {
        responses: h,
        scenario: scenario.clone(),
        params_fingerprint: params.fingerprint(),
        noise_power_watts_per_subcarrier: params.noise_power_per_subcarrier(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ArrayGeometry;

    fn ula(n: usize) -> ArrayGeometry {
        ArrayGeometry::Ula {
            num_antennas: n,
            element_spacing_m: 1.5e-3,
        }
    }

    #[test]
    fn broadside_distances_are_symmetric() {
        let g = ula(8);
        let p = Placement::new(7.0, PI / 2.0);
        for n in 0..4 {
            let a = element_distance(&g, p, n);
            let b = element_distance(&g, p, 7 - n);
            assert!((a - b).abs() < 1e-12);
            let delta = n as f64 - 3.5;
            assert!((a - (49.0 + delta * delta * 1.5e-3 * 1.5e-3).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_element_distance_is_range() {
        let g = ula(1);
        assert_eq!(element_distance(&g, Placement::new(3.25, 1.0), 0), 3.25);
    }

    #[test]
    fn coincident_uca_point_has_zero_distance() {
        let g = ArrayGeometry::Uca {
            num_antennas: 16,
            radius_m: 0.5,
        };
        let n = 5;
        let p = Placement::new(0.5, uca_angle(n, 16));
        assert!(element_distance(&g, p, n) < 1e-7);
    }

    #[test]
    fn single_element_response() {
        let g = ula(1);
        let f = 100e9;
        let b = array_response(&g, f, Placement::new(4.0, 0.3));
        let expect = Complex64::from_polar(1.0, -2.0 * PI * f * 4.0 / SPEED_OF_LIGHT);
        assert!((b[0] - expect).norm() < 1e-12);
    }

    #[test]
    fn path_loss_unit_argument_and_square_law() {
        let f = 100e9;
        let r0 = SPEED_OF_LIGHT / (4.0 * PI * f);
        assert!((path_loss(f, r0, 0.0) - 1.0).abs() < 1e-12);
        let ratio = path_loss(f, 2.0, 0.0) / path_loss(f, 1.0, 0.0);
        assert!((ratio - 4.0).abs() < 1e-12);
    }

    #[test]
    fn path_loss_reference_value() {
        // (4π·1e11·10 / 2.998e8)² evaluated independently
        let x = 4.0 * PI * 1e11 * 10.0 / 299_792_458.0;
        let eta = path_loss(100e9, 10.0, 0.0);
        assert!((eta - x * x).abs() / eta < 1e-14);
        assert!((eta / 1.757e9 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn absorption_multiplies_exponentially() {
        let a = path_loss(100e9, 10.0, 0.0);
        let b = path_loss(100e9, 10.0, 0.01);
        assert!((b / a - (0.1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn generation_rejects_mismatched_scenario() {
        let p = SystemParams::desk();
        let g = ArrayGeometry::ula(&p);
        let mut s = sample_scenario(&p, &SamplingRegion::default(), 1);
        s.user_placements.pop();
        assert!(matches!(
            generate_channel(&p, &g, &s),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn generation_rejects_points_inside_the_array() {
        let p = SystemParams {
            num_scatterers_per_user: 0,
            num_users: 1,
            num_rf_chains: 1,
            ..SystemParams::desk()
        };
        let g = ArrayGeometry::uca(&p);
        let s = Scenario {
            // just off element 0 of the circle
            user_placements: vec![Placement::new(
                match g {
                    ArrayGeometry::Uca { radius_m, .. } => radius_m + 1e-3,
                    _ => unreachable!(),
                },
                crate::params::uca_angle(0, p.num_antennas),
            )],
            scatterer_placements: vec![vec![]],
            rng_seed: 0,
        };
        assert!(matches!(
            generate_channel(&p, &g, &s),
            Err(Error::DegeneratePlacement(_))
        ));
    }

    #[test]
    fn sampled_grid_is_exact() {
        let p = SystemParams::desk();
        let s = sample_scenario(&p, &SamplingRegion::default(), 3);
        for u in s
            .user_placements
            .iter()
            .chain(s.scatterer_placements.iter().flatten())
        {
            let tenths = u.distance_m * 10.0;
            assert!((tenths - tenths.round()).abs() < 1e-9);
            let half_deg = u.angle_rad.to_degrees() * 2.0;
            assert!((half_deg - half_deg.round()).abs() < 1e-9);
        }
    }
}
