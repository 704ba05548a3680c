//! Scenario parameters and array geometry.
//!
//! [`SystemParams`] holds every physical constant of a scenario. Two presets
//! are provided: [`SystemParams::table_one`] (the full 512-antenna system) and
//! [`SystemParams::desk`] (a reduced system that keeps the same physics and
//! runs per-instance optimization in seconds).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemParams {
    pub carrier_frequency_hz: f64,
    pub bandwidth_hz: f64,
    pub num_subcarriers: usize,
    pub cyclic_prefix_len: usize,
    pub num_antennas: usize,
    pub num_ttds_per_chain: usize,
    pub num_rf_chains: usize,
    pub num_users: usize,
    pub transmit_power_watts: f64,
    pub noise_density_dbm_per_hz: f64,
    pub max_delay_seconds: f64,
    pub tx_gain_db: f64,
    pub rx_gain_db: f64,
    pub scattering_loss_db: f64,
    pub absorption_coeff_per_meter: f64,
    pub num_scatterers_per_user: usize,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self::desk()
    }
}

impl SystemParams {
    /// The full simulation system: 512 antennas, 32 TTDs per chain, 4 users.
    pub fn table_one() -> Self {
        Self {
            carrier_frequency_hz: 100e9,
            bandwidth_hz: 10e9,
            num_subcarriers: 10,
            cyclic_prefix_len: 4,
            num_antennas: 512,
            num_ttds_per_chain: 32,
            num_rf_chains: 4,
            num_users: 4,
            transmit_power_watts: dbm_to_watts(20.0),
            noise_density_dbm_per_hz: -174.0,
            max_delay_seconds: 80e-12,
            tx_gain_db: 15.0,
            rx_gain_db: 5.0,
            scattering_loss_db: -15.0,
            absorption_coeff_per_meter: 0.0,
            num_scatterers_per_user: 4,
        }
    }

    /// Reduced system used by the experiment harness and the test-suite:
    /// 128 antennas in 8 sub-arrays, two users on two RF chains, 4 subcarriers.
    pub fn desk() -> Self {
        Self {
            num_subcarriers: 4,
            cyclic_prefix_len: 2,
            num_antennas: 128,
            num_ttds_per_chain: 8,
            num_rf_chains: 2,
            num_users: 2,
            ..Self::table_one()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if self.num_antennas == 0 || self.num_ttds_per_chain == 0 {
            return bad("antenna and TTD counts must be positive".into());
        }
        if self.num_antennas % self.num_ttds_per_chain != 0 {
            return bad(format!(
                "num_antennas {} not divisible by num_ttds_per_chain {}",
                self.num_antennas, self.num_ttds_per_chain
            ));
        }
        if self.num_subcarriers == 0 || self.num_users == 0 {
            return bad("need at least one subcarrier and one user".into());
        }
        if self.num_rf_chains < self.num_users {
            return bad(format!(
                "num_rf_chains {} < num_users {}",
                self.num_rf_chains, self.num_users
            ));
        }
        if !(self.max_delay_seconds >= 0.0) {
            return bad("max_delay_seconds must be >= 0".into());
        }
        if !(self.transmit_power_watts > 0.0) || !(self.bandwidth_hz > 0.0) {
            return bad("transmit power and bandwidth must be positive".into());
        }
        if !(self.carrier_frequency_hz > self.bandwidth_hz / 2.0) {
            return bad("carrier frequency must exceed half the bandwidth".into());
        }
        if !(self.absorption_coeff_per_meter >= 0.0) {
            return bad("absorption coefficient must be >= 0".into());
        }
        Ok(())
    }

    /// Antennas per sub-array, `N / L`.
    pub fn subarray_size(&self) -> usize {
        self.num_antennas / self.num_ttds_per_chain
    }

    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency_hz
    }

    /// Noise power of one subcarrier: density integrated over `B / M`.
    pub fn noise_power_per_subcarrier(&self) -> f64 {
        dbm_to_watts(self.noise_density_dbm_per_hz) * self.bandwidth_hz
            / self.num_subcarriers as f64
    }

    /// Frequencies of all subcarriers, in order.
    pub fn subcarrier_frequencies(&self) -> Vec<f64> {
        (1..=self.num_subcarriers)
            .map(|m| centered_frequency(self, m))
            .collect()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("params serialize");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn centered_frequency(p: &SystemParams, m: usize) -> f64 {
    let mm = p.num_subcarriers as f64;
    p.carrier_frequency_hz + p.bandwidth_hz * (2.0 * m as f64 - 1.0 - mm) / (2.0 * mm)
}

/// Frequency of subcarrier `m` (1-based).
pub fn subcarrier_frequency(m: usize, params: &SystemParams) -> Result<f64> {
    if m == 0 || m > params.num_subcarriers {
        return Err(Error::IndexOutOfRange {
            index: m,
            max: params.num_subcarriers,
        });
    }
    Ok(centered_frequency(params, m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayKind {
    Ula,
    Uca,
}

impl std::str::FromStr for ArrayKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ula" => Ok(ArrayKind::Ula),
            "uca" => Ok(ArrayKind::Uca),
            other => Err(Error::Config(format!("unknown array kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ArrayKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArrayKind::Ula => "ula",
            ArrayKind::Uca => "uca",
        })
    }
}

/// Antenna layout in the plane of the users.
///
/// ULA elements sit on a line centred at the origin; UCA elements sit on a
/// circle of radius `radius_m` at angles `2πn/N`, `n = 1..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArrayGeometry {
    Ula {
        num_antennas: usize,
        element_spacing_m: f64,
    },
    Uca {
        num_antennas: usize,
        radius_m: f64,
    },
}

impl ArrayGeometry {
    /// Half-wavelength ULA at the carrier frequency.
    pub fn ula(params: &SystemParams) -> Self {
        ArrayGeometry::Ula {
            num_antennas: params.num_antennas,
            element_spacing_m: params.wavelength_m() / 2.0,
        }
    }

    /// UCA whose diameter equals the aperture of the half-wavelength ULA,
    /// `2R = N c / f_c`.
    pub fn uca(params: &SystemParams) -> Self {
        ArrayGeometry::Uca {
            num_antennas: params.num_antennas,
            radius_m: params.num_antennas as f64 * params.wavelength_m() / 2.0,
        }
    }

    pub fn from_kind(kind: ArrayKind, params: &SystemParams) -> Self {
        match kind {
            ArrayKind::Ula => Self::ula(params),
            ArrayKind::Uca => Self::uca(params),
        }
    }

    pub fn kind(&self) -> ArrayKind {
        match self {
            ArrayGeometry::Ula { .. } => ArrayKind::Ula,
            ArrayGeometry::Uca { .. } => ArrayKind::Uca,
        }
    }

    pub fn num_antennas(&self) -> usize {
        match *self {
            ArrayGeometry::Ula { num_antennas, .. } | ArrayGeometry::Uca { num_antennas, .. } => {
                num_antennas
            }
        }
    }

    /// Cartesian position of antenna `n` (0-based).
    pub fn element_position(&self, n: usize) -> (f64, f64) {
        match *self {
            ArrayGeometry::Ula {
                num_antennas,
                element_spacing_m,
            } => {
                let delta = n as f64 - (num_antennas as f64 - 1.0) / 2.0;
                (delta * element_spacing_m, 0.0)
            }
            ArrayGeometry::Uca {
                num_antennas,
                radius_m,
            } => {
                let psi = uca_angle(n, num_antennas);
                (radius_m * psi.cos(), radius_m * psi.sin())
            }
        }
    }
}

/// Angular position `ψ = 2π(n+1)/N` of UCA element `n` (0-based).
pub(crate) fn uca_angle(n: usize, num_antennas: usize) -> f64 {
    2.0 * std::f64::consts::PI * (n as f64 + 1.0) / num_antennas as f64
}
