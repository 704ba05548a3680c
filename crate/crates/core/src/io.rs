//! On-disk containers. Datasets, beamformer sets and models are JSON with
//! shortest-round-trip floats, so a reload is bit-identical; complex arrays
//! are stored as interleaved `[re, im]` in row-major order. Tabular outputs
//! are CSV.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::beamformer::{
    BeamformerSet, ConfigMode, DelayBank, DelayLimit, DigitalBeamformer, PhaseShifterBank,
    SwitchMatrix,
};
use crate::channel::{ChannelInstance, Scenario};
use crate::error::{Error, Result};
use crate::params::{ArrayGeometry, SystemParams};

pub const FORMAT_VERSION: u32 = 1;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, value)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other:?}", path.display())),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

/// Reads a square matrix of numbers, one row per line, no header.
pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|_| {
                    Error::Format(format!("{}: `{s}` is not a number", path.display()))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn interleave<'a>(values: impl Iterator<Item = &'a Complex64>) -> Vec<f64> {
    values.flat_map(|z| [z.re, z.im]).collect()
}

fn deinterleave(values: &[f64]) -> Result<Vec<Complex64>> {
    if values.len() % 2 != 0 {
        return Err(Error::Format(
            "odd length for interleaved complex data".into(),
        ));
    }
    Ok(values
        .chunks_exact(2)
        .map(|c| Complex64::new(c[0], c[1]))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Validation,
}

/// 60/20/20 split tags in a seeded random order.
pub fn split_tags(count: usize, seed: u64) -> Vec<Split> {
    let n_train = (count as f64 * 0.6).round() as usize;
    let n_test = ((count as f64 * 0.2).round() as usize).min(count - n_train);
    let mut tags: Vec<Split> = (0..count)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + n_test {
                Split::Test
            } else {
                Split::Validation
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    tags.shuffle(&mut rng);
    tags
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: usize,
    pub split: Split,
    pub scenario: Scenario,
    pub params_fingerprint: String,
    pub noise_power_watts_per_subcarrier: f64,
    /// `[K, M, N]`.
    pub shape: [usize; 3],
    pub responses: Vec<f64>,
}

impl InstanceRecord {
    pub fn from_instance(id: usize, split: Split, h: &ChannelInstance) -> Self {
        let (k, m, n) = h.responses.dim();
        Self {
            id,
            split,
            scenario: h.scenario.clone(),
            params_fingerprint: h.params_fingerprint.clone(),
            noise_power_watts_per_subcarrier: h.noise_power_watts_per_subcarrier,
            shape: [k, m, n],
            responses: interleave(h.responses.iter()),
        }
    }

    pub fn to_instance(&self) -> Result<ChannelInstance> {
        let z = deinterleave(&self.responses)?;
        let [k, m, n] = self.shape;
        let responses = Array3::from_shape_vec((k, m, n), z)
            .map_err(|e| Error::Format(format!("instance {}: {e}", self.id)))?;
        Ok(ChannelInstance {
            responses,
            scenario: self.scenario.clone(),
            params_fingerprint: self.params_fingerprint.clone(),
            noise_power_watts_per_subcarrier: self.noise_power_watts_per_subcarrier,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub version: u32,
    pub params: SystemParams,
    pub geometry: ArrayGeometry,
    pub seed: u64,
    pub instances: Vec<InstanceRecord>,
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let d: Self = read_json(path)?;
        if d.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported dataset version {}",
                path.display(),
                d.version
            )));
        }
        let fp = d.params.fingerprint();
        if let Some(bad) = d.instances.iter().find(|i| i.params_fingerprint != fp) {
            return Err(Error::Format(format!(
                "{}: instance {} was generated with different parameters",
                path.display(),
                bad.id
            )));
        }
        Ok(d)
    }

    pub fn channels(&self) -> Result<Vec<ChannelInstance>> {
        self.instances
            .iter()
            .map(InstanceRecord::to_instance)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamformerRecord {
    pub mode: ConfigMode,
    pub delay_limit: DelayLimit,
    /// `[N, N_RF]`.
    pub phase_shape: [usize; 2],
    pub phases: Vec<f64>,
    /// `[G, N_RF]`.
    pub delay_shape: [usize; 2],
    pub incremental_delays: Vec<f64>,
    pub cascaded: bool,
    pub switches: SwitchMatrix,
    /// `[M, N_RF, K]`.
    pub digital_shape: [usize; 3],
    pub digital: Vec<f64>,
}

impl From<&BeamformerSet> for BeamformerRecord {
    fn from(s: &BeamformerSet) -> Self {
        let (n, nrf) = s.ps.phases.dim();
        let (g, _) = s.delays.incremental_delays.dim();
        let (m, r, k) = s.digital.weights.dim();
        Self {
            mode: s.mode,
            delay_limit: s.delay_limit,
            phase_shape: [n, nrf],
            phases: interleave(s.ps.phases.iter()),
            delay_shape: [g, nrf],
            incremental_delays: s.delays.incremental_delays.iter().copied().collect(),
            cascaded: s.delays.cascaded,
            switches: s.switches.clone(),
            digital_shape: [m, r, k],
            digital: interleave(s.digital.weights.iter()),
        }
    }
}

impl BeamformerRecord {
    pub fn to_set(&self) -> Result<BeamformerSet> {
        let bad = |e: ndarray::ShapeError| Error::Format(format!("beamformer record: {e}"));
        let [n, nrf] = self.phase_shape;
        let [g, gc] = self.delay_shape;
        let [m, r, k] = self.digital_shape;
        Ok(BeamformerSet {
            ps: PhaseShifterBank {
                phases: Array2::from_shape_vec((n, nrf), deinterleave(&self.phases)?)
                    .map_err(bad)?,
            },
            delays: DelayBank {
                incremental_delays: Array2::from_shape_vec(
                    (g, gc),
                    self.incremental_delays.clone(),
                )
                .map_err(bad)?,
                cascaded: self.cascaded,
            },
            switches: self.switches.clone(),
            digital: DigitalBeamformer {
                weights: Array3::from_shape_vec((m, r, k), deinterleave(&self.digital)?)
                    .map_err(bad)?,
            },
            mode: self.mode,
            delay_limit: self.delay_limit,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_channel, sample_scenario, SamplingRegion};

    #[test]
    fn split_proportions() {
        let tags = split_tags(1000, 7);
        let count = |s| tags.iter().filter(|&&t| t == s).count();
        assert_eq!(count(Split::Train), 600);
        assert_eq!(count(Split::Test), 200);
        assert_eq!(count(Split::Validation), 200);
        assert_eq!(tags, split_tags(1000, 7));
        assert_ne!(tags, split_tags(1000, 8));
    }

    #[test]
    fn instance_round_trip_is_bitwise() {
        let p = SystemParams {
            num_antennas: 8,
            num_ttds_per_chain: 2,
            ..SystemParams::desk()
        };
        let s = sample_scenario(&p, &SamplingRegion::default(), 5);
        let h = generate_channel(&p, &ArrayGeometry::uca(&p), &s).unwrap();
        let rec = InstanceRecord::from_instance(3, Split::Test, &h);
        let json = serde_json::to_string(&rec).unwrap();
        let back: InstanceRecord = serde_json::from_str(&json).unwrap();
        let h2 = back.to_instance().unwrap();
        assert_eq!(h, h2);
        for (a, b) in h.responses.iter().zip(h2.responses.iter()) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
    }

    #[test]
    fn beamformer_round_trip() {
        let p = SystemParams::desk();
        let mut set = BeamformerSet::zeros(&p, ConfigMode::Adaptive, DelayLimit::Bounded(8e-11));
        set.delays.incremental_delays[[1, 0]] = 1.234_567_890_123e-11;
        set.switches.perms[0].swap(0, 3);
        set.digital.weights[[0, 1, 0]] = Complex64::new(0.1, -1.0 / 3.0);
        let rec = BeamformerRecord::from(&set);
        let back: BeamformerRecord =
            serde_json::from_str(&serde_json::to_string(&rec).unwrap()).unwrap();
        assert_eq!(back.to_set().unwrap(), set);
    }
}
