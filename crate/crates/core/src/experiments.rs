//! Dataset generation and benchmark sweeps. Every command is a pure function
//! of its configuration: instances are seeded individually and results are
//! keyed by instance id, so worker count does not change the output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::full_digital_baseline;
use crate::beamformer::{BeamformerSet, ConfigMode, ConstraintResiduals, DelayLimit};
use crate::channel::{generate_channel, sample_scenario, ChannelInstance, SamplingRegion};
use crate::error::{Error, Result};
use crate::io::{
    split_tags, write_csv, write_json, BeamformerRecord, Dataset, InstanceRecord, FORMAT_VERSION,
};
use crate::neural::{check_tiny, mini_train, TrainConfig, TrainReport};
use crate::objective::{check_loss_gradient, LossConfig, LossEvaluator, PICOSECOND};
use crate::optimizer::{optimize_instance, OptimizerConfig, TraceRow};
use crate::params::{dbm_to_watts, ArrayGeometry, ArrayKind, SystemParams};

pub const DEFAULT_POWERS_DBM: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];
pub const DEFAULT_T_MAX_PS: [f64; 6] = [20.0, 40.0, 80.0, 160.0, 320.0, 500.0];

/// Row label of the fully digital reference.
pub const FULL_DIGITAL: &str = "full-digital";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "kebab-case")]
pub enum SweepAxis {
    None,
    TransmitPowerDbm(Vec<f64>),
    TMaxPs(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub params: SystemParams,
    pub geometry: ArrayKind,
    pub modes: Vec<ConfigMode>,
    pub sweep: SweepAxis,
    pub instances: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
    /// Also run every delay-capable mode with unlimited delay range.
    pub include_unbounded: bool,
    pub include_full_digital: bool,
    pub region: SamplingRegion,
    pub optimizer: OptimizerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            params: SystemParams::desk(),
            geometry: ArrayKind::Ula,
            modes: ConfigMode::ALL.to_vec(),
            sweep: SweepAxis::None,
            instances: 30,
            seed: 0,
            out_dir: PathBuf::from("out"),
            workers: 1,
            include_unbounded: true,
            include_full_digital: true,
            region: SamplingRegion::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.optimizer.validate()?;
        if self.modes.is_empty() {
            return Err(Error::Config("mode list is empty".into()));
        }
        let values = match &self.sweep {
            SweepAxis::None => &[][..],
            SweepAxis::TransmitPowerDbm(v) | SweepAxis::TMaxPs(v) => &v[..],
        };
        if values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(
                "sweep values must be strictly ascending".into(),
            ));
        }
        if let SweepAxis::TMaxPs(v) = &self.sweep {
            if v.iter().any(|&t| !(t >= 0.0)) {
                return Err(Error::Config("t_max values must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> ArrayGeometry {
        ArrayGeometry::from_kind(self.geometry, &self.params)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))
    }
}

/// Scenario seed of instance `i` under a run seed.
pub fn instance_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(i as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub instance: usize,
    pub mode: String,
    pub sweep_value: f64,
    pub spectral_efficiency: f64,
    pub residual_max: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: String,
    pub sweep_value: f64,
    pub mean_spectral_efficiency: f64,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub mode: String,
    pub spectral_efficiency: f64,
    pub cdf: f64,
}

/// Label of a mode run with unlimited delay range.
pub fn unbounded_label(mode: ConfigMode) -> String {
    format!("{mode}-unbounded")
}

/// Generates `cfg.instances` channels with 60/20/20 split tags.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.params.validate()?;
    let geom = cfg.geometry();
    let tags = split_tags(cfg.instances, cfg.seed);
    let instances = (0..cfg.instances)
        .map(|i| {
            let s = sample_scenario(&cfg.params, &cfg.region, instance_seed(cfg.seed, i));
            let h = generate_channel(&cfg.params, &geom, &s)?;
            Ok(InstanceRecord::from_instance(i, tags[i], &h))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        version: FORMAT_VERSION,
        params: cfg.params.clone(),
        geometry: geom,
        seed: cfg.seed,
        instances,
    })
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let d = generate_dataset(cfg)?;
    let path = cfg.out_dir.join("dataset.json");
    d.save(&path)?;
    Ok(path)
}

/// Modes ordered so that every warm-start source runs first.
fn run_order(modes: &[ConfigMode]) -> Vec<ConfigMode> {
    let mut out = modes.to_vec();
    out.sort_by_key(|m| match m {
        ConfigMode::SerialFixed => 0,
        ConfigMode::Adaptive => 1,
        ConfigMode::Parallel => 2,
        ConfigMode::PsOnly => 3,
    });
    out.dedup();
    out
}

struct Runner<'a> {
    h: &'a ChannelInstance,
    params: SystemParams,
    opt: OptimizerConfig,
    instance: usize,
    rows: Vec<ResultRow>,
}

impl Runner<'_> {
    fn run(
        &mut self,
        mode: ConfigMode,
        limit: DelayLimit,
        warm: &[BeamformerSet],
        label: String,
        sweep_value: f64,
    ) -> Result<BeamformerSet> {
        let t0 = Instant::now();
        let out = optimize_instance(self.h, &self.params, mode, limit, &self.opt, warm)?;
        self.rows.push(ResultRow {
            instance: self.instance,
            mode: label,
            sweep_value,
            spectral_efficiency: out.report.spectral_efficiency,
            residual_max: out.report.constraint_residuals.max(),
            wall_time_s: t0.elapsed().as_secs_f64(),
        });
        Ok(out.set)
    }
}

/// All modes of one instance across ascending `t_max` values (picoseconds).
///
/// Each mode is warm-started from its own result at the previous `t_max`, the
/// adaptive mode additionally from the fixed serial result at the same
/// `t_max`, and the unlimited runs from the largest finite result.
pub fn run_tmax_instance(
    h: &ChannelInstance,
    params: &SystemParams,
    modes: &[ConfigMode],
    t_max_ps: &[f64],
    opt: &OptimizerConfig,
    instance: usize,
    include_unbounded: bool,
    include_full_digital: bool,
) -> Result<Vec<ResultRow>> {
    let mut r = Runner {
        h,
        params: params.clone(),
        opt: *opt,
        instance,
        rows: Vec::new(),
    };
    let order = run_order(modes);
    let mut prev: BTreeMap<ConfigMode, BeamformerSet> = BTreeMap::new();
    for &t in t_max_ps {
        let limit = DelayLimit::Bounded(t * PICOSECOND);
        for &mode in order.iter().filter(|m| m.has_delays()) {
            let mut warm: Vec<BeamformerSet> = prev.get(&mode).cloned().into_iter().collect();
            if mode == ConfigMode::Adaptive {
                warm.extend(prev.get(&ConfigMode::SerialFixed).cloned());
            }
            let set = r.run(mode, limit, &warm, mode.to_string(), t)?;
            prev.insert(mode, set);
        }
    }
    if include_unbounded {
        let mut done: BTreeMap<ConfigMode, BeamformerSet> = BTreeMap::new();
        for &mode in order.iter().filter(|m| m.has_delays()) {
            let mut warm: Vec<BeamformerSet> = prev.get(&mode).cloned().into_iter().collect();
            if mode == ConfigMode::Adaptive {
                warm.extend(done.get(&ConfigMode::SerialFixed).cloned());
                warm.extend(prev.get(&ConfigMode::SerialFixed).cloned());
            }
            let set = r.run(
                mode,
                DelayLimit::Unbounded,
                &warm,
                unbounded_label(mode),
                f64::INFINITY,
            )?;
            done.insert(mode, set);
        }
    }
    if order.contains(&ConfigMode::PsOnly) {
        let limit = DelayLimit::Bounded(params.max_delay_seconds);
        r.run(
            ConfigMode::PsOnly,
            limit,
            &[],
            ConfigMode::PsOnly.to_string(),
            f64::NAN,
        )?;
        let base = r.rows.pop().expect("just pushed");
        for &t in t_max_ps {
            r.rows.push(ResultRow {
                sweep_value: t,
                ..base.clone()
            });
        }
    }
    if include_full_digital {
        let t0 = Instant::now();
        let fd = full_digital_baseline(h, params)?;
        for &t in t_max_ps {
            r.rows.push(ResultRow {
                instance,
                mode: FULL_DIGITAL.into(),
                sweep_value: t,
                spectral_efficiency: fd.report.spectral_efficiency,
                residual_max: fd.report.constraint_residuals.max(),
                wall_time_s: t0.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(r.rows)
}

/// All modes of one instance at each transmit power (dBm) and the configured
/// `t_max`, with an unlimited-delay run per delay mode warm-started from the
/// finite one.
pub fn run_power_instance(
    h: &ChannelInstance,
    params: &SystemParams,
    modes: &[ConfigMode],
    powers_dbm: &[f64],
    opt: &OptimizerConfig,
    instance: usize,
    include_unbounded: bool,
    include_full_digital: bool,
) -> Result<Vec<ResultRow>> {
    let order = run_order(modes);
    let mut rows = Vec::new();
    for &pdbm in powers_dbm {
        let p = SystemParams {
            transmit_power_watts: dbm_to_watts(pdbm),
            ..params.clone()
        };
        let mut r = Runner {
            h,
            params: p.clone(),
            opt: *opt,
            instance,
            rows: Vec::new(),
        };
        let limit = DelayLimit::Bounded(p.max_delay_seconds);
        let mut finite: BTreeMap<ConfigMode, BeamformerSet> = BTreeMap::new();
        for &mode in &order {
            let warm: Vec<BeamformerSet> = if mode == ConfigMode::Adaptive {
                finite
                    .get(&ConfigMode::SerialFixed)
                    .cloned()
                    .into_iter()
                    .collect()
            } else {
                Vec::new()
            };
            let set = r.run(mode, limit, &warm, mode.to_string(), pdbm)?;
            finite.insert(mode, set);
        }
        if include_unbounded {
            let mut done: BTreeMap<ConfigMode, BeamformerSet> = BTreeMap::new();
            for &mode in order.iter().filter(|m| m.has_delays()) {
                let mut warm: Vec<BeamformerSet> = finite.get(&mode).cloned().into_iter().collect();
                if mode == ConfigMode::Adaptive {
                    warm.extend(done.get(&ConfigMode::SerialFixed).cloned());
                    warm.extend(finite.get(&ConfigMode::SerialFixed).cloned());
                }
                let set = r.run(
                    mode,
                    DelayLimit::Unbounded,
                    &warm,
                    unbounded_label(mode),
                    pdbm,
                )?;
                done.insert(mode, set);
            }
        }
        if include_full_digital {
            let t0 = Instant::now();
            let fd = full_digital_baseline(h, &p)?;
            r.rows.push(ResultRow {
                instance,
                mode: FULL_DIGITAL.into(),
                sweep_value: pdbm,
                spectral_efficiency: fd.report.spectral_efficiency,
                residual_max: fd.report.constraint_residuals.max(),
                wall_time_s: t0.elapsed().as_secs_f64(),
            });
        }
        rows.extend(r.rows);
    }
    Ok(rows)
}

fn channels_for(
    cfg: &ExperimentConfig,
    dataset: Option<&Dataset>,
) -> Result<(SystemParams, Vec<ChannelInstance>)> {
    match dataset {
        Some(d) => Ok((d.params.clone(), d.channels()?)),
        None => {
            let d = generate_dataset(cfg)?;
            Ok((d.params.clone(), d.channels()?))
        }
    }
}

fn par_rows<F>(cfg: &ExperimentConfig, channels: &[ChannelInstance], f: F) -> Result<Vec<ResultRow>>
where
    F: Fn(usize, &ChannelInstance) -> Result<Vec<ResultRow>> + Sync,
{
    let pool = cfg.pool()?;
    let per: Vec<Result<Vec<ResultRow>>> = pool.install(|| {
        channels
            .par_iter()
            .enumerate()
            .map(|(i, h)| f(i, h))
            .collect()
    });
    let mut rows = Vec::new();
    for r in per {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Mean spectral efficiency per (mode, sweep value), in first-seen order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, u64)> = Vec::new();
    let mut acc: BTreeMap<(String, u64), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let key = (r.mode.clone(), r.sweep_value.to_bits());
        let e = acc.entry(key.clone()).or_insert_with(|| {
            keys.push(key);
            (0.0, 0)
        });
        e.0 += r.spectral_efficiency;
        e.1 += 1;
    }
    keys.into_iter()
        .map(|k| {
            let (s, n) = acc[&k];
            SummaryRow {
                mode: k.0,
                sweep_value: f64::from_bits(k.1),
                mean_spectral_efficiency: s / n as f64,
                instances: n,
            }
        })
        .collect()
}

pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
}

impl SweepOutput {
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let a = dir.join(format!("{stem}.csv"));
        let b = dir.join(format!("{stem}_summary.csv"));
        write_csv(&a, &self.rows)?;
        write_csv(&b, &self.summary)?;
        Ok((a, b))
    }
}

pub fn cmd_sweep_tmax(cfg: &ExperimentConfig, dataset: Option<&Dataset>) -> Result<SweepOutput> {
    cfg.validate()?;
    let t_list = match &cfg.sweep {
        SweepAxis::TMaxPs(v) if !v.is_empty() => v.clone(),
        _ => DEFAULT_T_MAX_PS.to_vec(),
    };
    let (params, channels) = channels_for(cfg, dataset)?;
    let rows = par_rows(cfg, &channels, |i, h| {
        run_tmax_instance(
            h,
            &params,
            &cfg.modes,
            &t_list,
            &cfg.optimizer,
            i,
            cfg.include_unbounded,
            cfg.include_full_digital,
        )
    })?;
    Ok(SweepOutput {
        summary: summarize(&rows),
        rows,
    })
}

pub fn cmd_sweep_power(cfg: &ExperimentConfig, dataset: Option<&Dataset>) -> Result<SweepOutput> {
    cfg.validate()?;
    let p_list = match &cfg.sweep {
        SweepAxis::TransmitPowerDbm(v) if !v.is_empty() => v.clone(),
        _ => DEFAULT_POWERS_DBM.to_vec(),
    };
    let (params, channels) = channels_for(cfg, dataset)?;
    let rows = par_rows(cfg, &channels, |i, h| {
        run_power_instance(
            h,
            &params,
            &cfg.modes,
            &p_list,
            &cfg.optimizer,
            i,
            cfg.include_unbounded,
            cfg.include_full_digital,
        )
    })?;
    Ok(SweepOutput {
        summary: summarize(&rows),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub instance: usize,
    pub mode: ConfigMode,
    pub delay_limit: DelayLimit,
    pub spectral_efficiency: f64,
    /// `[K][M]`.
    pub per_user_rates: Vec<Vec<f64>>,
    pub power_per_subcarrier: Vec<f64>,
    pub constraint_residuals: ConstraintResiduals,
    pub converged: bool,
    pub wall_time_s: f64,
}

pub struct OptimizeOutput {
    pub report: ReportRecord,
    pub set: BeamformerSet,
    pub trace: Vec<TraceRow>,
}

impl OptimizeOutput {
    /// Writes `beamformer.json`, `report.json` and `trace.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(
            &dir.join("beamformer.json"),
            &BeamformerRecord::from(&self.set),
        )?;
        write_json(&dir.join("report.json"), &self.report)?;
        write_csv(&dir.join("trace.csv"), &self.trace)
    }
}

/// Optimizes one instance of the dataset (or of a freshly generated one).
pub fn cmd_optimize(
    cfg: &ExperimentConfig,
    dataset: Option<&Dataset>,
    instance: usize,
    mode: ConfigMode,
    limit: DelayLimit,
) -> Result<OptimizeOutput> {
    cfg.validate()?;
    let (params, channels) = channels_for(cfg, dataset)?;
    let h = channels.get(instance).ok_or_else(|| {
        Error::Config(format!(
            "instance {instance} not in a dataset of {}",
            channels.len()
        ))
    })?;
    let t0 = Instant::now();
    let out = optimize_instance(h, &params, mode, limit, &cfg.optimizer, &[])?;
    let r = &out.report;
    Ok(OptimizeOutput {
        report: ReportRecord {
            instance,
            mode,
            delay_limit: limit,
            spectral_efficiency: r.spectral_efficiency,
            per_user_rates: r
                .per_user_rates
                .outer_iter()
                .map(|row| row.to_vec())
                .collect(),
            power_per_subcarrier: r.power_per_subcarrier.clone(),
            constraint_residuals: r.constraint_residuals,
            converged: out.converged,
            wall_time_s: t0.elapsed().as_secs_f64(),
        },
        set: out.set,
        trace: out.trace,
    })
}

/// Empirical CDF of `samples` on `grid`.
pub fn empirical_cdf(samples: &[f64], grid: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    grid.iter()
        .map(|&x| s.partition_point(|&v| v <= x) as f64 / s.len().max(1) as f64)
        .collect()
}

pub struct CdfOutput {
    pub rows: Vec<ResultRow>,
    pub cdf: Vec<CdfRow>,
}

/// Per-instance spectral efficiency with every user pinned to 10 m (unless
/// the region already fixes a distance), tabulated as CDFs on a common grid.
pub fn cmd_cdf(
    cfg: &ExperimentConfig,
    dataset: Option<&Dataset>,
    grid_points: usize,
) -> Result<CdfOutput> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if cfg.region.fixed_user_distance_m.is_none() {
        cfg.region.fixed_user_distance_m = Some(10.0);
    }
    let t = cfg.params.max_delay_seconds / PICOSECOND;
    let (params, channels) = channels_for(&cfg, dataset)?;
    let rows = par_rows(&cfg, &channels, |i, h| {
        run_tmax_instance(
            h,
            &params,
            &cfg.modes,
            &[t],
            &cfg.optimizer,
            i,
            false,
            false,
        )
    })?;
    let mut by_mode: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut mode_order = Vec::new();
    for r in &rows {
        if !by_mode.contains_key(&r.mode) {
            mode_order.push(r.mode.clone());
        }
        by_mode
            .entry(r.mode.clone())
            .or_default()
            .push(r.spectral_efficiency);
    }
    let lo = rows
        .iter()
        .map(|r| r.spectral_efficiency)
        .fold(f64::INFINITY, f64::min);
    let hi = rows
        .iter()
        .map(|r| r.spectral_efficiency)
        .fold(f64::NEG_INFINITY, f64::max);
    let n = grid_points.max(2);
    let grid: Vec<f64> = (0..n)
        .map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64)
        .collect();
    let mut cdf = Vec::new();
    for mode in mode_order {
        let values = empirical_cdf(&by_mode[&mode], &grid);
        cdf.extend(grid.iter().zip(values).map(|(&x, c)| CdfRow {
            mode: mode.clone(),
            spectral_efficiency: x,
            cdf: c,
        }));
    }
    Ok(CdfOutput { rows, cdf })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub mode: ConfigMode,
    pub cartesian_phases: bool,
    pub smooth_params: usize,
    pub max_rel_error: f64,
}

/// Gradient check of the total loss for every configured mode (and the
/// cartesian phase form used by the network) at a random point of the first
/// instance.
pub fn cmd_gradcheck(
    cfg: &ExperimentConfig,
    dataset: Option<&Dataset>,
) -> Result<Vec<GradCheckRow>> {
    cfg.validate()?;
    let mut one = cfg.clone();
    one.instances = 1;
    let (params, channels) = channels_for(&one, dataset)?;
    let h = &channels[0];
    let limit = DelayLimit::Bounded(params.max_delay_seconds);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(5);
    let mut cases: Vec<(ConfigMode, bool)> = cfg.modes.iter().map(|&m| (m, false)).collect();
    cases.push((ConfigMode::Adaptive, true));
    let mut rows = Vec::new();
    for (mode, cartesian) in cases {
        let mut ev = LossEvaluator::new(h, &params, mode, limit, LossConfig::default())?;
        if cartesian {
            ev = ev.with_cartesian_phases();
        }
        let x: Vec<f64> = (0..ev.num_params())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let check = check_loss_gradient(&mut ev, &x, 1e-6)?;
        rows.push(GradCheckRow {
            mode,
            cartesian_phases: cartesian,
            smooth_params: ev.num_smooth_params(),
            max_rel_error: check.max_rel_error,
        });
    }
    Ok(rows)
}

/// Trains the miniature network on the dataset, or on `cfg.instances` fresh
/// channels. The run seed also seeds the model and the batch order.
pub fn cmd_mini_train(
    cfg: &ExperimentConfig,
    dataset: Option<&Dataset>,
    train: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_tiny(&cfg.params)?;
    let (params, channels) = channels_for(cfg, dataset)?;
    let mut train = *train;
    train.seed = cfg.seed;
    train.model.seed = cfg.seed;
    mini_train(&params, &channels, &train)
}
