mod common;

use ttd_beam::baselines::full_digital_baseline;
use ttd_beam::experiments::{
    cmd_cdf, cmd_generate, cmd_optimize, cmd_sweep_tmax, generate_dataset, unbounded_label,
    ExperimentConfig, ResultRow, SweepAxis, FULL_DIGITAL,
};
use ttd_beam::io::Dataset;
use ttd_beam::optimizer::OptimizerConfig;
use ttd_beam::params::dbm_to_watts;
use ttd_beam::{ArrayGeometry, ConfigMode, DelayLimit, SystemParams};

use common::*;

fn tiny_cfg(dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        params: small_params(),
        instances: 3,
        out_dir: dir.to_path_buf(),
        optimizer: OptimizerConfig {
            max_iters: 25,
            num_restarts: 1,
            ..OptimizerConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn strip_time(rows: &[ResultRow]) -> Vec<ResultRow> {
    rows.iter()
        .map(|r| ResultRow {
            wall_time_s: 0.0,
            ..r.clone()
        })
        .collect()
}

#[test]
fn generate_is_deterministic_and_reloads_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        instances: 10,
        seed: 7,
        ..ExperimentConfig::default()
    };
    cfg.out_dir = tmp.path().join("a");
    let a = cmd_generate(&cfg).unwrap();
    cfg.out_dir = tmp.path().join("b");
    let b = cmd_generate(&cfg).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let loaded = Dataset::load(&a).unwrap();
    let fresh = generate_dataset(&cfg).unwrap();
    for (x, y) in loaded
        .channels()
        .unwrap()
        .iter()
        .zip(fresh.channels().unwrap().iter())
    {
        for (u, v) in x.responses.iter().zip(y.responses.iter()) {
            assert_eq!(u.re.to_bits(), v.re.to_bits());
            assert_eq!(u.im.to_bits(), v.im.to_bits());
        }
    }

    cfg.seed = 8;
    cfg.out_dir = tmp.path().join("c");
    let c = cmd_generate(&cfg).unwrap();
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn dataset_from_other_parameters_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(tmp.path());
    let mut d = generate_dataset(&cfg).unwrap();
    d.params.num_subcarriers = 8;
    let path = tmp.path().join("bad.json");
    d.save(&path).unwrap();
    let e = Dataset::load(&path).unwrap_err();
    assert_eq!(e.category(), "format");
}

#[test]
fn every_system_parameter_is_a_config_key() {
    let text = toml::to_string(&SystemParams::desk()).unwrap();
    let cfg = ExperimentConfig::from_toml(&format!("[params]\n{text}")).unwrap();
    assert_eq!(cfg.params, SystemParams::desk());
    assert!(ExperimentConfig::from_toml("[params]\nnum_antenas = 8").is_err());
}

#[test]
fn sweep_rows_ignore_worker_count_and_respect_relaxation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(tmp.path());
    cfg.sweep = SweepAxis::TMaxPs(vec![5.0, 20.0, 80.0]);
    cfg.workers = 1;
    let one = cmd_sweep_tmax(&cfg, None).unwrap();
    cfg.workers = 3;
    let three = cmd_sweep_tmax(&cfg, None).unwrap();
    assert_eq!(strip_time(&one.rows), strip_time(&three.rows));

    let se = |inst: usize, mode: &str, t: f64| {
        one.rows
            .iter()
            .find(|r| r.instance == inst && r.mode == mode && r.sweep_value == t)
            .map(|r| r.spectral_efficiency)
            .unwrap()
    };
    for inst in 0..cfg.instances {
        for mode in [
            ConfigMode::Parallel,
            ConfigMode::SerialFixed,
            ConfigMode::Adaptive,
        ] {
            let name = mode.to_string();
            let ladder = [
                se(inst, &name, 5.0),
                se(inst, &name, 20.0),
                se(inst, &name, 80.0),
            ];
            assert!(
                ladder[1] >= ladder[0] - 1e-6 && ladder[2] >= ladder[1] - 1e-6,
                "{name}: {ladder:?}"
            );
            let free = se(inst, &unbounded_label(mode), f64::INFINITY);
            assert!(free >= ladder[2] - 1e-6, "{name}: {free} < {}", ladder[2]);
        }
        let fd = se(inst, FULL_DIGITAL, 5.0);
        assert!(one
            .rows
            .iter()
            .filter(|r| r.instance == inst)
            .all(|r| r.spectral_efficiency <= fd + 1e-9));
    }
    assert!(one.rows.iter().all(|r| r.residual_max < 1e-3));
}

#[test]
fn full_digital_rate_grows_with_power() {
    let p = SystemParams::desk();
    let geom = ArrayGeometry::ula(&p);
    for seed in 0..5 {
        let h = channel(&p, &geom, seed);
        let mut last = f64::NEG_INFINITY;
        for dbm in [0.0, 5.0, 10.0, 15.0, 20.0] {
            let q = SystemParams {
                transmit_power_watts: dbm_to_watts(dbm),
                ..p.clone()
            };
            let se = full_digital_baseline(&h, &q)
                .unwrap()
                .report
                .spectral_efficiency;
            assert!(se > last, "{dbm} dBm: {se} <= {last}");
            last = se;
        }
    }
}

#[test]
fn cdf_is_a_distribution_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(tmp.path());
    cfg.modes = vec![ConfigMode::SerialFixed, ConfigMode::Adaptive];
    let a = cmd_cdf(&cfg, None, 21).unwrap();
    let b = cmd_cdf(&cfg, None, 21).unwrap();
    assert_eq!(a.cdf, b.cdf);
    for mode in ["serial-fixed", "adaptive"] {
        let ys: Vec<f64> = a
            .cdf
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.cdf)
            .collect();
        assert_eq!(ys.len(), 21);
        assert!(ys.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*ys.last().unwrap(), 1.0);
    }
}

#[test]
fn optimize_output_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(tmp.path());
    let limit = DelayLimit::Bounded(cfg.params.max_delay_seconds);
    let a = cmd_optimize(&cfg, None, 1, ConfigMode::Adaptive, limit).unwrap();
    let b = cmd_optimize(&cfg, None, 1, ConfigMode::Adaptive, limit).unwrap();
    assert_eq!(a.set, b.set);
    assert_eq!(a.trace, b.trace);
    a.write(&tmp.path().join("a")).unwrap();
    b.write(&tmp.path().join("b")).unwrap();
    for f in ["beamformer.json", "trace.csv"] {
        assert_eq!(
            std::fs::read(tmp.path().join("a").join(f)).unwrap(),
            std::fs::read(tmp.path().join("b").join(f)).unwrap()
        );
    }
    let e = cmd_optimize(&cfg, None, 3, ConfigMode::Adaptive, limit)
        .err()
        .unwrap();
    assert_eq!(e.category(), "config");
}
