use std::path::{Path, PathBuf};
use std::process::ExitCode;

use std::io::Write;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ttd_beam::assignment::{hungarian_max, hungarian_min, CostMatrix};
use ttd_beam::counting::{count_configurations, format_scientific};
use ttd_beam::experiments::{
    cmd_cdf, cmd_generate, cmd_gradcheck, cmd_mini_train, cmd_optimize, cmd_sweep_power,
    cmd_sweep_tmax, ExperimentConfig,
};
use ttd_beam::io::{read_matrix_csv, write_csv, Dataset};
use ttd_beam::neural::{tiny_params, TrainConfig};
use ttd_beam::{ConfigMode, DelayLimit, Error, Result};

// stdout writes ignore errors so that a closed pipe ends the output quietly
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "ttd-beam",
    version,
    about = "Hybrid beamforming with true-time-delay networks"
)]
struct Cli {
    /// TOML experiment configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Data {
    /// Dataset written by `generate`; without it channels are generated.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    instances: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample scenarios and write dataset.json.
    Generate {
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Optimize one instance and write beamformer.json, report.json, trace.csv.
    Optimize {
        #[command(flatten)]
        data: Data,
        #[arg(long, default_value_t = 0)]
        instance: usize,
        #[arg(long, default_value = "adaptive")]
        mode: ConfigMode,
        /// Ignore the delay range limit.
        #[arg(long)]
        unbounded: bool,
    },
    /// Spectral efficiency against transmit power.
    SweepPower {
        #[command(flatten)]
        data: Data,
    },
    /// Spectral efficiency against the maximum delay.
    SweepTmax {
        #[command(flatten)]
        data: Data,
    },
    /// CDF of spectral efficiency over random angles at a fixed distance.
    Cdf {
        #[command(flatten)]
        data: Data,
        #[arg(long, default_value_t = 101)]
        grid_points: usize,
    },
    /// Number of TTD-to-subarray configurations.
    Count {
        #[arg(long)]
        antennas: Option<usize>,
        #[arg(long)]
        ttds: Option<usize>,
        #[arg(long, default_value_t = 5)]
        digits: usize,
    },
    /// Optimal assignment for a square cost matrix in CSV.
    Assign {
        matrix: PathBuf,
        #[arg(long)]
        maximize: bool,
    },
    /// Compare loss gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        data: Data,
    },
    /// Train the miniature network and write curve.csv and model.json.
    MiniTrain {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                json!({ "error": e.category(), "message": e.to_string() })
            );
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli, fallback: impl FnOnce() -> ExperimentConfig) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => fallback(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn with_data(
    mut cfg: ExperimentConfig,
    data: &Data,
) -> Result<(ExperimentConfig, Option<Dataset>)> {
    if let Some(n) = data.instances {
        cfg.instances = n;
    }
    let ds = data.dataset.as_deref().map(Dataset::load).transpose()?;
    if let Some(d) = &ds {
        cfg.params = d.params.clone();
    }
    Ok((cfg, ds))
}

fn print(value: serde_json::Value) {
    out!(
        "{}",
        serde_json::to_string_pretty(&value).unwrap_or_default()
    );
}

fn wrote(paths: &[&Path]) {
    for p in paths {
        out!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli, ExperimentConfig::default)?;
    match &cli.command {
        Command::Generate { instances } => {
            let mut cfg = cfg;
            if let Some(n) = instances {
                cfg.instances = *n;
            }
            wrote(&[&cmd_generate(&cfg)?]);
        }
        Command::Optimize {
            data,
            instance,
            mode,
            unbounded,
        } => {
            let (cfg, ds) = with_data(cfg, data)?;
            let limit = if *unbounded {
                DelayLimit::Unbounded
            } else {
                DelayLimit::Bounded(cfg.params.max_delay_seconds)
            };
            let out = cmd_optimize(&cfg, ds.as_ref(), *instance, *mode, limit)?;
            out.write(&cfg.out_dir)?;
            print(json!({
                "instance": instance,
                "mode": mode,
                "spectral_efficiency": out.report.spectral_efficiency,
                "residual_max": out.report.constraint_residuals.max(),
                "converged": out.report.converged,
            }));
        }
        Command::SweepPower { data } | Command::SweepTmax { data } => {
            let (cfg, ds) = with_data(cfg, data)?;
            let (out, stem) = match &cli.command {
                Command::SweepPower { .. } => (cmd_sweep_power(&cfg, ds.as_ref())?, "sweep_power"),
                _ => (cmd_sweep_tmax(&cfg, ds.as_ref())?, "sweep_tmax"),
            };
            let (a, b) = out.write(&cfg.out_dir, stem)?;
            wrote(&[&a, &b]);
        }
        Command::Cdf { data, grid_points } => {
            let (cfg, ds) = with_data(cfg, data)?;
            let out = cmd_cdf(&cfg, ds.as_ref(), *grid_points)?;
            let rows = cfg.out_dir.join("cdf_rows.csv");
            let cdf = cfg.out_dir.join("cdf.csv");
            write_csv(&rows, &out.rows)?;
            write_csv(&cdf, &out.cdf)?;
            wrote(&[&rows, &cdf]);
        }
        Command::Count {
            antennas,
            ttds,
            digits,
        } => {
            let n = antennas.unwrap_or(cfg.params.num_antennas);
            let l = ttds.unwrap_or(cfg.params.num_ttds_per_chain);
            let c = count_configurations(n, l)?;
            print(json!({
                "antennas": n,
                "ttds": l,
                "unconstrained": c.unconstrained.to_string(),
                "unconstrained_approx": format_scientific(&c.unconstrained, *digits),
                "equal_sized": c.equal_sized.to_string(),
                "equal_sized_approx": format_scientific(&c.equal_sized, *digits),
            }));
        }
        Command::Assign { matrix, maximize } => {
            let c = CostMatrix::from_rows(&read_matrix_csv(matrix)?)?;
            let a = if *maximize {
                hungarian_max(&c)
            } else {
                hungarian_min(&c)
            };
            print(serde_json::to_value(&a).map_err(|e| Error::Format(e.to_string()))?);
        }
        Command::Gradcheck { data } => {
            let (cfg, ds) = with_data(cfg, data)?;
            let rows = cmd_gradcheck(&cfg, ds.as_ref())?;
            let path = cfg.out_dir.join("gradcheck.csv");
            write_csv(&path, &rows)?;
            for r in &rows {
                let form = if r.cartesian_phases {
                    " (cartesian)"
                } else {
                    ""
                };
                out!(
                    "{}{form}: max relative error {:.3e} over {} parameters",
                    r.mode,
                    r.max_rel_error,
                    r.smooth_params
                );
            }
            wrote(&[&path]);
            if let Some(bad) = rows.iter().find(|r| !(r.max_rel_error < 1e-5)) {
                return Err(Error::Diverged(format!(
                    "gradient check failed for {}: {:.3e}",
                    bad.mode, bad.max_rel_error
                )));
            }
        }
        Command::MiniTrain { data, epochs } => {
            // without a config file the tiny preset replaces the desk defaults
            let cfg = if cli.config.is_none() {
                load_config(&cli, || ExperimentConfig {
                    params: tiny_params(),
                    instances: 64,
                    ..ExperimentConfig::default()
                })?
            } else {
                cfg
            };
            let (cfg, ds) = with_data(cfg, data)?;
            let mut train = TrainConfig::default();
            if let Some(e) = epochs {
                train.epochs = *e;
            }
            let report = cmd_mini_train(&cfg, ds.as_ref(), &train)?;
            let curve = cfg.out_dir.join("curve.csv");
            let model = cfg.out_dir.join("model.json");
            write_csv(&curve, &report.curve)?;
            report.model.save(&model)?;
            if let (Some(first), Some(last)) = (report.curve.first(), report.curve.last()) {
                out!(
                    "mean loss {:.4} -> {:.4} over {} epochs",
                    first.mean_total,
                    last.mean_total,
                    last.epoch
                );
            }
            wrote(&[&curve, &model]);
        }
    }
    Ok(())
}
