//! Mean spectral efficiency against the delay range on a handful of
//! instances at reduced size.

use ttd_beam::experiments::{cmd_sweep_tmax, ExperimentConfig, SweepAxis};
use ttd_beam::optimizer::OptimizerConfig;
use ttd_beam::SystemParams;

fn main() -> ttd_beam::Result<()> {
    let cfg = ExperimentConfig {
        params: SystemParams {
            num_antennas: 32,
            num_ttds_per_chain: 4,
            ..SystemParams::desk()
        },
        sweep: SweepAxis::TMaxPs(vec![10.0, 40.0, 160.0]),
        instances: 4,
        workers: 4,
        optimizer: OptimizerConfig {
            max_iters: 150,
            ..OptimizerConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let out = cmd_sweep_tmax(&cfg, None)?;
    for s in &out.summary {
        println!(
            "{:26} t_max {:>6} ps  {:8.4}",
            s.mode, s.sweep_value, s.mean_spectral_efficiency
        );
    }
    Ok(())
}
