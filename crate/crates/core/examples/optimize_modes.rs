//! Optimizes one desk-scale instance in every configuration mode.

use ttd_beam::baselines::full_digital_baseline;
use ttd_beam::beamformer::{ConfigMode, DelayLimit};
use ttd_beam::channel::{generate_channel, sample_scenario, SamplingRegion};
use ttd_beam::optimizer::{optimize_instance, OptimizerConfig};
use ttd_beam::{ArrayGeometry, SystemParams};

fn main() -> ttd_beam::Result<()> {
    let params = SystemParams::desk();
    let geom = ArrayGeometry::ula(&params);
    let scenario = sample_scenario(&params, &SamplingRegion::default(), 4);
    let h = generate_channel(&params, &geom, &scenario)?;
    let cfg = OptimizerConfig::default();
    let limit = DelayLimit::Bounded(params.max_delay_seconds);
    let serial = optimize_instance(&h, &params, ConfigMode::SerialFixed, limit, &cfg, &[])?;
    for mode in ConfigMode::ALL {
        let warm = if mode == ConfigMode::Adaptive {
            vec![serial.set.clone()]
        } else {
            vec![]
        };
        let out = optimize_instance(&h, &params, mode, limit, &cfg, &warm)?;
        println!(
            "{:13} {:8.4} bits/s/Hz  residual {:.1e}",
            mode.to_string(),
            out.report.spectral_efficiency,
            out.report.constraint_residuals.max()
        );
    }
    let fd = full_digital_baseline(&h, &params)?;
    println!(
        "{:13} {:8.4} bits/s/Hz",
        "full digital", fd.report.spectral_efficiency
    );
    Ok(())
}
