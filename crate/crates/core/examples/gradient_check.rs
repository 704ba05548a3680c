//! Reverse-mode gradients of the training loss against central differences
//! for every configuration mode.

use ttd_beam::experiments::{cmd_gradcheck, ExperimentConfig};
use ttd_beam::SystemParams;

fn main() -> ttd_beam::Result<()> {
    let cfg = ExperimentConfig {
        params: SystemParams {
            num_antennas: 32,
            num_ttds_per_chain: 4,
            ..SystemParams::desk()
        },
        seed: 3,
        ..ExperimentConfig::default()
    };
    for r in cmd_gradcheck(&cfg, None)? {
        println!(
            "{:13} cartesian={:5} params={:4} max rel error {:.2e}",
            r.mode.to_string(),
            r.cartesian_phases,
            r.smooth_params,
            r.max_rel_error
        );
    }
    Ok(())
}
