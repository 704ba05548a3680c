//! Trains the miniature network on 64 tiny channels and prints the loss curve.

use std::time::Instant;

use ttd_beam::channel::{generate_channel, sample_scenario, SamplingRegion};
use ttd_beam::neural::{mini_train, tiny_params, TrainConfig};
use ttd_beam::ArrayGeometry;

fn main() -> ttd_beam::Result<()> {
    let params = tiny_params();
    let geom = ArrayGeometry::ula(&params);
    let instances = (0..64)
        .map(|i| {
            generate_channel(
                &params,
                &geom,
                &sample_scenario(&params, &SamplingRegion::default(), i),
            )
        })
        .collect::<ttd_beam::Result<Vec<_>>>()?;
    let t0 = Instant::now();
    let report = mini_train(&params, &instances, &TrainConfig::default())?;
    println!("epoch  total      l_eff      l_ps       |phi|-1    perms");
    for r in &report.curve {
        println!(
            "{:>5}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}  {}",
            r.epoch,
            r.mean_total,
            r.mean_l_eff,
            r.mean_l_ps,
            r.max_phase_modulus_residual,
            r.permutations_valid
        );
    }
    let first = report.curve[0].mean_total;
    let last = report.curve.last().map_or(first, |r| r.mean_total);
    let mut worst: f64 = 0.0;
    for h in &instances {
        let y = report.model.output_values(h)?;
        for c in y[..2 * params.num_antennas * params.num_rf_chains].chunks_exact(2) {
            worst = worst.max((c[0].hypot(c[1]) - 1.0).abs());
        }
    }
    println!("trained phase modulus residual {worst:.4}");
    println!(
        "relative decrease {:.1}% in {:.1?}",
        100.0 * (first - last) / first.abs(),
        t0.elapsed()
    );
    Ok(())
}
