//! A single line-of-sight user served through one delay per antenna: the
//! closed-form design is compared with the fully digital bound.

use ttd_beam::baselines::{full_digital_baseline, matched_delay_beamformer};
use ttd_beam::beamformer::spectral_efficiency;
use ttd_beam::channel::{generate_channel, Scenario};
use ttd_beam::{ArrayGeometry, Placement, SystemParams};

fn main() -> ttd_beam::Result<()> {
    let params = SystemParams {
        num_antennas: 64,
        num_ttds_per_chain: 64,
        num_users: 1,
        num_rf_chains: 1,
        num_scatterers_per_user: 0,
        num_subcarriers: 8,
        ..SystemParams::desk()
    };
    let geom = ArrayGeometry::ula(&params);
    println!("distance  angle   matched   digital   ratio");
    for (d, deg) in [(2.0, 0.0), (5.0, 20.0), (10.0, -45.0), (20.0, 60.0)] {
        let user = Placement::from_degrees(d, deg);
        let scenario = Scenario {
            user_placements: vec![user],
            scatterer_placements: vec![vec![]],
            rng_seed: 0,
        };
        let h = generate_channel(&params, &geom, &scenario)?;
        let set = matched_delay_beamformer(&params, &geom, user)?;
        let se = spectral_efficiency(&h, &set, &params)?.spectral_efficiency;
        let fd = full_digital_baseline(&h, &params)?
            .report
            .spectral_efficiency;
        println!("{d:6.1} m {deg:6.1}  {se:8.4}  {fd:8.4}  {:6.4}", se / fd);
    }
    Ok(())
}
