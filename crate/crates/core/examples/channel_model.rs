//! Near-field channel of one user on a ULA and a UCA, and how far a
//! phase-only beam steered at the centre frequency drifts across the band.

use ttd_beam::beamformer::{BeamformerSet, ConfigMode, DelayLimit};
use ttd_beam::channel::{array_response, generate_channel, Scenario};
use ttd_beam::{ArrayGeometry, Placement, SystemParams};

fn main() -> ttd_beam::Result<()> {
    let params = SystemParams {
        num_users: 1,
        num_rf_chains: 1,
        num_scatterers_per_user: 0,
        num_subcarriers: 8,
        ..SystemParams::desk()
    };
    let user = Placement::from_degrees(6.0, 30.0);
    let scenario = Scenario {
        user_placements: vec![user],
        scatterer_placements: vec![vec![]],
        rng_seed: 0,
    };
    let freqs = params.subcarrier_frequencies();
    for geom in [ArrayGeometry::ula(&params), ArrayGeometry::uca(&params)] {
        let h = generate_channel(&params, &geom, &scenario)?;
        println!("{:?}", geom.kind());
        // phases matched to the centre-frequency response
        let centre = array_response(&geom, params.carrier_frequency_hz, user);
        let mut set = BeamformerSet::zeros(&params, ConfigMode::PsOnly, DelayLimit::Unbounded);
        for (n, a) in centre.iter().enumerate() {
            set.ps.phases[[n, 0]] = a.conj();
        }
        for (m, f) in freqs.iter().enumerate() {
            let hm = h.user_channel(0, m);
            let gain: f64 = hm.iter().map(|z| z.norm_sqr()).sum();
            let a = set.analog(*f)?;
            let aligned = hm
                .iter()
                .zip(a.column(0))
                .map(|(x, y)| x.conj() * y)
                .sum::<num_complex::Complex64>()
                .norm();
            let ideal = gain.sqrt() * (params.num_antennas as f64).sqrt();
            println!(
                "  f = {:6.2} GHz  |h|^2 = {:.3e}  phase-only array gain {:5.1}%",
                f / 1e9,
                gain,
                100.0 * aligned / ideal
            );
        }
    }
    Ok(())
}
