mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttd_beam::ArrayGeometry;

use common::*;

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in op_cases() {
        for _ in 0..20 {
            let e = op_error(&case, &mut rng);
            assert!(e < 1e-5, "{}: {e:.3e}", case.name);
        }
    }
}

#[test]
fn total_loss_matches_finite_differences() {
    let p = small_params();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (i, geom) in [ArrayGeometry::ula(&p), ArrayGeometry::uca(&p)]
        .iter()
        .enumerate()
    {
        let h = channel(&p, geom, 40 + i as u64);
        for variant in loss_variants() {
            for _ in 0..3 {
                let e = loss_error(&h, &p, variant, &mut rng);
                assert!(e < 1e-5, "{variant:?}: {e:.3e}");
            }
        }
    }
}
