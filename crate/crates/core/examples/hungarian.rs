//! Assignment on random score matrices, checked against exhaustive search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttd_beam::assignment::{brute_force_assignment, hungarian_max, hungarian_min, CostMatrix};

fn main() -> ttd_beam::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 2..=7 {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(0.0..10.0)).collect())
            .collect();
        let c = CostMatrix::from_rows(&rows)?;
        let fast = hungarian_min(&c);
        let slow = brute_force_assignment(&c)?;
        let best = hungarian_max(&c);
        println!(
            "n = {n}: min {:8.4}  max {:8.4} (exhaustive {:8.4})  perm {:?}",
            fast.total_cost, best.total_cost, slow.total_cost, best.permutation
        );
    }
    Ok(())
}
