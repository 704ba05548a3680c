//! How many ways the antennas can be split among the TTDs of one chain.

use ttd_beam::counting::{count_configurations, format_scientific};

fn main() -> ttd_beam::Result<()> {
    println!("    N    L  any split     equal-sized subarrays");
    for (n, l) in [(8, 2), (16, 4), (64, 8), (128, 8), (256, 16)] {
        let c = count_configurations(n, l)?;
        println!(
            "{n:5} {l:4}  {:>12}  {:>12}",
            format_scientific(&c.unconstrained, 4),
            format_scientific(&c.equal_sized, 4)
        );
    }
    Ok(())
}
