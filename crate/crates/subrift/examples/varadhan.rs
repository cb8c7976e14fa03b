//! ε log p(ε, x, y) from weighted Monte Carlo, heading to −d²/2.

use subrift::models::zoo;
use subrift::montecarlo::{varadhan_estimate, SdeConfig};
use subrift::shooting::GeodesicSolution;

fn main() -> subrift::Result<()> {
    let m = zoo::heisenberg();
    let sol = GeodesicSolution::from_covector(&m, &[0.0; 3], &[1.0, 0.0, 0.0], 1000)?;
    let cfg = SdeConfig { steps: 200, grid: 4, n: 20_000, seed: 5, ..Default::default() };
    for r in varadhan_estimate(&m, &sol, &[0.2, 0.1, 0.05], &cfg)? {
        println!("ε = {:<5} ε log p = {:+.4} ± {:.4}   limit {:+.4}", r.eps, r.value, r.se, r.limit);
    }
    Ok(())
}
