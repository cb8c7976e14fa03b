//! Spectrum of the second variation on the kernel of the endpoint map.
//! The sphere's smallest eigenvalue closes towards zero as the length
//! approaches π; the tail sits near 1.

use subrift::models::zoo;
use subrift::secondvar::{discretize, q_spectrum};
use subrift::shooting::GeodesicSolution;

fn main() -> subrift::Result<()> {
    let m = zoo::sphere2();
    for l in [1.0, 2.0, 3.0] {
        let sol = GeodesicSolution::from_covector(&m, &[1.0, 0.0], &[0.0, l], 1000)?;
        let spec = q_spectrum(&m, &discretize(&m, &sol, 32)?)?;
        let head: Vec<String> = spec.mu.iter().take(4).map(|v| format!("{v:.4}")).collect();
        println!("L = {l}: dim K = {}, μ = [{}, ..., {:.4}]", spec.mu.len(), head.join(", "), spec.mu.last().unwrap());
    }
    Ok(())
}
