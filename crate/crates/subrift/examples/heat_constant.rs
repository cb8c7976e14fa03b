//! Small-time heat kernel constant c(x, y). Flat space gives (2π)^{-d/2};
//! the Heisenberg straight line picks up the Malliavin determinant and the
//! spectral factor.

use subrift::models::zoo;
use subrift::secondvar::heat_constant;
use subrift::shooting::GeodesicSolution;

fn main() -> subrift::Result<()> {
    let e = zoo::euclidean(2);
    let sol = GeodesicSolution::from_covector(&e, &[0.0, 0.0], &[1.0, 0.0], 1000)?;
    let hc = heat_constant(&e, &sol, 32)?;
    println!("euclidean2: c = {:.8} (1/2π = {:.8})", hc.c, 1.0 / (2.0 * std::f64::consts::PI));

    let h = zoo::heisenberg();
    for n in [16, 32, 64] {
        let sol = GeodesicSolution::from_covector(&h, &[0.0; 3], &[1.0, 0.0, 0.0], 1000)?;
        let hc = heat_constant(&h, &sol, n)?;
        println!(
            "heisenberg N = {n}: c = {:.5}, det C̄₁ = {:.5}, spectral factor {:.5}",
            hc.c, hc.det_c1bar, hc.spectral_factor
        );
    }
    Ok(())
}
