//! Riemannian route to the same fluctuations: solve the Riccati equation
//! along a hyperbolic geodesic and drive the covariant linear SDE.

use subrift::fluctuation::{covariance, riccati_solve, sde_sample};
use subrift::models::zoo;
use subrift::shooting::GeodesicSolution;

fn main() -> subrift::Result<()> {
    let m = zoo::hyperbolic2();
    let sol = GeodesicSolution::from_covector(&m, &[0.0, 0.0], &[2.0, 0.0], 1000)?;
    let rd = riccati_solve(&m, &sol)?;
    let i = rd.t.iter().position(|&t| t >= 0.5).unwrap();
    println!("Riccati residual {:.2e}, A_½ = {:.4?}", rd.riccati_residual, rd.a[i].as_slice());

    let n = 4000;
    let paths = sde_sample(&rd, n, 200, 3)?;
    // row k of a path is v at t = k/200
    let mut emp = nalgebra::DMatrix::<f64>::zeros(2, 2);
    for p in &paths {
        emp += p.row(100).transpose() * p.row(100);
    }
    emp /= n as f64;
    let exact = covariance(&m, &sol, 0.5, 0.5)?;
    println!("Cov(v_½) from the SDE {:.4?}", emp.as_slice());
    println!("exact                 {:.4?}", exact.as_slice());
    Ok(())
}
