//! Gaussian bridge fluctuations around a sphere geodesic: sample the
//! assembled covariance and check one block empirically.

use subrift::fluctuation::{covariance, FluctuationKernel};
use subrift::models::zoo;
use subrift::shooting::GeodesicSolution;

fn main() -> subrift::Result<()> {
    let m = zoo::sphere2();
    let sol = GeodesicSolution::from_covector(&m, &[1.0, 0.0], &[0.0, 1.5], 1000)?;
    let ker = FluctuationKernel::on_times(&m, &sol, vec![0.25, 0.5, 0.75])?;
    println!("min eigenvalue {:.3e}, jitter {:.1e}", ker.min_eigenvalue, ker.jitter);

    let n = 20_000;
    let paths = ker.sample(n, 1);
    // empirical Cov(v_¼, v_¾) against the closed form J_s J₁⁻¹ K_tᵀ
    let mut emp = nalgebra::DMatrix::<f64>::zeros(2, 2);
    for p in &paths {
        emp += p.row(0).transpose() * p.row(2);
    }
    emp /= n as f64;
    let exact = covariance(&m, &sol, 0.25, 0.75)?;
    for i in 0..2 {
        println!("{:+.4?}  exact {:+.4?}", emp.row(i).iter().collect::<Vec<_>>(), exact.row(i).iter().collect::<Vec<_>>());
    }
    Ok(())
}
