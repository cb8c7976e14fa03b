//! A user frame given by values only. Derivatives come from forward-mode
//! jets, so everything downstream works unchanged. Here: the Martinet-like
//! structure X₁ = ∂x + (y²/2)∂z, X₂ = ∂y.

use subrift::models::{diffusivity, Model, Scalar, ValueFrame};
use subrift::shooting::{classify, solve_geodesic, ShootOptions};

struct Martinet;

impl ValueFrame for Martinet {
    fn dim(&self) -> usize {
        3
    }
    fn size(&self) -> usize {
        2
    }
    fn fields<S: Scalar>(&self, x: &[S]) -> Vec<Vec<S>> {
        let one = x[0].constant(1.0);
        let zero = x[0].constant(0.0);
        let z = x[0].constant(0.5) * x[1].powi(2);
        vec![vec![one.clone(), zero.clone(), z], vec![zero.clone(), one, zero]]
    }
}

fn main() -> subrift::Result<()> {
    let m = Model::custom("martinet", Martinet);
    println!("a(0,1,0) = {:.3?}", diffusivity(&m, &[0.0, 1.0, 0.0])?.as_slice());
    let sol = solve_geodesic(&m, &[0.0, 1.0, 0.0], &[1.0, 1.2, 0.6], &ShootOptions::default())?;
    let r = classify(&m, &sol);
    println!("d = {:.6}, min σ(J₁) = {:.3e}, outside cut locus: {}", sol.distance, r.min_singular_j1, r.outside_cut_locus);
    Ok(())
}
