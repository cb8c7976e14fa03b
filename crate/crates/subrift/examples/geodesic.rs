//! Shoot Heisenberg geodesics from the origin and compare with the
//! closed-form distance to the vertical axis, d(0, (0,0,z))² = 4π|z|.

use subrift::models::zoo;
use subrift::shooting::{solve_geodesic, ShootOptions};

fn main() -> subrift::Result<()> {
    let m = zoo::heisenberg();
    let o = ShootOptions::default();
    for y in [[1.0, 0.0, 0.0], [1.0, 1.0, 0.5], [0.0, 0.0, 1.0]] {
        let sol = solve_geodesic(&m, &[0.0; 3], &y, &o)?;
        println!(
            "y = {y:?}: d = {:.10}, p0 = {:.4?}, residual {:.1e}, {} distinct candidates",
            sol.distance,
            sol.lambda0.p.as_slice(),
            sol.residual,
            sol.multiplicity
        );
    }
    println!("√(4π) = {:.10}", (4.0 * std::f64::consts::PI).sqrt());
    Ok(())
}
