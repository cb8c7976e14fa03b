//! Walk along the sphere's equator and watch J₁ lose rank at the antipode.

use subrift::models::zoo;
use subrift::shooting::{classify, GeodesicSolution};

fn main() -> subrift::Result<()> {
    let m = zoo::sphere2();
    println!("{:>6} {:>12} {:>8}", "length", "min σ(J₁)", "t*");
    for l in [1.0, 2.0, 3.0, std::f64::consts::PI, 3.5] {
        // the chart is isometric on the unit circle, so |p0| is the length
        let sol = GeodesicSolution::from_covector(&m, &[1.0, 0.0], &[0.0, l], 1000)?;
        let r = classify(&m, &sol);
        let t = r.first_conjugate_time.map_or("-".to_string(), |t| format!("{t:.4}"));
        println!("{l:>6.3} {:>12.3e} {t:>8}", r.min_singular_j1);
    }
    Ok(())
}
