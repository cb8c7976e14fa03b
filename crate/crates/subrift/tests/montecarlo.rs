mod common;

use nalgebra::DVector;
use subrift::error::Error;
use subrift::fluctuation::covariance;
use subrift::models::zoo;
use subrift::montecarlo::*;
use subrift::shooting::GeodesicSolution;

fn heis_line() -> GeodesicSolution {
    GeodesicSolution::from_covector(&zoo::heisenberg(), &[0.0; 3], &[1.0, 0.0, 0.0], 1000).unwrap()
}

fn heis_curved() -> GeodesicSolution {
    GeodesicSolution::from_covector(&zoo::heisenberg(), &[0.0; 3], &[1.0, 0.0, 2.0], 1000).unwrap()
}

fn euclid_line() -> GeodesicSolution {
    GeodesicSolution::from_covector(&zoo::euclidean(2), &[0.0, 0.0], &[1.0, 0.0], 1000).unwrap()
}

#[test]
fn euclidean_endpoint_law() {
    let m = zoo::euclidean(2);
    let cfg = SdeConfig { eps: 0.1, steps: 100, grid: 4, n: 20_000, seed: 11, ..Default::default() };
    let x = [0.3, -0.2];
    let s = simulate_sde(&m, &cfg, &x, false).unwrap();
    let n = s.endpoints.len() as f64;
    let mean = s.endpoints.iter().fold(DVector::zeros(2), |a, e| a + e) / n;
    for i in 0..2 {
        let se = (0.1 / n).sqrt();
        assert!((mean[i] - x[i]).abs() < 3.0 * se, "mean {i}: {}", mean[i]);
    }
    for i in 0..2 {
        for j in 0..2 {
            let c = s.endpoints.iter().map(|e| (e[i] - x[i]) * (e[j] - x[j])).sum::<f64>() / n;
            let truth = if i == j { 0.1 } else { 0.0 };
            let se = if i == j { 0.1 * (2.0 / n).sqrt() } else { 0.1 / n.sqrt() };
            assert!((c - truth).abs() < 4.0 * se, "cov {i}{j}: {c}");
        }
    }
}

#[test]
fn heisenberg_vertical_mean_vanishes() {
    let m = zoo::heisenberg();
    for seed in [1, 2] {
        let cfg = SdeConfig { eps: 0.05, steps: 200, grid: 4, n: 10_000, seed, ..Default::default() };
        let s = simulate_sde(&m, &cfg, &[0.0; 3], false).unwrap();
        let z: Vec<f64> = s.endpoints.iter().map(|e| e[2]).collect();
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 3.0 * sd / n.sqrt(), "seed {seed}: {mean} sd {sd}");
    }
}

#[test]
fn tilted_zero_noise_follows_geodesic() {
    let m = zoo::heisenberg();
    let line = heis_line();
    let cfg = SdeConfig { eps: 0.0, steps: 200, grid: 8, n: 1, ..Default::default() };
    let t = simulate_tilted(&m, &line, &cfg).unwrap();
    assert!(t.mean_sup_distance() < 1e-12);
    // Euler on a curved geodesic: first-order convergence
    let sol = heis_curved();
    let err = |steps| {
        let c = SdeConfig { eps: 0.0, steps, grid: 8, n: 1, ..Default::default() };
        simulate_tilted(&m, &sol, &c).unwrap().mean_sup_distance()
    };
    let (e1, e2) = (err(200), err(400));
    assert!(e1 < 0.05, "{e1}");
    assert!((e1 / e2 - 2.0).abs() < 0.2, "{e1} {e2}");
}

#[test]
fn tilted_euclidean_is_shifted_brownian_motion() {
    let m = zoo::euclidean(2);
    let cfg = SdeConfig { eps: 0.3, steps: 100, grid: 4, n: 20_000, seed: 5, ..Default::default() };
    let t = simulate_tilted(&m, &euclid_line(), &cfg).unwrap();
    let v = t.rescaled();
    let n = v.len() as f64;
    for (row, var) in [(2, 0.5), (4, 1.0)] {
        for i in 0..2 {
            let c = v.iter().map(|p| p[(row, i)] * p[(row, i)]).sum::<f64>() / n;
            assert!((c - var).abs() < 4.0 * var * (2.0 / n).sqrt(), "{row} {i}: {c}");
        }
    }
}

#[test]
fn tilted_deviation_scales_like_sqrt_eps() {
    let m = zoo::heisenberg();
    let sol = heis_curved();
    let d: Vec<f64> = [0.1, 0.05, 0.025]
        .iter()
        .map(|&eps| {
            let c = SdeConfig { eps, steps: 200, grid: 20, n: 2000, seed: 3, ..Default::default() };
            simulate_tilted(&m, &sol, &c).unwrap().mean_sup_distance()
        })
        .collect();
    let r2 = std::f64::consts::SQRT_2;
    for w in d.windows(2) {
        let ratio = w[0] / w[1];
        assert!(ratio > r2 / 1.6 && ratio < r2 * 1.6, "{d:?}");
    }
}

#[test]
fn tilted_heisenberg_endpoint_covariance() {
    // Along the straight line the rescaled endpoint is the linear Gaussian
    // with covariance C̄₁ plus √ε times a Lévy area in the vertical slot,
    // which adds ε(1 − Δt)/4 to the zz variance of the Euler chain.
    let m = zoo::heisenberg();
    let sol = heis_line();
    let eps = 0.05;
    let cfg = SdeConfig { eps, steps: 200, grid: 4, n: 10_000, seed: 9, ..Default::default() };
    let t = simulate_tilted(&m, &sol, &cfg).unwrap();
    let v = t.rescaled();
    let n = v.len() as f64;
    let mut oracle = sol.jacobi.c1bar.clone();
    oracle[(2, 2)] += eps * (1.0 - 1.0 / 200.0) / 4.0;
    for i in 0..3 {
        for j in 0..3 {
            let xs: Vec<f64> = v.iter().map(|p| p[(4, i)] * p[(4, j)]).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!((mean - oracle[(i, j)]).abs() < 5.0 * sd / n.sqrt(), "{i}{j}: {mean} vs {}", oracle[(i, j)]);
        }
    }
}

#[test]
fn exact_bridge_covariance() {
    let m = zoo::euclidean(2);
    let cfg = SdeConfig { eps: 0.7, steps: 100, grid: 4, n: 20_000, seed: 21, ..Default::default() };
    let e = bridge_ensemble(&m, &euclid_line(), &cfg).unwrap();
    assert!(e.exact);
    assert!(e.paths.iter().all(|p| p.row(0).norm() == 0.0 && p.row(4).norm() < 1e-12));
    let est = empirical_covariance(&e, &[(0.25, 0.75), (0.5, 0.5)]).unwrap();
    for (c, truth) in est.iter().zip([0.0625, 0.25]) {
        for i in 0..2 {
            for j in 0..2 {
                let t = if i == j { truth } else { 0.0 };
                assert!((c.estimate[i][j] - t).abs() < 3.0 * c.se[i][j], "{c:?}");
            }
        }
    }
}

#[test]
fn single_sample_is_inconclusive() {
    let m = zoo::euclidean(2);
    let cfg = SdeConfig { n: 1, steps: 100, grid: 4, ..Default::default() };
    let e = bridge_ensemble(&m, &euclid_line(), &cfg).unwrap();
    assert!(matches!(empirical_covariance(&e, &[(0.5, 0.5)]), Err(Error::Inconclusive(_))));
}

#[test]
fn heisenberg_bridge_ensemble() {
    let m = zoo::heisenberg();
    let sol = heis_line();
    let cfg = SdeConfig { eps: 0.05, steps: 200, grid: 4, n: 40_000, seed: 4, rho: 0.5 };
    let e = bridge_ensemble(&m, &sol, &cfg).unwrap();
    assert!(e.acceptance_rate > 0.0);
    assert!(e.endpoint_dev.iter().all(|&r| r <= 0.5));
    assert!(e.paths.iter().all(|p| p.row(0).norm() == 0.0));
    let c = empirical_covariance(&e, &[(0.5, 0.5)]).unwrap().remove(0);
    for i in 0..3 {
        for j in 0..3 {
            let gap = (c.estimate[i][j] - c.estimate[j][i]).abs();
            assert!(gap <= c.se[i][j].max(1e-15), "{c:?}");
        }
    }
    // the window bias stays inside the linear-Gaussian band
    let oracle = covariance(&m, &sol, 0.5, 0.5).unwrap();
    let band = clt_band(&sol, 0.5, 0.5, 0.5).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let err = (c.estimate[i][j] - oracle[(i, j)]).abs();
            assert!(err <= 5.0 * c.se[i][j] + band, "{i}{j}: {err} band {band}");
        }
    }
    // restricting reuses the proposals
    let half = e.restrict(0.25);
    assert_eq!(half.proposals, e.proposals);
    assert!(half.len() < e.len());
}

#[test]
fn clt_band_euclidean() {
    // conditioning Brownian motion on |B₁| ≤ ρ perturbs Cov(B_s) by at most ρ²s²
    let b = clt_band(&euclid_line(), 0.5, 0.5, 0.4).unwrap();
    assert!((b - 0.16 * 0.25).abs() < 1e-10, "{b}");
}

#[test]
fn varadhan_euclidean() {
    let m = zoo::euclidean(2);
    let cfg = SdeConfig { steps: 100, grid: 4, n: 20_000, seed: 13, ..Default::default() };
    let rows = varadhan_estimate(&m, &euclid_line(), &[0.2, 0.1, 0.05, 0.02], &cfg).unwrap();
    for r in &rows {
        let exact = gaussian_log_density(r.eps, 1.0, 2);
        assert!((r.value - exact).abs() < 0.05, "{r:?} vs {exact}");
        assert!((r.limit + 0.5).abs() < 1e-9);
    }
}

#[test]
fn varadhan_heisenberg_and_heat_constant() {
    let m = zoo::heisenberg();
    let sol = heis_line();
    let cfg = SdeConfig { steps: 200, grid: 4, n: 20_000, seed: 17, ..Default::default() };
    let rows = varadhan_estimate(&m, &sol, &[0.1, 0.05, 0.02], &cfg).unwrap();
    eprintln!("{rows:?}");
    let last = rows.last().unwrap();
    assert!((last.value + 0.5).abs() <= 0.15, "{last:?}");
    let gaps: Vec<f64> = rows.iter().map(|r| (r.value + 0.5).abs()).collect();
    assert!(gaps.windows(2).all(|w| w[1] <= w[0]), "{gaps:?}");
    let c = subrift::secondvar::heat_constant(&m, &sol, 32).unwrap().c;
    let eps = last.eps;
    let scaled = ((last.value - last.limit) / eps).exp() * eps.powf(1.5);
    eprintln!("scaled {scaled} c {c}");
    assert!((scaled / c - 1.0).abs() < 0.25, "{scaled} vs {c}");
}

#[test]
fn concentration_tails_shrink() {
    let r = 0.5;
    let e = zoo::euclidean(2);
    let h = zoo::heisenberg();
    let eline = euclid_line();
    let hline = heis_line();
    for (m, sol, n) in [(&e, &eline, 4000), (&h, &hline, 40_000)] {
        let ens: Vec<BridgeEnsemble> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&eps| {
                let cfg = SdeConfig { eps, steps: 200, grid: 50, n, seed: 8, rho: 0.5 };
                bridge_ensemble(m, sol, &cfg).unwrap()
            })
            .collect();
        let rows = concentration_stat(&ens, r).unwrap();
        eprintln!("{} {rows:?}", m.name);
        for w in rows.windows(2) {
            let se = (w[0].se.powi(2) + w[1].se.powi(2)).sqrt();
            assert!(w[1].fraction <= w[0].fraction + 2.0 * se, "{rows:?}");
        }
        let none = concentration_stat(&ens, 1e6).unwrap();
        assert!(none.iter().all(|t| t.fraction == 0.0));
    }
}

#[test]
fn deterministic_per_seed() {
    let m = zoo::heisenberg();
    let cfg = SdeConfig { eps: 0.1, steps: 100, grid: 4, n: 500, seed: 99, rho: 1.0 };
    let a = bridge_ensemble(&m, &heis_line(), &cfg).unwrap();
    let b = bridge_ensemble(&m, &heis_line(), &cfg).unwrap();
    assert_eq!(a.paths, b.paths);
    let c = bridge_ensemble(&m, &heis_line(), &SdeConfig { seed: 100, ..cfg }).unwrap();
    assert_ne!(a.paths, c.paths);
}

#[test]
fn too_few_ensembles_rejected() {
    assert!(concentration_stat(&[], 0.5).is_err());
}
