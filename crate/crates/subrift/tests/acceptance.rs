//! Acceptance suite: one PASS/FAIL line per criterion, with runtime and the
//! measured quantities. Exits non-zero if any criterion fails.

mod common;

use std::f64::consts::PI;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subrift::fluctuation::*;
use subrift::hamflow::PhasePoint;
use subrift::models::{diffusivity, structure_equivalence_probe, zoo};
use subrift::montecarlo::*;
use subrift::secondvar::*;
use subrift::shooting::{classify, solve_geodesic, GeodesicSolution, ShootOptions};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn opts() -> ShootOptions {
    ShootOptions::default()
}

fn heis_to(y: &[f64]) -> GeodesicSolution {
    solve_geodesic(&zoo::heisenberg(), &[0.0; 3], y, &opts()).unwrap()
}

fn hyper_line(l: f64) -> GeodesicSolution {
    GeodesicSolution::from_covector(&zoo::hyperbolic2(), &[0.0, 0.0], &[2.0 * l, 0.0], 1000).unwrap()
}

fn c1_euclidean_covariance() -> Outcome {
    let e = zoo::euclidean(2);
    let sol = solve_geodesic(&e, &[0.0, 0.0], &[0.7, -0.4], &opts()).unwrap();
    let g = 16;
    let mut worst: f64 = 0.0;
    for a in 0..=g {
        for b in a..=g {
            let (s, t) = (a as f64 / g as f64, b as f64 / g as f64);
            let c = covariance(&e, &sol, s, t).map_err(|e| e.to_string())?;
            worst = worst.max((c - DMatrix::identity(2, 2) * (s * (1.0 - t))).amax());
        }
    }
    check(worst <= 1e-10, format!("max error {worst:.2e} (tol 1e-10)"))
}

fn c2_symplectic_symmetry() -> Outcome {
    let cases = [
        ("euclidean", GeodesicSolution::from_covector(&zoo::euclidean(2), &[0.0, 0.0], &[1.0, 0.5], 1000).unwrap()),
        ("sphere2", sphere_equator(1.0)),
        ("hyperbolic2", hyper_line(1.0)),
        ("heisenberg", heis_to(&[1.0, 0.0, 0.0])),
    ];
    let mut detail = Vec::new();
    let mut ok = true;
    for (name, sol) in &cases {
        let r = sol.jacobi.symmetry_residual();
        ok &= r <= 1e-7;
        detail.push(format!("{name} {r:.1e}"));
    }
    check(ok, format!("{} (tol 1e-7)", detail.join(", ")))
}

fn c3_integral_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for (m, sol) in [(zoo::sphere2(), sphere_equator(1.0)), (zoo::hyperbolic2(), hyper_line(1.0))] {
        let jd = &sol.jacobi;
        let dt = 1.0 / jd.steps as f64;
        let f: Vec<DMatrix<f64>> = (0..=jd.steps * 3 / 4)
            .map(|i| {
                let kinv = jd.k[i].clone().try_inverse().unwrap();
                &kinv * diffusivity(&m, sol.path.points[i].x.as_slice()).unwrap() * kinv.transpose()
            })
            .collect();
        for i in [jd.steps / 4, jd.steps / 2, jd.steps * 3 / 4] {
            let mut acc = &f[0] + &f[i];
            for k in 1..i {
                acc += &f[k] * if k % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc *= dt / 3.0;
            let rhs = &jd.k[i] * &acc * jd.k[0].transpose();
            worst = worst.max((&jd.j[i] - rhs).amax());
        }
    }
    check(worst <= 1e-6, format!("max gap {worst:.2e} (tol 1e-6)"))
}

fn c4_conjugate_time() -> Outcome {
    let r = classify(&zoo::sphere2(), &sphere_equator(3.5));
    match r.first_conjugate_time {
        Some(t) => {
            let e = (t - PI / 3.5).abs();
            check(e <= 1e-4, format!("t* = {t:.8}, error {e:.1e} (tol 1e-4)"))
        }
        None => Err("no conjugate time found".into()),
    }
}

fn c5_riccati() -> Outcome {
    let e = zoo::euclidean(2);
    let sol = solve_geodesic(&e, &[0.0, 0.0], &[0.5, 1.0], &opts()).unwrap();
    let rd = riccati_solve(&e, &sol).map_err(|e| e.to_string())?;
    let mut ew: f64 = 0.0;
    for i in 1..10 {
        let k = i * rd.t.len() / 10;
        ew = ew.max((&rd.a[k] + DMatrix::identity(2, 2) / (1.0 - rd.t[k])).amax());
    }
    let l = 2.0;
    let s = zoo::sphere2();
    let sol = sphere_equator(l);
    let rd2 = riccati_solve(&s, &sol).map_err(|e| e.to_string())?;
    let mut sw: f64 = 0.0;
    for i in 1..10 {
        let k = i * 100;
        let t = rd2.t[k];
        let n = sol.path.points[k].x.clone();
        let got = n.dot(&(&rd2.a[k] * &n)) / n.norm_squared();
        sw = sw.max((got + l / (l * (1.0 - t)).tan()).abs());
    }
    let res = rd2.riccati_residual;
    check(
        ew <= 1e-8 && sw <= 1e-4 && res <= 1e-6,
        format!("euclidean {ew:.1e} (tol 1e-8), sphere2 entry {sw:.1e} (tol 1e-4), residual {res:.1e} (tol 1e-6)"),
    )
}

fn c6_spectrum() -> Outcome {
    let e = zoo::euclidean(2);
    let sol = solve_geodesic(&e, &[0.0, 0.0], &[0.6, 0.8], &opts()).unwrap();
    let spec = q_spectrum(&e, &discretize(&e, &sol, 16).unwrap()).unwrap();
    let ed = spec.mu.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    let s = zoo::sphere2();
    let mus: Vec<f64> = [2.0, 2.5, 3.0, PI - 0.05]
        .iter()
        .map(|&l| q_spectrum(&s, &discretize(&s, &sphere_equator(l), 32).unwrap()).unwrap().mu_min())
        .collect();
    let mono = mus.windows(2).all(|w| w[1] < w[0]);
    let h = zoo::heisenberg();
    let hs = heis_to(&[1.0, 0.0, 0.0]);
    let a = q_spectrum(&h, &discretize(&h, &hs, 16).unwrap()).unwrap().mu_min();
    let b = q_spectrum(&h, &discretize(&h, &hs, 32).unwrap()).unwrap().mu_min();
    let rel = ((a - b) / b).abs();
    check(
        ed <= 1e-9 && mono && mus[0] > 0.3 && mus[3] < 0.05 && a > 0.1 && rel < 0.02,
        format!(
            "euclidean max|μ−1| {ed:.1e}; sphere μ_min {:?}; heisenberg μ_min {a:.4} vs {b:.4} ({:.2}%)",
            mus.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>(),
            100.0 * rel
        ),
    )
}

fn c7_first_variation() -> Outcome {
    let h = zoo::heisenberg();
    let mut worst: f64 = 0.0;
    for y in [vec![1.0, 0.0, 0.0], heisenberg_closed_form(0.6, -0.8, 3.0, 1.0).to_vec()] {
        let geo = discretize(&h, &heis_to(&y), 16).unwrap();
        let kern = kernel_basis(&h, &geo).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let c = DVector::from_fn(kern.basis.ncols(), |_, _| rng.random_range(-1.0..1.0));
            let k = ControlGrid::from_increments(16, 2, &kern.basis * c);
            let l = first_variation(&geo.h, &k);
            worst = worst.max(l.abs() / (geo.h.norm2().sqrt() * k.norm2().sqrt()));
        }
    }
    check(worst <= 1e-8, format!("max |L(k)|/(‖h‖‖k‖) {worst:.1e} (tol 1e-8)"))
}

fn c8_reproducing() -> Outcome {
    let h = zoo::heisenberg();
    let a = reproducing_residual(&h, &heis_to(&[1.0, 0.0, 0.0]), &DVector::from_vec(vec![0.0, 0.0, 1.0]), 1);
    let s = zoo::sphere2();
    let b = reproducing_residual(&s, &sphere_equator(2.0), &DVector::from_vec(vec![1.0, 0.5]), 3);
    check(a <= 1e-3 && b <= 1e-3, format!("heisenberg {a:.1e}, sphere2 {b:.1e} (tol 1e-3)"))
}

fn c9_heat_constant() -> Outcome {
    let e = zoo::euclidean(2);
    let sol = solve_geodesic(&e, &[0.0, 0.0], &[0.6, -0.8], &opts()).unwrap();
    let c = heat_constant(&e, &sol, 16).map_err(|e| e.to_string())?.c;
    let want = 1.0 / (2.0 * PI);
    let ee = (c - want).abs();
    // exact Gaussian kernel at distance 1: t·e^{1/2t}·p(t)
    let mut ge: f64 = 0.0;
    for t in [0.5, 0.1, 0.01] {
        let p = (2.0 * PI * t).recip() * (-1.0 / (2.0 * t)).exp();
        ge = ge.max((t * (1.0 / (2.0 * t)).exp() * p - c).abs());
    }
    let h = zoo::heisenberg();
    let hs = heis_to(&[1.0, 0.0, 0.0]);
    let a = heat_constant(&h, &hs, 32).map_err(|e| e.to_string())?.c;
    let b = heat_constant(&h, &hs, 64).map_err(|e| e.to_string())?.c;
    let rel = ((a - b) / b).abs();
    check(
        ee <= 1e-6 && ge <= 1e-6 && rel < 0.01,
        format!("euclidean c error {ee:.1e}, Gaussian identity {ge:.1e}, heisenberg c {a:.6} vs {b:.6} ({:.3}%)", 100.0 * rel),
    )
}

fn c10_clt_exact() -> Outcome {
    let e = zoo::euclidean(2);
    let sol = solve_geodesic(&e, &[0.0, 0.0], &[1.0, 0.0], &opts()).unwrap();
    let cfg = SdeConfig { eps: 0.1, steps: 400, grid: 16, n: 20_000, seed: 10, rho: 0.5 };
    let ens = bridge_ensemble(&e, &sol, &cfg).map_err(|e| e.to_string())?;
    let est = empirical_covariance(&ens, &[(0.25, 0.75), (0.5, 0.5)]).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for c in &est {
        let o = covariance(&e, &sol, c.s, c.t).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                worst = worst.max((c.estimate[i][j] - o[(i, j)]).abs() / c.se[i][j]);
            }
        }
    }
    check(worst <= 3.0, format!("n = {}, max |error|/SE {worst:.2} (tol 3)", ens.len()))
}

fn c11_clt_heisenberg() -> Outcome {
    let h = zoo::heisenberg();
    let sol = heis_to(&[1.0, 0.0, 0.0]);
    let cfg = SdeConfig { eps: 0.05, steps: 400, grid: 16, n: 200_000, seed: 11, rho: 0.5 };
    let rows = rho_sweep(&h, &sol, &cfg, &[1.0, 0.5, 0.25], 0.5).map_err(|e| e.to_string())?;
    let at = rows.iter().find(|r| r.rho == 0.5).unwrap();
    let mut in_band = true;
    for i in 0..3 {
        for j in 0..3 {
            in_band &= (at.estimate[i][j] - at.oracle[i][j]).abs() <= 5.0 * at.se[i][j] + at.band;
        }
    }
    let sweep_ok = rows
        .windows(2)
        .all(|w| w[1].discrepancy <= w[0].discrepancy + 2.0 * (w[0].discrepancy_se.powi(2) + w[1].discrepancy_se.powi(2)).sqrt());
    let table: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "ρ={} n={} disc {:.4}±{:.4} band {:.3} corrected z {:.1}",
                r.rho, r.accepted, r.discrepancy, r.discrepancy_se, r.band, r.corrected_max_z
            )
        })
        .collect();
    check(in_band && sweep_ok, format!("{} proposals; {}", cfg.n, table.join("; ")))
}

fn c12_representations() -> Outcome {
    let s = zoo::sphere2();
    let sol = sphere_equator(2.0);
    let n = 20_000;
    let kern = FluctuationKernel::on_times(&s, &sol, vec![0.5]).map_err(|e| e.to_string())?;
    let chol = kern.sample(n, 12);
    let a = &weighted_moments(&chol, &vec![1.0; n], &[(0, 0)], &[0.5])[0];
    let rd = riccati_solve(&s, &sol).map_err(|e| e.to_string())?;
    let steps = 200;
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    let sde = sde_sample(&rd, n, steps, 13).map_err(|e| e.to_string())?;
    let b = &weighted_moments(&sde, &vec![1.0; n], &[(steps / 2, steps / 2)], &times)[0];
    let rep = importance_weight_check(&rd, n, steps, 14, &[(0.5, 0.5)]).map_err(|e| e.to_string())?;
    let c = &rep.estimates[0];
    let mut worst: f64 = 0.0;
    for (x, y) in [(a, b), (a, c), (b, c)] {
        for i in 0..2 {
            for j in 0..2 {
                let se = (x.se[i][j].powi(2) + y.se[i][j].powi(2)).sqrt();
                worst = worst.max((x.estimate[i][j] - y.estimate[i][j]).abs() / se);
            }
        }
    }
    let nn = sol.path.points[500].x.clone();
    let pick = |e: &CovEstimate| {
        let m = DMatrix::from_fn(2, 2, |i, j| e.estimate[i][j]);
        nn.dot(&(m * &nn))
    };
    check(
        worst <= 5.0,
        format!(
            "normal entry: cholesky {:.4}, riccati-sde {:.4}, weighted bridges {:.4} (ESS {:.0}); max pairwise gap {worst:.2} SE (tol 5)",
            pick(a),
            pick(b),
            pick(c),
            rep.ess
        ),
    )
}

fn c13_varadhan() -> Outcome {
    let e = zoo::euclidean(2);
    let esol = solve_geodesic(&e, &[0.0, 0.0], &[1.0, 0.0], &opts()).unwrap();
    let cfg = SdeConfig { steps: 100, grid: 4, n: 20_000, seed: 13, ..Default::default() };
    let rows = varadhan_estimate(&e, &esol, &[0.2, 0.1, 0.05, 0.02], &cfg).map_err(|e| e.to_string())?;
    let ew = rows
        .iter()
        .map(|r| (r.value - gaussian_log_density(r.eps, 1.0, 2)).abs())
        .fold(0.0, f64::max);
    let h = zoo::heisenberg();
    let hsol = heis_to(&[1.0, 0.0, 0.0]);
    let dist = hsol.distance;
    let cfg = SdeConfig { steps: 400, grid: 4, n: 40_000, seed: 14, ..Default::default() };
    let hrows = varadhan_estimate(&h, &hsol, &[0.2, 0.1, 0.05, 0.02], &cfg).map_err(|e| e.to_string())?;
    // The gap to −d²/2 is ε·log(c ε^{−3/2}) + o(ε), which is not monotone
    // in ε (it peaks near ε = c^{2/3}/e ≈ 0.13). The trend is judged by the
    // distance to that two-term curve, with c from the second variation.
    let c = heat_constant(&h, &hsol, 32).map_err(|e| e.to_string())?.c;
    let two_term = |eps: f64| -dist * dist / 2.0 + eps * (c * eps.powf(-1.5)).ln();
    let dev: Vec<f64> = hrows.iter().map(|r| (r.value - two_term(r.eps)).abs()).collect();
    let trend = dev.windows(2).all(|w| w[1] <= w[0]);
    let last = (hrows.last().unwrap().value + dist * dist / 2.0).abs();
    check(
        ew <= 0.05 && trend && last <= 0.15,
        format!(
            "euclidean max error {ew:.4} (tol 0.05); heisenberg d = {dist:.6}, ε·log p̂ {:?}, distance to two-term curve {:?}, gap to −d²/2 at 0.02 {last:.3} (tol 0.15)",
            hrows.iter().map(|r| format!("{:.4}", r.value)).collect::<Vec<_>>(),
            dev.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn c14_concentration() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for (m, sol, n) in [
        (zoo::euclidean(2), solve_geodesic(&zoo::euclidean(2), &[0.0, 0.0], &[1.0, 0.0], &opts()).unwrap(), 20_000),
        (zoo::heisenberg(), heis_to(&[1.0, 0.0, 0.0]), 100_000),
    ] {
        let ens: Vec<BridgeEnsemble> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&eps| bridge_ensemble(&m, &sol, &SdeConfig { eps, steps: 400, grid: 100, n, seed: 15, rho: 0.5 }))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let rows = concentration_stat(&ens, 0.5).map_err(|e| e.to_string())?;
        for w in rows.windows(2) {
            ok &= w[1].fraction <= w[0].fraction + 2.0 * (w[0].se.powi(2) + w[1].se.powi(2)).sqrt();
        }
        detail.push(format!(
            "{}: {}",
            m.name,
            rows.iter().map(|r| format!("ε={} {:.4}±{:.4}", r.eps, r.fraction, r.se)).collect::<Vec<_>>().join(", ")
        ));
    }
    check(ok, detail.join("; "))
}

fn c15_frame_independence() -> Outcome {
    let (sx, sy) = (zoo::sre_x(), zoo::sre_y());
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let probes: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
    let lam = PhasePoint::new(&[-1.0, 0.5], &[1.0, 0.3]);
    let rep = structure_equivalence_probe(&sx, &sy, &probes, &lam, 1000).map_err(|e| e.to_string())?;
    let a = solve_geodesic(&sx, &[-1.0, 0.5], &[1.0, 0.5], &opts()).unwrap();
    let b = solve_geodesic(&sy, &[-1.0, 0.5], &[1.0, 0.5], &opts()).unwrap();
    let ca = heat_constant(&sx, &a, 32).map_err(|e| e.to_string())?.c;
    let cb = heat_constant(&sy, &b, 32).map_err(|e| e.to_string())?.c;
    let rel = ((ca - cb) / ca).abs();
    check(
        rep.max_diffusivity_gap <= 1e-12 && rep.flow_endpoint_gap <= 1e-8 && rel <= 0.01,
        format!(
            "diffusivity gap {:.1e}, endpoint gap {:.1e}, heat constant {ca:.6} vs {cb:.6} ({:.3}%)",
            rep.max_diffusivity_gap,
            rep.flow_endpoint_gap,
            100.0 * rel
        ),
    )
}

fn c16_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_subrift");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs: [(&str, &[&str]); 7] = [
        ("geodesic", &["--model", "heisenberg", "--y", "1,0,0"]),
        ("conjugate", &["--model", "sphere2", "--x", "1,0", "--p0", "0,2"]),
        ("qspec", &["--model", "heisenberg", "--y", "1,0,0"]),
        ("heat-const", &["--model", "heisenberg", "--y", "1,0,0"]),
        ("fluctuate", &["--model", "sphere2", "--x", "1,0", "--p0", "0,2", "--n", "500"]),
        ("verify-clt", &["--model", "heisenberg", "--y", "1,0,0", "--n", "20000", "--eps", "0.1"]),
        ("varadhan", &["--model", "euclidean", "--y", "1,0", "--eps", "0.1,0.05", "--n", "5000", "--grid", "4"]),
    ];
    let mut bad = Vec::new();
    for (cmd, args) in runs {
        let out = dir.path().join(cmd);
        let snap = || -> Result<Vec<(String, Vec<u8>)>, String> {
            let st = Command::new(bin)
                .arg(cmd)
                .args(args)
                .args(["--seed", "7", "--out", out.to_str().unwrap()])
                .env_remove("SUBRIFT_SEED")
                .status()
                .map_err(|e| e.to_string())?;
            if !st.success() {
                return Err(format!("{cmd} exited with {st}"));
            }
            let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
                .map_err(|e| e.to_string())?
                .map(|e| {
                    let p = e.unwrap().path();
                    (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
                })
                .collect();
            files.sort();
            Ok(files)
        };
        let a = snap()?;
        let b = snap()?;
        if a != b || a.len() < 2 {
            bad.push(cmd);
        }
    }
    check(bad.is_empty(), if bad.is_empty() { "7 subcommands byte-identical".into() } else { format!("differs: {bad:?}") })
}

fn main() {
    let criteria: [(u32, &str, u64, fn() -> Outcome); 16] = [
        (1, "euclidean covariance identity", 1, c1_euclidean_covariance),
        (2, "symplectic symmetry", 5, c2_symplectic_symmetry),
        (3, "Jacobi integral identity", 5, c3_integral_identity),
        (4, "conjugate time", 5, c4_conjugate_time),
        (5, "Riccati closed forms", 5, c5_riccati),
        (6, "second-variation spectrum", 60, c6_spectrum),
        (7, "first variation at the minimum", 10, c7_first_variation),
        (8, "reproducing property", 30, c8_reproducing),
        (9, "heat constant", 60, c9_heat_constant),
        (10, "CLT, exact bridge", 30, c10_clt_exact),
        (11, "CLT, heisenberg acceptance window", 300, c11_clt_heisenberg),
        (12, "representation equivalence", 120, c12_representations),
        (13, "Varadhan asymptotics", 300, c13_varadhan),
        (14, "concentration", 180, c14_concentration),
        (15, "frame independence", 30, c15_frame_independence),
        (16, "CLI determinism", 60, c16_determinism),
    ];
    let only: Option<u32> = std::env::args().nth(1).and_then(|a| a.parse().ok());
    let mut failed = 0;
    for (no, name, budget, f) in criteria {
        if only.is_some_and(|o| o != no) {
            continue;
        }
        let t0 = Instant::now();
        let res = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let dt = t0.elapsed();
        let slow = dt > Duration::from_secs(budget);
        let (tag, detail) = match (&res, slow) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {budget} s budget")),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("criterion {no:2} {tag} [{:.1} s / {budget} s] {name}: {detail}", dt.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
