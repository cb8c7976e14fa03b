#![allow(dead_code)]
//! Closed forms shared by the integration tests.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subrift::fluctuation::reproducing_field;
use std::f64::consts::PI;
use subrift::models::{zoo, Model};
use subrift::secondvar::{discretize, q_spectrum_with_hessian, ControlGrid};
use subrift::shooting::GeodesicSolution;

/// Equator geodesic on sphere2 of length `l`, starting at (1, 0) heading
/// counter-clockwise. The chart is isometric on the unit circle.
pub fn equator(model: &Model, l: f64) -> GeodesicSolution {
    GeodesicSolution::from_covector(model, &[1.0, 0.0], &[0.0, l], 1000).unwrap()
}

pub fn sphere_equator(l: f64) -> GeodesicSolution {
    equator(&zoo::sphere2(), l)
}

/// Inverse stereographic projection onto the unit sphere.
pub fn to_sphere(x: &[f64]) -> Vector3<f64> {
    let r2 = x[0] * x[0] + x[1] * x[1];
    Vector3::new(2.0 * x[0], 2.0 * x[1], r2 - 1.0) / (1.0 + r2)
}

pub fn from_sphere(p: &Vector3<f64>) -> [f64; 2] {
    [p[0] / (1.0 - p[2]), p[1] / (1.0 - p[2])]
}

pub fn great_circle(x: &[f64], y: &[f64]) -> f64 {
    to_sphere(x).dot(&to_sphere(y)).clamp(-1.0, 1.0).acos()
}

/// Point at great-circle distance `dist` from x in direction angle `theta`.
pub fn sphere_point_at(x: &[f64], dist: f64, theta: f64) -> [f64; 2] {
    let p = to_sphere(x);
    let a = if p[2].abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    let e1 = (a - p * p.dot(&a)).normalize();
    let e2 = p.cross(&e1);
    let w = e1 * theta.cos() + e2 * theta.sin();
    from_sphere(&(p * dist.cos() + w * dist.sin()))
}

/// Control whose field along the equator geodesic of length `l` is
/// sin(πt)·N (N the outward normal): k̇ = π cos(πt)(cos lt, sin lt).
/// Increments by composite Simpson.
pub fn equator_normal_control(n: usize, l: f64) -> ControlGrid {
    let dt = 1.0 / n as f64;
    let f = |t: f64, c: usize| {
        let w = PI * (PI * t).cos();
        if c == 0 { w * (l * t).cos() } else { w * (l * t).sin() }
    };
    let mut inc = DVector::zeros(2 * n);
    let sub = 64;
    for i in 0..n {
        for j in 0..sub {
            let a = (i as f64 + j as f64 / sub as f64) * dt;
            let b = a + dt / sub as f64;
            for c in 0..2 {
                inc[2 * i + c] += (b - a) / 6.0 * (f(a, c) + 4.0 * f(0.5 * (a + b), c) + f(b, c));
            }
        }
    }
    ControlGrid::from_increments(n, 2, inc)
}

/// Closed-form Heisenberg trajectory from the origin with p = (a, b, θ).
pub fn heisenberg_closed_form(a: f64, b: f64, th: f64, t: f64) -> [f64; 3] {
    if th.abs() < 1e-12 {
        return [a * t, b * t, 0.0];
    }
    let (s, c) = ((th * t).sin(), (th * t).cos());
    let x = (a * s - b * (1.0 - c)) / th;
    let y = (b * s + a * (1.0 - c)) / th;
    let z = 0.5 * (a * a + b * b) * (t / th - s / (th * th));
    [x, y, z]
}

/// Worst |Q(v, v^{β,1/2}) − ⟨β, v_{1/2}⟩| / (|β| max|v|) over 10 random kernel
/// fields, with the control of v^{β,s} recovered by least squares.
pub fn reproducing_residual(m: &Model, sol: &GeodesicSolution, beta: &DVector<f64>, seed: u64) -> f64 {
    let n = 64;
    let geo = discretize(m, sol, n).unwrap();
    let (spec, hess) = q_spectrum_with_hessian(m, &geo).unwrap();
    let times: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let vb = reproducing_field(m, sol, beta, 0.5, &times).unwrap();
    // control of v^{β,s} by least squares over the node fields
    let d = m.d;
    let nm = n * m.m;
    let mut a = DMatrix::<f64>::zeros((n + 1) * d, nm);
    let mut b = DVector::<f64>::zeros((n + 1) * d);
    for i in 0..=n {
        a.view_mut((i * d, 0), (d, nm)).copy_from(&spec.v_nodes[i]);
        b.rows_mut(i * d, d).copy_from(&vb[i]);
    }
    let kb = a.svd(true, true).solve(&b, 1e-12).unwrap();
    let kb = ControlGrid::from_increments(n, m.m, kb);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let c = DVector::from_fn(spec.kernel.basis.ncols(), |_, _| rng.random_range(-1.0..1.0));
        let k = ControlGrid::from_increments(n, m.m, &spec.kernel.basis * c);
        let v = spec.field(&k);
        let q = spec.q_bilinear(&hess, &k, &kb);
        let vnorm = v.iter().map(|x| x.norm()).fold(0.0, f64::max);
        worst = worst.max((q - beta.dot(&v[n / 2])).abs() / (beta.norm() * vnorm));
    }
    worst
}
