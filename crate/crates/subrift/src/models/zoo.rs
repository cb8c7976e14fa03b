//! Builtin models with hand-written derivatives.
//!
//! Charts: `sphere2` is the stereographic chart of the unit sphere, so
//! a = ((1+|x|²)/2)² I and the unit circle is a great circle (the equator).
//! `hyperbolic2` is the Poincaré disk, a = ((1−|x|²)/2)² I on |x| < 1.

use std::sync::Arc;

use super::{Frame, Model};

struct Euclidean(usize);

impl Frame for Euclidean {
    fn dim(&self) -> usize {
        self.0
    }
    fn size(&self) -> usize {
        self.0
    }
    fn values(&self, _x: &[f64], out: &mut [f64]) {
        let d = self.0;
        out[..d * d].fill(0.0);
        for l in 0..d {
            out[l * d + l] = 1.0;
        }
    }
    fn jacobians(&self, _x: &[f64], out: &mut [f64]) {
        out[..self.0.pow(3)].fill(0.0);
    }
    fn hessians(&self, _x: &[f64], out: &mut [f64]) {
        out[..self.0.pow(4)].fill(0.0);
    }
}

/// X_ℓ = f(x) e_ℓ with f = (1 + κ|x|²)/2 on ℝ².
struct Conformal {
    kappa: f64,
}

impl Frame for Conformal {
    fn dim(&self) -> usize {
        2
    }
    fn size(&self) -> usize {
        2
    }
    fn values(&self, x: &[f64], out: &mut [f64]) {
        let f = 0.5 * (1.0 + self.kappa * (x[0] * x[0] + x[1] * x[1]));
        out[..4].copy_from_slice(&[f, 0.0, 0.0, f]);
    }
    fn jacobians(&self, x: &[f64], out: &mut [f64]) {
        out[..8].fill(0.0);
        for l in 0..2 {
            for j in 0..2 {
                out[(l * 2 + l) * 2 + j] = self.kappa * x[j];
            }
        }
    }
    fn hessians(&self, _x: &[f64], out: &mut [f64]) {
        out[..16].fill(0.0);
        for l in 0..2 {
            for j in 0..2 {
                out[((l * 2 + l) * 2 + j) * 2 + j] = self.kappa;
            }
        }
    }
}

/// X₁ = ∂x − (y/2)∂z, X₂ = ∂y + (x/2)∂z.
struct Heisenberg;

impl Frame for Heisenberg {
    fn dim(&self) -> usize {
        3
    }
    fn size(&self) -> usize {
        2
    }
    fn values(&self, x: &[f64], out: &mut [f64]) {
        out[..6].copy_from_slice(&[1.0, 0.0, -0.5 * x[1], 0.0, 1.0, 0.5 * x[0]]);
    }
    fn jacobians(&self, _x: &[f64], out: &mut [f64]) {
        out[..18].fill(0.0);
        out[2 * 3 + 1] = -0.5;
        out[(3 + 2) * 3] = 0.5;
    }
    fn hessians(&self, _x: &[f64], out: &mut [f64]) {
        out[..54].fill(0.0);
    }
}

/// X₁ = ∂x₁, X₂ = x₁∂x₂.
struct Grushin;

impl Frame for Grushin {
    fn dim(&self) -> usize {
        2
    }
    fn size(&self) -> usize {
        2
    }
    fn values(&self, x: &[f64], out: &mut [f64]) {
        out[..4].copy_from_slice(&[1.0, 0.0, 0.0, x[0]]);
    }
    fn jacobians(&self, _x: &[f64], out: &mut [f64]) {
        out[..8].fill(0.0);
        out[(2 + 1) * 2] = 1.0;
    }
    fn hessians(&self, _x: &[f64], out: &mut [f64]) {
        out[..16].fill(0.0);
    }
}

/// X₁ = y∂x, X₂ = ∂y, X₃ = s(x)·e^{−1/|x|}∂x with s ≡ 1 (`signed = false`)
/// or s = sgn x (`signed = true`). Both give a = diag(y² + e^{−2/|x|}, 1).
struct Flat2 {
    signed: bool,
}

impl Flat2 {
    /// Third field's x-component and its first two derivatives.
    fn g(&self, x: f64) -> (f64, f64, f64) {
        if x == 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let s = x.signum();
        let e = (-1.0 / x.abs()).exp();
        let x2 = x * x;
        let x3 = x2 * x;
        let x4 = x2 * x2;
        if self.signed {
            (s * e, e / x2, s * e / x4 - 2.0 * e / x3)
        } else {
            (e, s * e / x2, e / x4 - 2.0 * s * e / x3)
        }
    }
}

impl Frame for Flat2 {
    fn dim(&self) -> usize {
        2
    }
    fn size(&self) -> usize {
        3
    }
    fn values(&self, x: &[f64], out: &mut [f64]) {
        let (g, _, _) = self.g(x[0]);
        out[..6].copy_from_slice(&[x[1], 0.0, 0.0, 1.0, g, 0.0]);
    }
    fn jacobians(&self, x: &[f64], out: &mut [f64]) {
        let (_, g1, _) = self.g(x[0]);
        out[..12].fill(0.0);
        out[1] = 1.0;
        out[(2 * 2) * 2] = g1;
    }
    fn hessians(&self, x: &[f64], out: &mut [f64]) {
        let (_, _, g2) = self.g(x[0]);
        out[..24].fill(0.0);
        out[(2 * 2) * 4] = g2;
    }
}

pub fn euclidean(d: usize) -> Model {
    let mut m = Model::new(format!("euclidean{d}"), Arc::new(Euclidean(d))).with_riemannian(true);
    m.flat = true;
    m
}

/// Unit sphere, stereographic chart; valid away from the pole at infinity.
pub fn sphere2() -> Model {
    Model::new("sphere2", Arc::new(Conformal { kappa: 1.0 }))
        .with_riemannian(true)
        .with_chart_radius(1e3)
}

/// Hyperbolic plane, Poincaré disk chart.
pub fn hyperbolic2() -> Model {
    Model::new("hyperbolic2", Arc::new(Conformal { kappa: -1.0 }))
        .with_riemannian(true)
        .with_chart_radius(1.0)
}

pub fn heisenberg() -> Model {
    Model::new("heisenberg", Arc::new(Heisenberg))
}

pub fn grushin() -> Model {
    Model::new("grushin", Arc::new(Grushin))
}

pub fn sre_x() -> Model {
    Model::new("sreX", Arc::new(Flat2 { signed: false }))
}

pub fn sre_y() -> Model {
    Model::new("sreY", Arc::new(Flat2 { signed: true }))
}

/// Looks a zoo model up by name. `euclidean` is two-dimensional;
/// `euclideanN` selects dimension N.
pub fn by_name(name: &str) -> Option<Model> {
    match name {
        "euclidean" => Some(euclidean(2)),
        "sphere2" => Some(sphere2()),
        "hyperbolic2" => Some(hyperbolic2()),
        "heisenberg" => Some(heisenberg()),
        "grushin" => Some(grushin()),
        "sreX" => Some(sre_x()),
        "sreY" => Some(sre_y()),
        _ => name
            .strip_prefix("euclidean")
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&d| (1..=16).contains(&d))
            .map(euclidean),
    }
}

pub const NAMES: [&str; 7] =
    ["euclidean", "sphere2", "hyperbolic2", "heisenberg", "grushin", "sreX", "sreY"];
