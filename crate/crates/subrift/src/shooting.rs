//! Two-point geodesic problem by damped Newton shooting on p₀.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hamflow::{self, BicharPath, JacobiData, LinSystem, PhasePoint};
use crate::models::{diffusivity, Model};

#[derive(Clone, Debug)]
pub struct ShootOptions {
    pub starts: usize,
    pub steps: usize,
    pub tol_bvp: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub dedupe_tol: f64,
}

impl Default for ShootOptions {
    fn default() -> Self {
        ShootOptions {
            starts: 32,
            steps: hamflow::DEFAULT_STEPS,
            tol_bvp: 1e-10,
            max_iter: 60,
            seed: 0,
            dedupe_tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeodesicSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub lambda0: PhasePoint,
    pub path: BicharPath,
    pub jacobi: JacobiData,
    pub energy: f64,
    pub distance: f64,
    pub residual: f64,
    pub minimal: bool,
    /// Distinct converged initial covectors.
    pub multiplicity: usize,
    /// Distinct converged covectors whose energy ties the best one.
    pub minimal_count: usize,
    /// Relative energy gap to the next distinct candidate (proxy for strict
    /// minimality; infinite when only one candidate was found).
    pub energy_gap: f64,
}

impl GeodesicSolution {
    /// Wraps the bicharacteristic from a given covector without shooting;
    /// minimality is not asserted.
    pub fn from_covector(model: &Model, x: &[f64], p0: &[f64], steps: usize) -> Result<Self> {
        let lam = PhasePoint::new(x, p0);
        let path = hamflow::flow(model, &lam, 1.0, steps)?;
        let jacobi = hamflow::jacobi_pair(model, &path)?;
        let energy = 2.0 * path.h0;
        Ok(GeodesicSolution {
            x: lam.x.clone(),
            y: path.end().x.clone(),
            lambda0: lam,
            energy,
            distance: energy.sqrt(),
            residual: 0.0,
            minimal: false,
            multiplicity: 1,
            minimal_count: 1,
            energy_gap: f64::INFINITY,
            path,
            jacobi,
        })
    }

    pub fn model_steps(&self) -> usize {
        self.path.steps
    }
}

#[derive(Clone, Debug)]
pub struct Shot {
    pub endpoint: DVector<f64>,
    pub j1: DMatrix<f64>,
}

/// Endpoint πψ₁(x, p₀) and J₁.
pub fn shoot(model: &Model, x: &[f64], p0: &[f64], steps: usize) -> Result<Shot> {
    let d = model.d;
    if x.len() != d || p0.len() != d {
        return Err(Error::Dimension { expected: d, got: x.len().min(p0.len()) });
    }
    let mut sys = LinSystem::new(model, d, false);
    let mut y: Vec<f64> = x.iter().chain(p0).copied().collect();
    y.extend(std::iter::repeat_n(0.0, d * d));
    y.extend(DMatrix::<f64>::identity(d, d).iter());
    let h = 1.0 / steps as f64;
    for i in 0..steps {
        sys.step(&mut y, h);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t: (i + 1) as f64 * h });
        }
        if y[..2 * d].iter().any(|v| v.abs() > hamflow::DEFAULT_ESCAPE_BOUND)
            || y[..d].iter().map(|v| v * v).sum::<f64>().sqrt() > model.chart_radius
        {
            return Err(Error::FlowEscape { t: (i + 1) as f64 * h, bound: model.chart_radius });
        }
    }
    Ok(Shot {
        endpoint: DVector::from_column_slice(&y[..d]),
        j1: DMatrix::from_column_slice(d, d, &y[2 * d..2 * d + d * d]),
    })
}

/// Least-squares solve that tolerates a singular J₁.
fn solve_step(j1: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    if let Some(s) = j1.clone().lu().solve(r) {
        if s.iter().all(|v| v.is_finite()) {
            return s;
        }
    }
    let svd = j1.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max();
    svd.solve(r, tol).unwrap_or_else(|_| DVector::zeros(r.len()))
}

#[derive(Clone, Debug)]
struct Candidate {
    p0: DVector<f64>,
    residual: f64,
    converged: bool,
}

/// Newton on a coarse grid first, then polished on the full grid.
fn newton(model: &Model, x: &[f64], y: &DVector<f64>, p_init: DVector<f64>, o: &ShootOptions) -> Candidate {
    let coarse = o.steps.min(100);
    if coarse < o.steps {
        let oc = ShootOptions { steps: coarse, tol_bvp: 1e-7, ..o.clone() };
        let c = newton_at(model, x, y, p_init, &oc);
        if !c.converged {
            return c;
        }
        return newton_at(model, x, y, c.p0, o);
    }
    newton_at(model, x, y, p_init, o)
}

fn newton_at(model: &Model, x: &[f64], y: &DVector<f64>, p_init: DVector<f64>, o: &ShootOptions) -> Candidate {
    let mut p = p_init;
    let mut shot = match shoot(model, x, p.as_slice(), o.steps) {
        Ok(s) => s,
        Err(_) => return Candidate { p0: p, residual: f64::INFINITY, converged: false },
    };
    let mut r = y - &shot.endpoint;
    let mut rn = r.norm();
    for _ in 0..o.max_iter {
        if rn <= o.tol_bvp {
            break;
        }
        let step = solve_step(&shot.j1, &r);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=30 {
            let trial = &p + alpha * &step;
            if let Ok(s) = shoot(model, x, trial.as_slice(), o.steps) {
                let rt = y - &s.endpoint;
                if rt.norm() < rn {
                    p = trial;
                    shot = s;
                    r = rt;
                    rn = r.norm();
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Candidate { converged: rn <= o.tol_bvp, p0: p, residual: rn }
}

/// Initial covectors: the chart straight-line momentum, then Gaussian draws
/// scaled so that 2H(λ₀) = |y − x|². Odd draws are inflated by a log-uniform
/// factor in [1, 30]: in bracket directions the sub-Riemannian distance is
/// much larger than the chart distance.
fn starts(model: &Model, x: &[f64], y: &DVector<f64>, o: &ShootOptions) -> Result<Vec<DVector<f64>>> {
    let xv = DVector::from_column_slice(x);
    let dy = y - &xv;
    let a = diffusivity(model, x)?;
    let svd = a.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1e-300);
    let seed0 = svd.solve(&dy, tol).unwrap_or_else(|_| dy.clone());
    let mut out = vec![seed0];
    let target = dy.norm();
    for k in 1..o.starts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
        rng.set_stream(k as u64);
        let mut p = DVector::from_fn(model.d, |_, _| StandardNormal.sample(&mut rng));
        let h = hamflow::hamiltonian(model, &PhasePoint { x: xv.clone(), p: p.clone() });
        if h > 0.0 {
            p *= target / (2.0 * h).sqrt();
        }
        if k % 2 == 1 {
            p *= 30f64.powf(rng.random::<f64>());
        }
        out.push(p);
    }
    Ok(out)
}

pub fn solve_geodesic(model: &Model, x: &[f64], y: &[f64], o: &ShootOptions) -> Result<GeodesicSolution> {
    let d = model.d;
    if x.len() != d || y.len() != d {
        return Err(Error::Dimension { expected: d, got: x.len().min(y.len()) });
    }
    let yv = DVector::from_column_slice(y);
    if x == y {
        let mut sol = GeodesicSolution::from_covector(model, x, &vec![0.0; d], o.steps)?;
        sol.minimal = true;
        return Ok(sol);
    }
    let inits = starts(model, x, &yv, o)?;
    let cands: Vec<Candidate> =
        inits.into_par_iter().map(|p| newton(model, x, &yv, p, o)).collect();
    let best_residual = cands.iter().map(|c| c.residual).fold(f64::INFINITY, f64::min);
    let mut distinct: Vec<(DVector<f64>, f64, f64)> = Vec::new();
    for c in cands.iter().filter(|c| c.converged) {
        if distinct.iter().all(|(q, _, _)| (q - &c.p0).norm() > o.dedupe_tol) {
            let e = 2.0 * hamflow::hamiltonian(model, &PhasePoint { x: DVector::from_column_slice(x), p: c.p0.clone() });
            distinct.push((c.p0.clone(), e, c.residual));
        }
    }
    if distinct.is_empty() {
        return Err(Error::NoConvergence { candidates: cands.len(), best_residual });
    }
    let best = distinct
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .unwrap();
    let (p0, energy, residual) = distinct[best].clone();
    let tie = |e: f64| e <= energy * (1.0 + 1e-9) + 1e-300;
    let minimal_count = distinct.iter().filter(|c| tie(c.1)).count();
    let energy_gap = distinct
        .iter()
        .filter(|c| !tie(c.1))
        .map(|c| (c.1 - energy) / energy.max(1e-300))
        .fold(f64::INFINITY, f64::min);
    let mut sol = GeodesicSolution::from_covector(model, x, p0.as_slice(), o.steps)?;
    sol.y = yv;
    sol.energy = energy;
    sol.distance = energy.sqrt();
    sol.residual = residual;
    sol.minimal = true;
    sol.multiplicity = distinct.len();
    sol.minimal_count = minimal_count;
    sol.energy_gap = energy_gap;
    Ok(sol)
}

pub fn distance(model: &Model, x: &[f64], y: &[f64], o: &ShootOptions) -> Result<f64> {
    Ok(solve_geodesic(model, x, y, o)?.distance)
}

#[derive(Clone, Debug, Serialize)]
pub struct CutLocusReport {
    pub det_j1: f64,
    pub min_singular_j1: f64,
    pub tol_conj: f64,
    pub first_conjugate_time: Option<f64>,
    pub symmetric_residual: f64,
    pub c1bar_min_eigenvalue: f64,
    pub regular: bool,
    pub unique_minimal: bool,
    pub outside_cut_locus: bool,
}

fn min_sv(m: &DMatrix<f64>) -> f64 {
    m.singular_values().min()
}

pub fn classify(model: &Model, sol: &GeodesicSolution) -> CutLocusReport {
    let jd = &sol.jacobi;
    let n = jd.steps;
    let j1 = &jd.j[n];
    let norm_j1 = j1.singular_values().max();
    let tol_conj = 1e-6 * norm_j1;
    let sigma1 = min_sv(j1);
    let mut conj = None;
    for i in 1..=n {
        if min_sv(&jd.j[i]) < tol_conj {
            let (mut lo, mut hi) = (jd.t[i - 1], jd.t[i]);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if min_sv(&jd.j_at(model, &sol.path, mid)) < tol_conj {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            conj = Some(hi);
            break;
        }
        if i >= 2 && jd.j[i - 1].determinant().signum() != jd.j[i].determinant().signum() {
            let (mut lo, mut hi) = (jd.t[i - 1], jd.t[i]);
            let s_lo = jd.j[i - 1].determinant().signum();
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if jd.j_at(model, &sol.path, mid).determinant().signum() == s_lo {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            conj = Some(0.5 * (lo + hi));
            break;
        }
    }
    let ev = jd.c1bar.clone().symmetric_eigenvalues();
    let cmin = ev.min();
    let regular = cmin > 1e-10 * ev.max().max(1.0);
    let unique_minimal = sol.minimal && sol.minimal_count == 1;
    CutLocusReport {
        det_j1: j1.determinant(),
        min_singular_j1: sigma1,
        tol_conj,
        first_conjugate_time: conj,
        symmetric_residual: jd.symmetry_residual(),
        c1bar_min_eigenvalue: cmin,
        regular,
        unique_minimal,
        outside_cut_locus: unique_minimal && sigma1 > tol_conj,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::zoo;

    #[test]
    fn euclidean_shot() {
        let s = shoot(&zoo::euclidean(2), &[0.0, 0.0], &[2.0, -1.0], 50).unwrap();
        assert!((s.endpoint[0] - 2.0).abs() < 1e-14 && (s.endpoint[1] + 1.0).abs() < 1e-14);
        assert!((s.j1 - DMatrix::<f64>::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn euclidean_geodesic() {
        let sol = solve_geodesic(&zoo::euclidean(2), &[0.0, 0.0], &[3.0, 4.0], &ShootOptions::default()).unwrap();
        assert!((sol.distance - 5.0).abs() < 1e-12);
        assert!((sol.lambda0.p[0] - 3.0).abs() < 1e-10 && (sol.lambda0.p[1] - 4.0).abs() < 1e-10);
        assert_eq!(sol.multiplicity, 1);
        let r = classify(&zoo::euclidean(2), &sol);
        assert!((r.det_j1 - 1.0).abs() < 1e-12);
        assert!(r.first_conjugate_time.is_none() && r.regular && r.outside_cut_locus);
    }

    #[test]
    fn heisenberg_straight_line() {
        let h = zoo::heisenberg();
        let s = shoot(&h, &[0.0; 3], &[1.0, 0.0, 0.0], 100).unwrap();
        assert!((s.endpoint - DVector::from_vec(vec![1.0, 0.0, 0.0])).amax() < 1e-14);
        let sol = solve_geodesic(&h, &[0.0; 3], &[1.0, 0.0, 0.0], &ShootOptions::default()).unwrap();
        assert!((sol.distance - 1.0).abs() < 1e-8);
        assert!(sol.path.points.iter().all(|q| q.x[1].abs() < 1e-9 && q.x[2].abs() < 1e-9));
    }

    #[test]
    fn no_convergence_is_reported() {
        // y is not reachable within one step of the flow.
        let o = ShootOptions { starts: 2, steps: 2, max_iter: 0, ..Default::default() };
        let e = solve_geodesic(&zoo::sphere2(), &[1.0, 0.0], &[-0.3, 0.8], &o).unwrap_err();
        assert!(matches!(e, Error::NoConvergence { .. }));
    }
}
