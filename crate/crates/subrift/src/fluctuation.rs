//! The Gaussian limit of rescaled bridge fluctuations around a geodesic.
//!
//! Covariance C(s,t) = J_s J₁⁻¹ K_tᵀ for s ≤ t, sampled exactly on a grid by
//! Cholesky. On Riemannian models the same law is produced by a linear SDE
//! with Riccati drift, and by reweighting a parallel-transported flat bridge
//! with exp(½∫⟨v, R v⟩).

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hamflow::{Rk4, Ws};
use crate::models::{diffusivity, Model};
use crate::shooting::GeodesicSolution;

pub const DEFAULT_GRID: usize = 64;
pub const CHRISTOFFEL_STEP: f64 = 1e-4;
const JITTER_LADDER: [f64; 7] = [0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-6];

fn j1_inverse(sol: &GeodesicSolution) -> Result<DMatrix<f64>> {
    let j1 = &sol.jacobi.j[sol.jacobi.steps];
    let sv = j1.singular_values();
    let (lo, hi) = (sv.min(), sv.max());
    if !(lo > 1e-12 * hi.max(1e-300)) {
        return Err(Error::SingularJ1 { sigma: lo });
    }
    j1.clone().try_inverse().ok_or(Error::SingularJ1 { sigma: lo })
}

/// C(s, t) = J_s J₁⁻¹ K_tᵀ (s ≤ t); C(t, s) = C(s, t)ᵀ.
pub fn covariance(model: &Model, sol: &GeodesicSolution, s: f64, t: f64) -> Result<DMatrix<f64>> {
    let j1inv = j1_inverse(sol)?;
    Ok(cov_with(model, sol, &j1inv, s, t))
}

fn cov_with(model: &Model, sol: &GeodesicSolution, j1inv: &DMatrix<f64>, s: f64, t: f64) -> DMatrix<f64> {
    if s > t {
        return cov_with(model, sol, j1inv, t, s).transpose();
    }
    let jd = &sol.jacobi;
    jd.j_at(model, &sol.path, s) * j1inv * jd.k_at(model, t).transpose()
}

/// Grid covariance of the fluctuation measure and its Cholesky factor.
#[derive(Clone, Debug)]
pub struct FluctuationKernel {
    pub d: usize,
    /// Interior times i/(G+1), i = 1..G.
    pub times: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    pub jitter: f64,
    pub min_eigenvalue: f64,
}

impl FluctuationKernel {
    pub fn new(model: &Model, sol: &GeodesicSolution, g: usize) -> Result<Self> {
        let times: Vec<f64> = (1..=g).map(|i| i as f64 / (g + 1) as f64).collect();
        Self::on_times(model, sol, times)
    }

    pub fn on_times(model: &Model, sol: &GeodesicSolution, times: Vec<f64>) -> Result<Self> {
        let d = model.d;
        let g = times.len();
        let j1inv = j1_inverse(sol)?;
        let js: Vec<DMatrix<f64>> = times.iter().map(|&t| sol.jacobi.j_at(model, &sol.path, t) * &j1inv).collect();
        let ks: Vec<DMatrix<f64>> = times.iter().map(|&t| sol.jacobi.k_at(model, t)).collect();
        let mut cov = DMatrix::<f64>::zeros(g * d, g * d);
        for a in 0..g {
            for b in a..g {
                let blk = &js[a] * ks[b].transpose();
                cov.view_mut((a * d, b * d), (d, d)).copy_from(&blk);
                cov.view_mut((b * d, a * d), (d, d)).copy_from(&blk.transpose());
            }
        }
        let min_eigenvalue = cov.clone().symmetric_eigenvalues().min();
        let scale = cov.diagonal().amax().max(1e-300);
        for &jit in &JITTER_LADDER {
            let m = &cov + DMatrix::identity(g * d, g * d) * (jit * scale);
            if let Some(ch) = m.cholesky() {
                return Ok(FluctuationKernel { d, times, chol: ch.l(), cov, jitter: jit * scale, min_eigenvalue });
            }
        }
        Err(Error::Cholesky { jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] * scale })
    }

    /// Block (a, b) of the assembled covariance.
    pub fn block(&self, a: usize, b: usize) -> DMatrix<f64> {
        let d = self.d;
        self.cov.view((a * d, b * d), (d, d)).into_owned()
    }

    /// One path: row i is v at `times[i]`. Sample k uses substream k.
    pub fn sample_one(&self, seed: u64, k: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        let n = self.cov.nrows();
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let v = &self.chol * z;
        DMatrix::from_row_slice(self.times.len(), self.d, v.as_slice())
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<DMatrix<f64>> {
        (0..n as u64).into_par_iter().map(|k| self.sample_one(seed, k)).collect()
    }
}

/// n paths of the fluctuation measure on G interior grid points.
pub fn sample_bridge_fluctuations(
    model: &Model,
    sol: &GeodesicSolution,
    g: usize,
    n: usize,
    seed: u64,
) -> Result<(FluctuationKernel, Vec<DMatrix<f64>>)> {
    let k = FluctuationKernel::new(model, sol, g)?;
    let s = k.sample(n, seed);
    Ok((k, s))
}

/// v_t = C(t, s)β at the requested times.
pub fn reproducing_field(
    model: &Model,
    sol: &GeodesicSolution,
    beta: &DVector<f64>,
    s: f64,
    times: &[f64],
) -> Result<Vec<DVector<f64>>> {
    let j1inv = j1_inverse(sol)?;
    Ok(times.iter().map(|&t| cov_with(model, sol, &j1inv, t, s) * beta).collect())
}

/// Chart metric g = a⁻¹.
fn metric(model: &Model, x: &[f64]) -> Result<DMatrix<f64>> {
    diffusivity(model, x)?.try_inverse().ok_or(Error::NotRiemannian)
}

/// Christoffel symbols Γ^i_{jk} at x, indexed [i][(j, k)], from central
/// differences of g.
pub fn christoffel(model: &Model, x: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    let d = model.d;
    let h = CHRISTOFFEL_STEP;
    let ginv = diffusivity(model, x)?;
    let mut dg = Vec::with_capacity(d);
    for k in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += h;
        xm[k] -= h;
        dg.push((metric(model, &xp)? - metric(model, &xm)?) / (2.0 * h));
    }
    let mut gam = vec![DMatrix::zeros(d, d); d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                let mut s = 0.0;
                for l in 0..d {
                    s += ginv[(i, l)] * (dg[j][(l, k)] + dg[k][(l, j)] - dg[l][(j, k)]);
                }
                gam[i][(j, k)] = 0.5 * s;
            }
        }
    }
    Ok(gam)
}

/// Γ(w)^i_k = Γ^i_{jk} w^j.
fn gamma_dot(gam: &[DMatrix<f64>], w: &DVector<f64>) -> DMatrix<f64> {
    let d = w.len();
    DMatrix::from_fn(d, d, |i, k| (0..d).map(|j| gam[i][(j, k)] * w[j]).sum())
}

/// R_t as a matrix: (R v)^i = R^i_{jkl} ẋ^j v^k ẋ^l, so that Jacobi fields
/// satisfy ∇∇J + R J = 0.
pub fn curvature_operator(model: &Model, x: &[f64], xdot: &DVector<f64>) -> Result<DMatrix<f64>> {
    let d = model.d;
    let h = CHRISTOFFEL_STEP;
    let gam = christoffel(model, x)?;
    let mut dgam = Vec::with_capacity(d);
    for k in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += h;
        xm[k] -= h;
        let gp = christoffel(model, &xp)?;
        let gm = christoffel(model, &xm)?;
        dgam.push((0..d).map(|i| (&gp[i] - &gm[i]) / (2.0 * h)).collect::<Vec<_>>());
    }
    // R^i_{jkl} = ∂_kΓ^i_{lj} − ∂_lΓ^i_{kj} + Γ^i_{km}Γ^m_{lj} − Γ^i_{lm}Γ^m_{kj}
    let mut r = DMatrix::zeros(d, d);
    for i in 0..d {
        for k in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                for l in 0..d {
                    let w = xdot[j] * xdot[l];
                    if w == 0.0 {
                        continue;
                    }
                    let mut rr = dgam[k][i][(l, j)] - dgam[l][i][(k, j)];
                    for m in 0..d {
                        rr += gam[i][(k, m)] * gam[m][(l, j)] - gam[i][(l, m)] * gam[m][(k, j)];
                    }
                    s += rr * w;
                }
            }
            r[(i, k)] = s;
        }
    }
    Ok(r)
}

/// Curvature, Riccati solution and parallel transport along a Riemannian
/// geodesic, on the flow grid.
#[derive(Clone, Debug)]
pub struct RiemannianData {
    pub t: Vec<f64>,
    /// A_t = ∇K_t K_t⁻¹ for t < 1 (the last entry is unused and left zero).
    pub a: Vec<DMatrix<f64>>,
    /// R_t as an operator.
    pub r: Vec<DMatrix<f64>>,
    /// Quadratic form v ↦ g(v, R_t v), g-symmetrized and with the γ̇
    /// direction projected out.
    pub r_form: Vec<DMatrix<f64>>,
    /// Columns: a g-orthonormal frame transported in parallel along γ.
    pub tau: Vec<DMatrix<f64>>,
    /// Γ(γ̇_t).
    pub conn: Vec<DMatrix<f64>>,
    /// max over t ≤ 0.9 of |∇A + A² + R| (central differences in t).
    pub riccati_residual: f64,
}

fn velocity(model: &Model, ws: &mut Ws, x: &[f64], p: &[f64]) -> DVector<f64> {
    let d = model.d;
    ws.load(model, x, p, false);
    let mut dx = vec![0.0; d];
    let mut dp = vec![0.0; d];
    ws.ham(&mut dx, &mut dp);
    DVector::from_vec(dx)
}

pub fn riccati_solve(model: &Model, sol: &GeodesicSolution) -> Result<RiemannianData> {
    if !model.riemannian {
        return Err(Error::NotRiemannian);
    }
    let d = model.d;
    let jd = &sol.jacobi;
    let n = jd.steps;
    let dt = sol.path.dt();
    let mut ws = Ws::new(model);
    let mut a = Vec::with_capacity(n + 1);
    let mut r = Vec::with_capacity(n + 1);
    let mut r_form = Vec::with_capacity(n + 1);
    let mut conn = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let q = &sol.path.points[i];
        let x = q.x.as_slice();
        let xdot = velocity(model, &mut ws, x, q.p.as_slice());
        let gam = christoffel(model, x)?;
        let cg = gamma_dot(&gam, &xdot);
        let ri = curvature_operator(model, x, &xdot)?;
        let g = metric(model, x)?;
        let mut form = &g * &ri;
        form = 0.5 * (&form + form.transpose());
        let sp = xdot.dot(&(&g * &xdot));
        if sp > 0.0 {
            let proj = DMatrix::identity(d, d) - &xdot * (&g * &xdot).transpose() / sp;
            form = proj.transpose() * form * proj;
        }
        if i < n {
            // K̇ from the linearized flow at the K base point.
            let kb = &jd.kbase[i];
            ws.load(model, kb.x.as_slice(), kb.p.as_slice(), true);
            let mut kdot = DMatrix::zeros(d, d);
            let mut dx = vec![0.0; d];
            let mut dp = vec![0.0; d];
            for c in 0..d {
                let kc: Vec<f64> = jd.k[i].column(c).iter().copied().collect();
                let kpc: Vec<f64> = jd.kp[i].column(c).iter().copied().collect();
                ws.lin(kb.p.as_slice(), &kc, &kpc, &mut dx, &mut dp);
                kdot.column_mut(c).copy_from_slice(&dx);
            }
            let kinv = jd.k[i].clone().try_inverse().ok_or(Error::SingularK { t: jd.t[i] })?;
            a.push((kdot + &cg * &jd.k[i]) * kinv);
        } else {
            a.push(DMatrix::zeros(d, d));
        }
        r.push(ri);
        r_form.push(form);
        conn.push(cg);
    }
    // Parallel transport: τ̇ = −Γ(γ̇)τ, RK4 with midpoint states from a
    // half step of the bicharacteristic flow.
    let x0 = sol.path.points[0].x.as_slice();
    let a0 = diffusivity(model, x0)?;
    let e = a0.symmetric_eigen();
    let sqrt = &e.eigenvectors
        * DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()))
        * e.eigenvectors.transpose();
    let mut tau = vec![sqrt];
    let mut rk = Rk4::default();
    for i in 0..n {
        let q = &sol.path.points[i];
        let mut y: Vec<f64> = q.x.iter().chain(q.p.iter()).copied().collect();
        rk.step(&mut y, 0.5 * dt, &mut |s: &[f64], o: &mut [f64]| {
            ws.load(model, &s[..d], &s[d..], false);
            let (ox, op) = o.split_at_mut(d);
            ws.ham(ox, op);
        });
        let xm = &y[..d];
        let vm = velocity(model, &mut ws, xm, &y[d..]);
        let cm = gamma_dot(&christoffel(model, xm)?, &vm);
        let (c0, c1) = (&conn[i], &conn[i + 1]);
        let t0 = &tau[i];
        let k1 = -(c0 * t0);
        let k2 = -(&cm * (t0 + 0.5 * dt * &k1));
        let k3 = -(&cm * (t0 + 0.5 * dt * &k2));
        let k4 = -(c1 * (t0 + dt * &k3));
        tau.push(t0 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
    }
    // A blows up like 1/(1-t), so a low-order difference swamps the
    // residual near t = 0.9. Sixth-order central stencil instead.
    let mut res = 0.0f64;
    for i in 3..n.saturating_sub(3) {
        if jd.t[i] > 0.9 + 1e-12 {
            break;
        }
        let adot = (45.0 * (&a[i + 1] - &a[i - 1]) - 9.0 * (&a[i + 2] - &a[i - 2])
            + (&a[i + 3] - &a[i - 3]))
            / (60.0 * dt);
        let cov = adot + &conn[i] * &a[i] - &a[i] * &conn[i];
        let resid = cov + &a[i] * &a[i] + &r[i];
        res = res.max(resid.amax());
    }
    Ok(RiemannianData { t: jd.t.clone(), a, r, r_form, tau, conn, riccati_residual: res })
}

/// Paths on the SDE grid: row i is v at t = i/steps, i = 0..=steps.
pub type GridPaths = Vec<DMatrix<f64>>;

fn grid_stride(rd: &RiemannianData, steps: usize) -> Result<usize> {
    let n = rd.t.len() - 1;
    if steps == 0 || !n.is_multiple_of(steps) {
        return Err(Error::InvalidArgument(format!("SDE steps {steps} must divide the flow grid {n}")));
    }
    Ok(n / steps)
}

/// Euler scheme for dv = (A_t − Γ(γ̇_t))v dt + τ_t db_t, v₀ = 0, with the
/// final value pinned to 0. Row i of `db` is the increment on step i.
pub fn sde_path(rd: &RiemannianData, db: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let steps = db.nrows();
    let stride = grid_stride(rd, steps)?;
    let d = rd.tau[0].nrows();
    let dt = 1.0 / steps as f64;
    let mut path = DMatrix::zeros(steps + 1, d);
    let mut v = DVector::<f64>::zeros(d);
    for i in 0..steps {
        let k = i * stride;
        let drift = &rd.a[k] - &rd.conn[k];
        v = &v + drift * &v * dt + &rd.tau[k] * db.row(i).transpose();
        if i + 1 == steps {
            v.fill(0.0);
        }
        path.row_mut(i + 1).copy_from(&v.transpose());
    }
    Ok(path)
}

/// n Euler paths of the Riccati SDE; row i is v at t = i/steps.
pub fn sde_sample(rd: &RiemannianData, n: usize, steps: usize, seed: u64) -> Result<GridPaths> {
    grid_stride(rd, steps)?;
    let d = rd.tau[0].nrows();
    let sq = (1.0 / steps as f64).sqrt();
    (0..n as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            let db = DMatrix::from_fn(steps, d, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sq * z
            });
            sde_path(rd, &db)
        })
        .collect()
}

/// Flat Brownian bridges z_t = b_t − t b₁ transported by τ: v_t = τ_t z_t,
/// with their log-weights ½∫ g(v, R v) dt (trapezoid).
pub fn transported_bridges(rd: &RiemannianData, n: usize, steps: usize, seed: u64) -> Result<Vec<(DMatrix<f64>, f64)>> {
    let stride = grid_stride(rd, steps)?;
    let d = rd.tau[0].nrows();
    let dt = 1.0 / steps as f64;
    let out = (0..n as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            let mut b = DMatrix::<f64>::zeros(steps + 1, d);
            for i in 0..steps {
                for c in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    b[(i + 1, c)] = b[(i, c)] + dt.sqrt() * z;
                }
            }
            let b1 = b.row(steps).into_owned();
            let mut path = DMatrix::zeros(steps + 1, d);
            let mut logw = 0.0;
            for i in 0..=steps {
                let t = i as f64 * dt;
                let z = (b.row(i) - t * &b1).transpose();
                let v = &rd.tau[i * stride] * z;
                let q = v.dot(&(&rd.r_form[i * stride] * &v));
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                logw += 0.5 * w * q * dt;
                path.row_mut(i).copy_from(&v.transpose());
            }
            (path, logw)
        })
        .collect();
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct CovEstimate {
    pub s: f64,
    pub t: f64,
    pub estimate: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ImportanceReport {
    pub ess: f64,
    pub max_weight: f64,
    pub min_weight: f64,
    pub estimates: Vec<CovEstimate>,
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Weighted second moments E[v_s v_tᵀ] with batch-means standard errors
/// (16 contiguous batches). Weights need not be normalized.
pub fn weighted_moments(
    paths: &[DMatrix<f64>],
    weights: &[f64],
    pairs: &[(usize, usize)],
    times: &[f64],
) -> Vec<CovEstimate> {
    let d = paths[0].ncols();
    let nb = 16.min(paths.len().max(1));
    let per = paths.len() / nb;
    pairs
        .iter()
        .map(|&(a, b)| {
            let moment = |range: std::ops::Range<usize>| {
                let mut acc = DMatrix::<f64>::zeros(d, d);
                let mut ws = 0.0;
                for k in range {
                    let va = paths[k].row(a).transpose();
                    let vb = paths[k].row(b);
                    acc += weights[k] * va * vb;
                    ws += weights[k];
                }
                acc / ws
            };
            let full = moment(0..paths.len());
            let batches: Vec<DMatrix<f64>> = (0..nb).map(|j| moment(j * per..(j + 1) * per)).collect();
            let mean = batches.iter().fold(DMatrix::zeros(d, d), |s, m| s + m) / nb as f64;
            let var = batches.iter().fold(DMatrix::zeros(d, d), |s, m| {
                let e = m - &mean;
                s + e.component_mul(&e)
            }) / ((nb - 1) as f64 * nb as f64);
            CovEstimate { s: times[a], t: times[b], estimate: to_rows(&full), se: to_rows(&var.map(f64::sqrt)) }
        })
        .collect()
}

/// Self-normalized importance-sampling estimate of the covariance at the
/// given (s, t) grid pairs from transported flat bridges.
pub fn importance_weight_check(
    rd: &RiemannianData,
    n: usize,
    steps: usize,
    seed: u64,
    pairs: &[(f64, f64)],
) -> Result<ImportanceReport> {
    let samples = transported_bridges(rd, n, steps, seed)?;
    let maxlog = samples.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = samples.iter().map(|s| s.1.exp()).collect();
    let w: Vec<f64> = samples.iter().map(|s| (s.1 - maxlog).exp()).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|v| v * v).sum();
    let ess = sw * sw / sw2;
    if ess < 100.0 {
        return Err(Error::Inconclusive(format!("effective sample size {ess:.1} < 100")));
    }
    let paths: Vec<DMatrix<f64>> = samples.into_iter().map(|s| s.0).collect();
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    let idx: Vec<(usize, usize)> = pairs
        .iter()
        .map(|&(s, t)| ((s * steps as f64).round() as usize, (t * steps as f64).round() as usize))
        .collect();
    Ok(ImportanceReport {
        ess,
        max_weight: raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min_weight: raw.iter().copied().fold(f64::INFINITY, f64::min),
        estimates: weighted_moments(&paths, &w, &idx, &times),
    })
}
