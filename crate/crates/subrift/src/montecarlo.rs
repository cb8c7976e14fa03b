//! Monte Carlo for the small-noise diffusion: Euler–Maruyama for
//! dx = √ε ΣX_ℓ dB^ℓ + ε X̃₀ dt, the same scheme tilted along a geodesic
//! control, endpoint-conditioned bridge ensembles, and the estimators built
//! on them (fluctuation covariances, ε·log p̂, sup-deviation tails).
//!
//! Every path k draws from its own ChaCha8 substream `(seed, k)`, so results
//! do not depend on the rayon thread count.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fluctuation::{covariance, CovEstimate};
use crate::hamflow::{self, DEFAULT_ESCAPE_BOUND};
use crate::models::Model;
use crate::shooting::GeodesicSolution;

/// Batches used for every batch-means standard error here.
pub const BATCHES: usize = 16;
/// Fraction of escaped paths tolerated before a run is aborted.
pub const MAX_DROP_FRACTION: f64 = 1e-3;
/// Fewer samples than this and an estimator refuses to answer.
pub const MIN_SAMPLES: usize = 100;
/// KDE ball radius in units of √ε.
pub const KDE_RADIUS: f64 = 0.4;

#[derive(Clone, Debug, Serialize)]
pub struct SdeConfig {
    pub eps: f64,
    /// Euler steps on [0, 1].
    pub steps: usize,
    pub n: usize,
    pub seed: u64,
    /// Bridge acceptance radius in units of √ε.
    pub rho: f64,
    /// Paths are stored at t = i/grid; must divide `steps`.
    pub grid: usize,
}

impl Default for SdeConfig {
    fn default() -> Self {
        SdeConfig { eps: 0.05, steps: 400, n: 10_000, seed: 0, rho: 0.5, grid: 16 }
    }
}

impl SdeConfig {
    pub fn validate(&self) -> Result<()> {
        self.check(false)
    }

    fn check(&self, allow_zero_eps: bool) -> Result<()> {
        let bad = |s: &str| Err(Error::InvalidArgument(s.into()));
        if !(self.eps > 0.0 || allow_zero_eps && self.eps == 0.0) || !self.eps.is_finite() {
            return bad("eps must be positive");
        }
        if self.steps < 100 {
            return bad("at least 100 Euler steps are required");
        }
        if !(self.rho > 0.0) {
            return bad("rho must be positive");
        }
        if self.grid == 0 || !self.steps.is_multiple_of(self.grid) {
            return bad("grid must divide steps");
        }
        if self.n == 0 {
            return bad("n must be positive");
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.grid).map(|i| i as f64 / self.grid as f64).collect()
    }

    fn stride(&self) -> usize {
        self.steps / self.grid
    }
}

fn rng_for(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Geodesic nodes and controls on the Euler grid, from a fresh RK4 flow.
struct Reference {
    x: Vec<DVector<f64>>,
    h: Vec<DVector<f64>>,
}

impl Reference {
    fn new(model: &Model, sol: &GeodesicSolution, steps: usize) -> Result<Self> {
        let sub = 1000usize.div_ceil(steps);
        let path = hamflow::flow(model, &sol.lambda0, 1.0, steps * sub)?;
        Ok(Reference {
            x: (0..=steps).map(|k| path.points[k * sub].x.clone()).collect(),
            h: (0..=steps).map(|k| path.controls[k * sub].clone()).collect(),
        })
    }
}

/// One Euler–Maruyama path with per-step scratch buffers.
struct Stepper<'a> {
    model: &'a Model,
    vals: Vec<f64>,
    jac: Vec<f64>,
    drift: Vec<f64>,
    db: Vec<f64>,
    bound: f64,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a Model) -> Self {
        let (d, m) = (model.d, model.m);
        Stepper {
            model,
            vals: vec![0.0; d * m],
            jac: vec![0.0; m * d * d],
            drift: vec![0.0; d],
            db: vec![0.0; m],
            bound: model.chart_radius.min(DEFAULT_ESCAPE_BOUND),
        }
    }

    /// Advances x by one step; returns the Girsanov log-weight increment
    /// of the untilted scheme against the tilted one.
    fn step(&mut self, rng: &mut ChaCha8Rng, x: &mut [f64], dt: f64, eps: f64, h: Option<&[f64]>) -> f64 {
        let (d, m) = (self.model.d, self.model.m);
        let f = self.model.frame();
        f.values(x, &mut self.vals);
        let sq = dt.sqrt();
        for b in self.db.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *b = sq * z;
        }
        let mut logw = 0.0;
        let se = eps.sqrt();
        if eps > 0.0 {
            if !f.drift(x, &mut self.drift) {
                self.drift.fill(0.0);
            }
            f.jacobians(x, &mut self.jac);
            for l in 0..m {
                for i in 0..d {
                    let row = &self.jac[(l * d + i) * d..(l * d + i + 1) * d];
                    let s: f64 = (0..d).map(|j| row[j] * self.vals[l * d + j]).sum();
                    self.drift[i] += 0.5 * s;
                }
            }
            if let Some(h) = h {
                for l in 0..m {
                    logw -= h[l] * self.db[l] / se + h[l] * h[l] * dt / (2.0 * eps);
                }
            }
        }
        for i in 0..d {
            let mut inc = if eps > 0.0 { eps * dt * self.drift[i] } else { 0.0 };
            for l in 0..m {
                let c = se * self.db[l] + h.map_or(0.0, |h| h[l] * dt);
                inc += self.vals[l * d + i] * c;
            }
            x[i] += inc;
        }
        logw
    }

    fn escaped(&self, x: &[f64]) -> bool {
        x.iter().any(|v| !v.is_finite()) || x.iter().map(|v| v * v).sum::<f64>().sqrt() > self.bound
    }
}

struct RawPath {
    /// States at the storage grid (rows).
    grid: DMatrix<f64>,
    logw: f64,
}

fn run_path(
    model: &Model,
    x0: &[f64],
    cfg: &SdeConfig,
    k: u64,
    tilt: Option<&Reference>,
) -> Result<RawPath> {
    let d = model.d;
    let mut rng = rng_for(cfg.seed, k);
    let mut st = Stepper::new(model);
    let dt = 1.0 / cfg.steps as f64;
    let stride = cfg.stride();
    let mut x = x0.to_vec();
    let mut grid = DMatrix::zeros(cfg.grid + 1, d);
    grid.row_mut(0).copy_from(&DVector::from_column_slice(&x).transpose());
    let mut logw = 0.0;
    for s in 0..cfg.steps {
        let h = tilt.map(|r| r.h[s].as_slice());
        logw += st.step(&mut rng, &mut x, dt, cfg.eps, h);
        if st.escaped(&x) {
            return Err(Error::FlowEscape { t: (s + 1) as f64 * dt, bound: st.bound });
        }
        if (s + 1) % stride == 0 {
            let r = (s + 1) / stride;
            for i in 0..d {
                grid[(r, i)] = x[i];
            }
        }
    }
    Ok(RawPath { grid, logw })
}

/// Applies the drop policy to a batch of path results, keeping order.
fn collect_paths<T>(results: Vec<Result<T>>) -> Result<(Vec<T>, usize)> {
    let total = results.len();
    let mut kept = Vec::with_capacity(total);
    let mut dropped = 0;
    for r in results {
        match r {
            Ok(v) => kept.push(v),
            Err(Error::FlowEscape { .. }) | Err(Error::NonFinite { .. }) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    if dropped as f64 > MAX_DROP_FRACTION * total as f64 {
        return Err(Error::TooManyDropped { dropped, total });
    }
    Ok((kept, dropped))
}

#[derive(Clone, Debug)]
pub struct SdeSamples {
    pub times: Vec<f64>,
    pub endpoints: Vec<DVector<f64>>,
    /// Full grid paths, rows = times; empty unless requested.
    pub paths: Vec<DMatrix<f64>>,
    pub dropped: usize,
}

/// Endpoint samples (and optionally grid paths) of the unconditioned diffusion from x.
pub fn simulate_sde(model: &Model, cfg: &SdeConfig, x: &[f64], keep_paths: bool) -> Result<SdeSamples> {
    cfg.validate()?;
    if x.len() != model.d {
        return Err(Error::Dimension { expected: model.d, got: x.len() });
    }
    let res: Vec<Result<RawPath>> =
        (0..cfg.n as u64).into_par_iter().map(|k| run_path(model, x, cfg, k, None)).collect();
    let (kept, dropped) = collect_paths(res)?;
    let g = cfg.grid;
    let endpoints = kept.iter().map(|p| p.grid.row(g).transpose()).collect();
    let paths = if keep_paths { kept.into_iter().map(|p| p.grid).collect() } else { Vec::new() };
    Ok(SdeSamples { times: cfg.times(), endpoints, paths, dropped })
}

#[derive(Clone, Debug)]
pub struct TiltedSamples {
    pub times: Vec<f64>,
    /// γ at the storage grid.
    pub reference: DMatrix<f64>,
    /// Absolute chart positions ω at the storage grid.
    pub paths: Vec<DMatrix<f64>>,
    /// log dP/dQ of the untilted Euler chain against the tilted one.
    pub log_weights: Vec<f64>,
    pub eps: f64,
    pub dropped: usize,
}

impl TiltedSamples {
    /// (ω − γ)/√ε at the storage grid.
    pub fn rescaled(&self) -> Vec<DMatrix<f64>> {
        let s = self.eps.sqrt();
        self.paths.iter().map(|p| (p - &self.reference) / s).collect()
    }

    /// Mean over paths of max over the grid of |ω_t − γ_t|.
    pub fn mean_sup_distance(&self) -> f64 {
        let sup = |p: &DMatrix<f64>| {
            (0..p.nrows()).map(|r| (p.row(r) - self.reference.row(r)).norm()).fold(0.0, f64::max)
        };
        self.paths.iter().map(sup).sum::<f64>() / self.paths.len() as f64
    }
}

/// Paths of the diffusion driven along the geodesic control h:
/// dγ^ε = ΣX_ℓ h_ℓ dt + √ε ΣX_ℓ dB^ℓ + ε X̃₀ dt. ε = 0 is allowed.
pub fn simulate_tilted(model: &Model, sol: &GeodesicSolution, cfg: &SdeConfig) -> Result<TiltedSamples> {
    cfg.check(true)?;
    let r = Reference::new(model, sol, cfg.steps)?;
    let x0 = sol.x.as_slice();
    let res: Vec<Result<RawPath>> =
        (0..cfg.n as u64).into_par_iter().map(|k| run_path(model, x0, cfg, k, Some(&r))).collect();
    let (kept, dropped) = collect_paths(res)?;
    let stride = cfg.stride();
    let reference = DMatrix::from_fn(cfg.grid + 1, model.d, |i, j| r.x[i * stride][j]);
    let log_weights = kept.iter().map(|p| p.logw).collect();
    let paths = kept.into_iter().map(|p| p.grid).collect();
    Ok(TiltedSamples { times: cfg.times(), reference, paths, log_weights, eps: cfg.eps, dropped })
}

/// Rescaled bridge fluctuations ṽ_t = (ω_t − γ_t)/√ε at the storage grid.
#[derive(Clone, Debug)]
pub struct BridgeEnsemble {
    pub times: Vec<f64>,
    pub paths: Vec<DMatrix<f64>>,
    /// |ṽ₁| per accepted path.
    pub endpoint_dev: Vec<f64>,
    pub proposals: usize,
    pub acceptance_rate: f64,
    pub eps: f64,
    pub rho: f64,
    /// Exact Brownian bridge, no acceptance window.
    pub exact: bool,
    pub dropped: usize,
}

impl BridgeEnsemble {
    /// Sub-ensemble for a smaller window, reusing the same proposals.
    pub fn restrict(&self, rho: f64) -> BridgeEnsemble {
        if self.exact || rho >= self.rho {
            return self.clone();
        }
        let keep: Vec<usize> = (0..self.paths.len()).filter(|&i| self.endpoint_dev[i] <= rho).collect();
        BridgeEnsemble {
            times: self.times.clone(),
            paths: keep.iter().map(|&i| self.paths[i].clone()).collect(),
            endpoint_dev: keep.iter().map(|&i| self.endpoint_dev[i]).collect(),
            proposals: self.proposals,
            acceptance_rate: keep.len() as f64 / self.proposals as f64,
            eps: self.eps,
            rho,
            exact: false,
            dropped: self.dropped,
        }
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    fn index_of(&self, t: f64) -> Result<usize> {
        let g = (self.times.len() - 1) as f64;
        let i = (t * g).round();
        if !(0.0..=g).contains(&i) || (i / g - t).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("t={t} is not on the ensemble grid")));
        }
        Ok(i as usize)
    }
}

fn exact_bridge(d: usize, cfg: &SdeConfig, k: u64) -> DMatrix<f64> {
    let mut rng = rng_for(cfg.seed, k);
    let dt = 1.0 / cfg.steps as f64;
    let stride = cfg.stride();
    let mut b = DMatrix::zeros(cfg.grid + 1, d);
    let mut cur = vec![0.0; d];
    for s in 0..cfg.steps {
        for c in cur.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *c += dt.sqrt() * z;
        }
        if (s + 1) % stride == 0 {
            for (i, c) in cur.iter().enumerate() {
                b[((s + 1) / stride, i)] = *c;
            }
        }
    }
    let end = b.row(cfg.grid).into_owned();
    for r in 0..=cfg.grid {
        let t = r as f64 / cfg.grid as f64;
        let row = b.row(r) - t * &end;
        b.row_mut(r).copy_from(&row);
    }
    b
}

/// Bridge ensemble from x to y along `sol`.
///
/// Flat models use the exact Brownian bridge (n samples). Otherwise `n`
/// tilted proposals are accepted when |ṽ₁| ≤ ρ, which conditions the
/// linearized law only up to an O(ρ²) error, see [`clt_band`].
pub fn bridge_ensemble(model: &Model, sol: &GeodesicSolution, cfg: &SdeConfig) -> Result<BridgeEnsemble> {
    cfg.validate()?;
    if model.flat {
        let paths: Vec<DMatrix<f64>> =
            (0..cfg.n as u64).into_par_iter().map(|k| exact_bridge(model.d, cfg, k)).collect();
        return Ok(BridgeEnsemble {
            times: cfg.times(),
            endpoint_dev: vec![0.0; paths.len()],
            paths,
            proposals: cfg.n,
            acceptance_rate: 1.0,
            eps: cfg.eps,
            rho: cfg.rho,
            exact: true,
            dropped: 0,
        });
    }
    let r = Reference::new(model, sol, cfg.steps)?;
    let stride = cfg.stride();
    let gamma = DMatrix::from_fn(cfg.grid + 1, model.d, |i, j| r.x[i * stride][j]);
    let se = cfg.eps.sqrt();
    let y = &sol.y;
    let res: Vec<Result<Option<(DMatrix<f64>, f64)>>> = (0..cfg.n as u64)
        .into_par_iter()
        .map(|k| {
            let p = run_path(model, sol.x.as_slice(), cfg, k, Some(&r))?;
            let end = p.grid.row(cfg.grid).transpose();
            let dev = (end - y).norm() / se;
            Ok((dev <= cfg.rho).then(|| ((p.grid - &gamma) / se, dev)))
        })
        .collect();
    let (kept, dropped) = collect_paths(res)?;
    let (paths, endpoint_dev): (Vec<_>, Vec<_>) = kept.into_iter().flatten().unzip();
    if paths.is_empty() {
        return Err(Error::ZeroAcceptance);
    }
    let proposals = cfg.n - dropped;
    Ok(BridgeEnsemble {
        times: cfg.times(),
        acceptance_rate: paths.len() as f64 / proposals as f64,
        paths,
        endpoint_dev,
        proposals,
        eps: cfg.eps,
        rho: cfg.rho,
        exact: false,
        dropped,
    })
}

fn centered_cov(paths: &[DMatrix<f64>], a: usize, b: usize) -> DMatrix<f64> {
    let d = paths[0].ncols();
    let n = paths.len() as f64;
    let mut ma = DVector::zeros(d);
    let mut mb = DVector::zeros(d);
    for p in paths {
        ma += p.row(a).transpose();
        mb += p.row(b).transpose();
    }
    ma /= n;
    mb /= n;
    let mut acc = DMatrix::zeros(d, d);
    for p in paths {
        acc += (p.row(a).transpose() - &ma) * (p.row(b).transpose() - &mb).transpose();
    }
    acc / (n - 1.0)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Sample covariance of (ṽ_s, ṽ_t) with batch-means standard errors.
pub fn empirical_covariance(ens: &BridgeEnsemble, pairs: &[(f64, f64)]) -> Result<Vec<CovEstimate>> {
    let n = ens.len();
    if n < MIN_SAMPLES {
        return Err(Error::Inconclusive(format!("{n} samples, need {MIN_SAMPLES}")));
    }
    let per = n / BATCHES;
    let mut out = Vec::with_capacity(pairs.len());
    for &(s, t) in pairs {
        let (a, b) = (ens.index_of(s)?, ens.index_of(t)?);
        let full = centered_cov(&ens.paths, a, b);
        let bs: Vec<DMatrix<f64>> =
            (0..BATCHES).map(|j| centered_cov(&ens.paths[j * per..(j + 1) * per], a, b)).collect();
        let mean = bs.iter().fold(DMatrix::zeros(full.nrows(), full.ncols()), |acc, m| acc + m) / BATCHES as f64;
        let var = bs.iter().fold(DMatrix::zeros(full.nrows(), full.ncols()), |acc, m| {
            acc + (m - &mean).map(|v| v * v)
        }) / (BATCHES as f64 - 1.0);
        let se = var.map(|v| (v / BATCHES as f64).sqrt());
        out.push(CovEstimate { s, t, estimate: rows(&full), se: rows(&se) });
    }
    Ok(out)
}

/// Bound ρ²‖G_s‖‖G_t‖, G_s = Σ(s,1)Σ(1,1)⁻¹, on the covariance error at
/// (s, t) caused by accepting |Y₁| ≤ ρ instead of conditioning on Y₁ = 0,
/// where Y is the Gaussian linearization of the tilted process.
pub fn clt_band(sol: &GeodesicSolution, s: f64, t: f64, rho: f64) -> Result<f64> {
    for v in [s, t] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("time {v} outside [0,1]")));
        }
    }
    let g = |v: f64| gain(sol, v).map(|m| m.singular_values().max());
    Ok(rho * rho * g(s)? * g(t)?)
}

fn gain(sol: &GeodesicSolution, v: f64) -> Result<DMatrix<f64>> {
    let jd = &sol.jacobi;
    let n = jd.steps;
    let cinv = jd
        .c1bar
        .clone()
        .try_inverse()
        .ok_or(Error::InvalidArgument("C̄₁ is singular".into()))?;
    let i = (v * n as f64).round() as usize;
    Ok(&jd.u[i] * &jd.c1_cum[i] * jd.u[n].transpose() * cinv)
}

/// The limiting covariance at (s, t) plus the exact linear-Gaussian effect
/// of the acceptance window, G_s Ĉov(ṽ₁) G_tᵀ, with Ĉov(ṽ₁) taken from the
/// accepted endpoints themselves.
pub fn window_corrected_covariance(
    model: &Model,
    sol: &GeodesicSolution,
    ens: &BridgeEnsemble,
    s: f64,
    t: f64,
) -> Result<DMatrix<f64>> {
    let base = covariance(model, sol, s, t)?;
    if ens.exact {
        return Ok(base);
    }
    if ens.len() < 2 {
        return Err(Error::Inconclusive("window correction needs two samples".into()));
    }
    let last = ens.times.len() - 1;
    let c1 = centered_cov(&ens.paths, last, last);
    Ok(base + gain(sol, s)? * c1 * gain(sol, t)?.transpose())
}

#[derive(Clone, Debug, Serialize)]
pub struct RhoSweepRow {
    pub rho: f64,
    pub accepted: usize,
    pub estimate: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub oracle: Vec<Vec<f64>>,
    /// max |estimate − oracle| over entries.
    pub discrepancy: f64,
    /// SE of the entry attaining the discrepancy.
    pub discrepancy_se: f64,
    pub band: f64,
    /// max |estimate − window-corrected oracle| / SE.
    pub corrected_max_z: f64,
}

/// Covariance at (s, s) for each window in `rhos`, all cut from one set of
/// proposals drawn with the largest window.
pub fn rho_sweep(
    model: &Model,
    sol: &GeodesicSolution,
    cfg: &SdeConfig,
    rhos: &[f64],
    s: f64,
) -> Result<Vec<RhoSweepRow>> {
    let rmax = rhos.iter().copied().fold(0.0, f64::max);
    let base = bridge_ensemble(model, sol, &SdeConfig { rho: rmax, ..cfg.clone() })?;
    let oracle = covariance(model, sol, s, s)?;
    rhos.iter()
        .map(|&rho| {
            let ens = base.restrict(rho);
            let est = empirical_covariance(&ens, &[(s, s)])?.remove(0);
            let corr = window_corrected_covariance(model, sol, &ens, s, s)?;
            let (mut disc, mut dse, mut cz) = (0.0, 0.0, 0.0f64);
            for i in 0..oracle.nrows() {
                for j in 0..oracle.ncols() {
                    let e = (est.estimate[i][j] - oracle[(i, j)]).abs();
                    if est.se[i][j] > 0.0 {
                        cz = cz.max((est.estimate[i][j] - corr[(i, j)]).abs() / est.se[i][j]);
                    }
                    if e >= disc {
                        disc = e;
                        dse = est.se[i][j];
                    }
                }
            }
            Ok(RhoSweepRow {
                rho,
                accepted: ens.len(),
                estimate: est.estimate,
                se: est.se,
                oracle: rows(&oracle),
                discrepancy: disc,
                discrepancy_se: dse,
                band: clt_band(sol, s, s, rho)?,
                corrected_max_z: cz,
            })
        })
        .collect()
}

/// Volume of the unit ball in ℝᵈ.
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * std::f64::consts::PI / d as f64 * unit_ball_volume(d - 2),
    }
}

/// ε log p(ε, x, y) for the Gaussian kernel in ℝᵈ at distance `dist`.
pub fn gaussian_log_density(eps: f64, dist: f64, d: usize) -> f64 {
    -dist * dist / 2.0 - eps * d as f64 / 2.0 * (2.0 * std::f64::consts::PI * eps).ln()
}

#[derive(Clone, Debug, Serialize)]
pub struct VaradhanRow {
    pub eps: f64,
    /// ε·log p̂(ε, x, y).
    pub value: f64,
    pub se: f64,
    /// −d(x,y)²/2.
    pub limit: f64,
    pub hits: usize,
    pub r_kde: f64,
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// ε·log p̂ for each ε, from `cfg.n` tilted proposals per ε.
///
/// p̂ is a ball count around y with radius 0.4√ε, importance weighted by
/// the Girsanov factor of the tilt and by exp(⟨p₁, z⟩/ε) for the offset z
/// from y. The second factor removes the leading exponential variation of
/// p across the ball, which otherwise dominates the KDE bias at small ε.
pub fn varadhan_estimate(
    model: &Model,
    sol: &GeodesicSolution,
    eps_list: &[f64],
    cfg: &SdeConfig,
) -> Result<Vec<VaradhanRow>> {
    let d = model.d;
    let p1 = sol.path.end().p.clone();
    let limit = -sol.energy / 2.0;
    eps_list
        .iter()
        .enumerate()
        .map(|(j, &eps)| {
            let c = SdeConfig { eps, seed: cfg.seed.wrapping_add(0x9E37_79B9 * j as u64), ..cfg.clone() };
            c.validate()?;
            let ts = simulate_tilted(model, sol, &c)?;
            let r = KDE_RADIUS * eps.sqrt();
            let g = c.grid;
            // per-sample log contribution, −∞ outside the ball
            let terms: Vec<f64> = ts
                .paths
                .iter()
                .zip(&ts.log_weights)
                .map(|(p, lw)| {
                    let z = p.row(g).transpose() - &sol.y;
                    if z.norm() <= r {
                        lw + p1.dot(&z) / eps
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let hits = terms.iter().filter(|v| v.is_finite()).count();
            if hits == 0 {
                return Err(Error::Inconclusive(format!("no endpoint within the KDE ball at eps={eps}")));
            }
            let n = terms.len();
            let lvol = (unit_ball_volume(d) * r.powi(d as i32)).ln();
            let lp = logsumexp(&terms) - (n as f64).ln() - lvol;
            let per = n / BATCHES;
            let rel: Vec<f64> = (0..BATCHES)
                .map(|b| {
                    let l = logsumexp(&terms[b * per..(b + 1) * per]) - (per as f64).ln() - lvol;
                    (l - lp).exp()
                })
                .collect();
            let m = rel.iter().sum::<f64>() / BATCHES as f64;
            let sd = (rel.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (BATCHES as f64 - 1.0)).sqrt();
            Ok(VaradhanRow {
                eps,
                value: eps * lp,
                se: eps * sd / (BATCHES as f64).sqrt(),
                limit,
                hits,
                r_kde: r,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct TailRow {
    pub eps: f64,
    /// Fraction of paths with sup_t |ṽ_t|·√ε ≥ r.
    pub fraction: f64,
    pub se: f64,
    pub n: usize,
}

/// Sup-deviation tail fractions, one row per ensemble.
pub fn concentration_stat(ensembles: &[BridgeEnsemble], r: f64) -> Result<Vec<TailRow>> {
    if ensembles.len() < 3 {
        return Err(Error::InvalidArgument("need ensembles at three or more eps values".into()));
    }
    ensembles
        .iter()
        .map(|e| {
            let n = e.len();
            if n < MIN_SAMPLES {
                return Err(Error::Inconclusive(format!("{n} samples at eps={}", e.eps)));
            }
            let se_eps = e.eps.sqrt();
            let hit = e
                .paths
                .iter()
                .filter(|p| (0..p.nrows()).any(|i| p.row(i).norm() * se_eps >= r))
                .count();
            let f = hit as f64 / n as f64;
            Ok(TailRow { eps: e.eps, fraction: f, se: (f * (1.0 - f) / n as f64).sqrt(), n })
        })
        .collect()
}
