//! Endpoint map on piecewise-linear controls and the second variation.
//!
//! A control h on N uniform intervals is stored by its increments Δh_i ∈ ℝᵐ
//! (flat index `i*m + ℓ`), with Cameron–Martin inner product Σ⟨Δh, Δk⟩/Δt.
//! The endpoint map is RK4 with the control rate frozen on each interval.
//! Its first and second derivatives are propagated through the same RK4
//! stages, so they are exact derivatives of the discrete map.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hamflow::{self, Rk4};
use crate::models::{ito_drift, Model};
use crate::shooting::GeodesicSolution;

pub const KERNEL_RTOL: f64 = 1e-10;
pub const KERNEL_INPUT_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    pub n: usize,
    pub m: usize,
    pub inc: DVector<f64>,
}

impl ControlGrid {
    pub fn zeros(n: usize, m: usize) -> Self {
        ControlGrid { n, m, inc: DVector::zeros(n * m) }
    }

    pub fn from_increments(n: usize, m: usize, inc: DVector<f64>) -> Self {
        assert_eq!(inc.len(), n * m);
        ControlGrid { n, m, inc }
    }

    /// Control with constant rate `rate` on [0, 1].
    pub fn constant_rate(n: usize, rate: &[f64]) -> Self {
        let m = rate.len();
        let inc = DVector::from_fn(n * m, |a, _| rate[a % m] / n as f64);
        ControlGrid { n, m, inc }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn inner(&self, o: &ControlGrid) -> f64 {
        self.inc.dot(&o.inc) / self.dt()
    }

    pub fn norm2(&self) -> f64 {
        self.inner(self)
    }

    pub fn rate(&self, i: usize) -> &[f64] {
        &self.inc.as_slice()[i * self.m..(i + 1) * self.m]
    }

    /// h_{t_i} = Σ_{j<i} Δh_j at the N+1 nodes.
    pub fn nodes(&self) -> Vec<DVector<f64>> {
        let mut acc = DVector::zeros(self.m);
        let mut out = vec![acc.clone()];
        for i in 0..self.n {
            acc += DVector::from_column_slice(self.rate(i));
            out.push(acc.clone());
        }
        out
    }

    fn with(&self, inc: DVector<f64>) -> Self {
        ControlGrid { n: self.n, m: self.m, inc }
    }
}

struct Buf {
    d: usize,
    m: usize,
    v: Vec<f64>,
    j: Vec<f64>,
    h: Vec<f64>,
}

impl Buf {
    fn new(model: &Model) -> Self {
        let (d, m) = (model.d, model.m);
        Buf { d, m, v: vec![0.0; d * m], j: vec![0.0; m * d * d], h: vec![0.0; m * d * d * d] }
    }

    fn load(&mut self, model: &Model, x: &[f64], jac: bool, hess: bool) {
        let f = model.frame();
        f.values(x, &mut self.v);
        if jac {
            f.jacobians(x, &mut self.j);
        }
        if hess {
            f.hessians(x, &mut self.h);
        }
    }

    /// Σ_ℓ X_ℓ c_ℓ
    fn field(&self, c: &[f64], out: &mut [f64]) {
        let d = self.d;
        for i in 0..d {
            out[i] = (0..self.m).map(|l| self.v[l * d + i] * c[l]).sum();
        }
    }

    /// Σ_ℓ c_ℓ ∇X_ℓ w, added to out.
    fn jac_add(&self, c: &[f64], w: &[f64], out: &mut [f64]) {
        let d = self.d;
        for l in 0..self.m {
            if c[l] == 0.0 {
                continue;
            }
            for i in 0..d {
                let row = &self.j[(l * d + i) * d..(l * d + i + 1) * d];
                out[i] += c[l] * (0..d).map(|k| row[k] * w[k]).sum::<f64>();
            }
        }
    }

    /// Σ_ℓ c_ℓ ∇²X_ℓ(a, b), added to out.
    fn hess_add(&self, c: &[f64], a: &[f64], b: &[f64], out: &mut [f64]) {
        let d = self.d;
        for l in 0..self.m {
            if c[l] == 0.0 {
                continue;
            }
            for i in 0..d {
                let o = (l * d + i) * d * d;
                let mut s = 0.0;
                for j in 0..d {
                    for k in 0..d {
                        s += self.h[o + j * d + k] * a[j] * b[k];
                    }
                }
                out[i] += c[l] * s;
            }
        }
    }

    /// A = Σ_ℓ c_ℓ ∇X_ℓ as a matrix.
    fn a_matrix(&self, c: &[f64]) -> DMatrix<f64> {
        let d = self.d;
        DMatrix::from_fn(d, d, |i, k| (0..self.m).map(|l| c[l] * self.j[(l * d + i) * d + k]).sum())
    }

    fn x_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.d, self.m, &self.v)
    }

    fn jac_l(&self, l: usize) -> DMatrix<f64> {
        let d = self.d;
        DMatrix::from_row_slice(d, d, &self.j[l * d * d..(l + 1) * d * d])
    }

    fn hess_contract(&self, c: &[f64], g: &DVector<f64>) -> DMatrix<f64> {
        let d = self.d;
        let mut out = DMatrix::zeros(d, d);
        for l in 0..self.m {
            if c[l] == 0.0 {
                continue;
            }
            for i in 0..d {
                if g[i] == 0.0 {
                    continue;
                }
                let o = (l * d + i) * d * d;
                for j in 0..d {
                    for k in 0..d {
                        out[(j, k)] += c[l] * g[i] * self.h[o + j * d + k];
                    }
                }
            }
        }
        out
    }
}

fn check_finite(y: &[f64], t: f64) -> Result<()> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { t });
    }
    if y.iter().any(|v| v.abs() > hamflow::DEFAULT_ESCAPE_BOUND) {
        return Err(Error::FlowEscape { t, bound: hamflow::DEFAULT_ESCAPE_BOUND });
    }
    Ok(())
}

/// φ(x, h) at the N+1 nodes.
pub fn endpoint_map(model: &Model, x: &[f64], h: &ControlGrid) -> Result<Vec<DVector<f64>>> {
    let d = model.d;
    let mut buf = Buf::new(model);
    let mut rk = Rk4::default();
    let mut y = x.to_vec();
    let mut out = vec![DVector::from_column_slice(x)];
    let dt = h.dt();
    for i in 0..h.n {
        let c: Vec<f64> = h.rate(i).iter().map(|v| v / dt).collect();
        rk.step(&mut y, dt, &mut |s: &[f64], o: &mut [f64]| {
            buf.load(model, &s[..d], false, false);
            buf.field(&c, o);
        });
        check_finite(&y, (i + 1) as f64 * dt)?;
        out.push(DVector::from_column_slice(&y));
    }
    Ok(out)
}

/// Variation field v along φ(x, h) in direction k, at the N+1 nodes.
pub fn endpoint_derivative(
    model: &Model,
    x: &[f64],
    h: &ControlGrid,
    k: &ControlGrid,
) -> Result<Vec<DVector<f64>>> {
    let d = model.d;
    let mut buf = Buf::new(model);
    let mut rk = Rk4::default();
    let mut y: Vec<f64> = x.iter().copied().chain(std::iter::repeat_n(0.0, d)).collect();
    let mut out = vec![DVector::zeros(d)];
    let dt = h.dt();
    for i in 0..h.n {
        let c: Vec<f64> = h.rate(i).iter().map(|v| v / dt).collect();
        let kc: Vec<f64> = k.rate(i).iter().map(|v| v / dt).collect();
        rk.step(&mut y, dt, &mut |s: &[f64], o: &mut [f64]| {
            buf.load(model, &s[..d], true, false);
            let (a, b) = o.split_at_mut(d);
            buf.field(&c, a);
            buf.field(&kc, b);
            buf.jac_add(&c, &s[d..2 * d], b);
        });
        check_finite(&y, (i + 1) as f64 * dt)?;
        out.push(DVector::from_column_slice(&y[d..]));
    }
    Ok(out)
}

/// ∂²φ₁(k, k′) by the second-variation ODE integrated on the RK4 stages.
pub fn second_derivative(
    model: &Model,
    x: &[f64],
    h: &ControlGrid,
    k: &ControlGrid,
    k2: &ControlGrid,
) -> Result<DVector<f64>> {
    let d = model.d;
    let mut buf = Buf::new(model);
    let mut rk = Rk4::default();
    let mut y: Vec<f64> = x.iter().copied().chain(std::iter::repeat_n(0.0, 3 * d)).collect();
    let dt = h.dt();
    for i in 0..h.n {
        let c: Vec<f64> = h.rate(i).iter().map(|v| v / dt).collect();
        let ka: Vec<f64> = k.rate(i).iter().map(|v| v / dt).collect();
        let kb: Vec<f64> = k2.rate(i).iter().map(|v| v / dt).collect();
        rk.step(&mut y, dt, &mut |s: &[f64], o: &mut [f64]| {
            buf.load(model, &s[..d], true, true);
            let (va, vb, w) = (&s[d..2 * d], &s[2 * d..3 * d], &s[3 * d..4 * d]);
            let (o0, rest) = o.split_at_mut(d);
            let (o1, rest) = rest.split_at_mut(d);
            let (o2, o3) = rest.split_at_mut(d);
            buf.field(&c, o0);
            buf.field(&ka, o1);
            buf.jac_add(&c, va, o1);
            buf.field(&kb, o2);
            buf.jac_add(&c, vb, o2);
            o3.fill(0.0);
            buf.jac_add(&c, w, o3);
            buf.hess_add(&c, va, vb, o3);
            buf.jac_add(&kb, va, o3);
            buf.jac_add(&ka, vb, o3);
        });
        check_finite(&y, (i + 1) as f64 * dt)?;
    }
    Ok(DVector::from_column_slice(&y[3 * d..]))
}

/// ∂²φ₁(k, k′) by central second differences of the endpoint map with one
/// Richardson step-halving, polarized for k ≠ k′.
pub fn second_derivative_fd(
    model: &Model,
    x: &[f64],
    h: &ControlGrid,
    k: &ControlGrid,
    k2: &ControlGrid,
    eps: f64,
) -> Result<DVector<f64>> {
    let end = |g: &ControlGrid| -> Result<DVector<f64>> {
        Ok(endpoint_map(model, x, g)?.pop().unwrap())
    };
    let diag = |dir: &DVector<f64>| -> Result<DVector<f64>> {
        let f0 = end(h)?;
        let dd = |e: f64| -> Result<DVector<f64>> {
            let fp = end(&h.with(&h.inc + e * dir))?;
            let fm = end(&h.with(&h.inc - e * dir))?;
            Ok((fp - 2.0 * &f0 + fm) / (e * e))
        };
        let coarse = dd(eps)?;
        let fine = dd(0.5 * eps)?;
        Ok((4.0 * fine - coarse) / 3.0)
    };
    let plus = diag(&(&k.inc + &k2.inc))?;
    let minus = diag(&(&k.inc - &k2.inc))?;
    Ok(0.25 * (plus - minus))
}

/// First and second derivatives of the discrete endpoint map in all unit
/// increment directions.
pub struct Sensitivity {
    /// φ at the nodes.
    pub path: Vec<DVector<f64>>,
    /// dφ₁ as a d × Nm matrix in increment coordinates.
    pub dphi: DMatrix<f64>,
    /// Variation fields at the nodes, one d × Nm matrix per node.
    pub v_nodes: Vec<DMatrix<f64>>,
    /// Hessian of ⟨λ, φ₁⟩ in increment coordinates, when λ was supplied.
    pub hess: Option<DMatrix<f64>>,
}

pub fn sensitivity(
    model: &Model,
    x: &[f64],
    h: &ControlGrid,
    lambda: Option<&DVector<f64>>,
) -> Result<Sensitivity> {
    let (d, m, n) = (model.d, model.m, h.n);
    let nm = n * m;
    let dt = h.dt();
    let mut buf = Buf::new(model);
    let mut phi = DVector::from_column_slice(x);
    let mut v = DMatrix::<f64>::zeros(d, nm);
    let mut path = vec![phi.clone()];
    let mut v_nodes = vec![v.clone()];
    // Per step and stage: base point, A matrix, variation stage inputs.
    let mut ys: Vec<[DVector<f64>; 4]> = Vec::with_capacity(n);
    let mut amats: Vec<[DMatrix<f64>; 4]> = Vec::with_capacity(n);
    let mut vs: Vec<[DMatrix<f64>; 4]> = Vec::with_capacity(n);
    let want_hess = lambda.is_some();
    for i in 0..n {
        let c: Vec<f64> = h.rate(i).iter().map(|r| r / dt).collect();
        let mut y_st: Vec<DVector<f64>> = Vec::with_capacity(4);
        let mut a_st: Vec<DMatrix<f64>> = Vec::with_capacity(4);
        let mut v_st: Vec<DMatrix<f64>> = Vec::with_capacity(4);
        let mut kf: Vec<DVector<f64>> = Vec::with_capacity(4);
        let mut kv: Vec<DMatrix<f64>> = Vec::with_capacity(4);
        for s in 0..4 {
            let (yin, vin) = match s {
                0 => (phi.clone(), v.clone()),
                1 | 2 => (&phi + 0.5 * dt * &kf[s - 1], &v + 0.5 * dt * &kv[s - 1]),
                _ => (&phi + dt * &kf[2], &v + dt * &kv[2]),
            };
            buf.load(model, yin.as_slice(), true, false);
            let a = buf.a_matrix(&c);
            let xm = buf.x_matrix();
            let mut f = DVector::zeros(d);
            buf.field(&c, f.as_mut_slice());
            let mut k = &a * &vin;
            for l in 0..m {
                let mut col = k.column_mut(i * m + l);
                col += xm.column(l) / dt;
            }
            kf.push(f);
            kv.push(k);
            y_st.push(yin);
            a_st.push(a);
            v_st.push(vin);
        }
        phi += dt / 6.0 * (&kf[0] + 2.0 * &kf[1] + 2.0 * &kf[2] + &kf[3]);
        v += dt / 6.0 * (&kv[0] + 2.0 * &kv[1] + 2.0 * &kv[2] + &kv[3]);
        check_finite(phi.as_slice(), (i + 1) as f64 * dt)?;
        path.push(phi.clone());
        v_nodes.push(v.clone());
        if want_hess {
            ys.push(y_st.try_into().unwrap());
            amats.push(a_st.try_into().unwrap());
            vs.push(v_st.try_into().unwrap());
        }
    }
    let hess = match lambda {
        None => None,
        Some(lam) => {
            let mut mu = lam.clone();
            let mut hm = DMatrix::<f64>::zeros(nm, nm);
            let mut cross = DMatrix::<f64>::zeros(nm, nm);
            for i in (0..n).rev() {
                let c: Vec<f64> = h.rate(i).iter().map(|r| r / dt).collect();
                let a = &amats[i];
                let k4 = dt / 6.0 * &mu;
                let w4 = a[3].transpose() * &k4;
                let k3 = dt / 3.0 * &mu + dt * &w4;
                let w3 = a[2].transpose() * &k3;
                let k2 = dt / 3.0 * &mu + 0.5 * dt * &w3;
                let w2 = a[1].transpose() * &k2;
                let k1 = dt / 6.0 * &mu + 0.5 * dt * &w2;
                let w1 = a[0].transpose() * &k1;
                let g = [k1, k2, k3, k4];
                for s in 0..4 {
                    buf.load(model, ys[i][s].as_slice(), true, true);
                    let hs = buf.hess_contract(&c, &g[s]);
                    let vst = &vs[i][s];
                    if hs.amax() > 0.0 {
                        hm += vst.transpose() * &hs * vst;
                    }
                    for l in 0..m {
                        let r = buf.jac_l(l).transpose() * &g[s] / dt;
                        let mut col = cross.column_mut(i * m + l);
                        col += vst.transpose() * r;
                    }
                }
                mu = &mu + w1 + w2 + w3 + w4;
            }
            hm += &cross + cross.transpose();
            Some(hm)
        }
    };
    Ok(Sensitivity { dphi: v.clone(), path, v_nodes, hess })
}

/// L(k) = 2⟨h, k⟩.
pub fn first_variation(h: &ControlGrid, k: &ControlGrid) -> f64 {
    2.0 * h.inner(k)
}

/// A critical point of ‖h‖² under φ₁(x, h) = y on the N-interval grid, with
/// its multiplier: h = dφ₁*λ₁.
#[derive(Clone, Debug)]
pub struct DiscreteGeodesic {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub h: ControlGrid,
    pub lambda1: DVector<f64>,
    pub kkt_residual: f64,
}

impl DiscreteGeodesic {
    pub fn energy(&self) -> f64 {
        self.h.norm2()
    }
}

/// Refines a shooting solution into the exact critical point of the
/// discrete problem by Newton iteration on the Lagrange system.
pub fn discretize(model: &Model, sol: &GeodesicSolution, n: usize) -> Result<DiscreteGeodesic> {
    let (d, m) = (model.d, model.m);
    let mut h = initial_control(model, sol, n)?;
    let mut lam = sol.path.end().p.clone();
    let x = sol.x.as_slice();
    let y = &sol.y;
    let dt = h.dt();
    let scale = 1.0 + h.inc.amax() + lam.amax();
    let kkt = |h: &ControlGrid, lam: &DVector<f64>, hess: bool| -> Result<(DVector<f64>, DVector<f64>, f64, Sensitivity)> {
        let sens = sensitivity(model, x, h, if hess { Some(lam) } else { None })?;
        let f1 = &h.inc - dt * sens.dphi.transpose() * lam;
        let f2 = sens.path.last().unwrap() - y;
        let r = f1.amax().max(f2.amax());
        Ok((f1, f2, r, sens))
    };
    let nm = n * m;
    let (mut f1, mut f2, mut res, mut sens) = kkt(&h, &lam, true)?;
    for _ in 0..40 {
        if res < 1e-14 * scale {
            break;
        }
        let mut jac = DMatrix::<f64>::zeros(nm + d, nm + d);
        let hm = sens.hess.take().unwrap();
        jac.view_mut((0, 0), (nm, nm)).copy_from(&(DMatrix::identity(nm, nm) - dt * hm));
        jac.view_mut((0, nm), (nm, d)).copy_from(&(-dt * sens.dphi.transpose()));
        jac.view_mut((nm, 0), (d, nm)).copy_from(&sens.dphi);
        let mut rhs = DVector::zeros(nm + d);
        rhs.rows_mut(0, nm).copy_from(&f1);
        rhs.rows_mut(nm, d).copy_from(&f2);
        let step = jac.lu().solve(&rhs).ok_or(Error::NoConvergence { candidates: 1, best_residual: res })?;
        // Backtrack on the residual; near a conjugate point the full step can be huge.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let ht = h.with(&h.inc - alpha * step.rows(0, nm));
            let lt = &lam - alpha * step.rows(nm, d);
            if let Ok(t) = kkt(&ht, &lt, false) {
                if t.2 < res {
                    accepted = Some((ht, lt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((ht, lt)) = accepted else { break };
        h = ht;
        lam = lt;
        (f1, f2, res, sens) = kkt(&h, &lam, true)?;
    }
    if !(res < 1e-9 * scale) {
        return Err(Error::NoConvergence { candidates: 1, best_residual: res });
    }
    Ok(DiscreteGeodesic { x: sol.x.clone(), y: y.clone(), h, lambda1: lam, kkt_residual: res })
}

/// Like [`discretize`] but holds λ₁ = p₁ fixed and lets the endpoint float:
/// solves h = Δt·dφ₁ᵀλ₁ only. Well posed at conjugate pairs, where the
/// fixed-endpoint system degenerates.
pub fn discretize_free(model: &Model, sol: &GeodesicSolution, n: usize) -> Result<DiscreteGeodesic> {
    let m = model.m;
    let mut h = initial_control(model, sol, n)?;
    let lam = sol.path.end().p.clone();
    let x = sol.x.as_slice();
    let dt = h.dt();
    let nm = n * m;
    let scale = 1.0 + h.inc.amax() + lam.amax();
    let mut res = f64::INFINITY;
    for _ in 0..40 {
        let sens = sensitivity(model, x, &h, Some(&lam))?;
        let f1 = &h.inc - dt * sens.dphi.transpose() * &lam;
        let r = f1.amax();
        if r >= res && r < 1e-9 * scale {
            break;
        }
        res = r;
        if r < 1e-14 * scale {
            break;
        }
        let jac = DMatrix::identity(nm, nm) - dt * sens.hess.unwrap();
        let step = jac.lu().solve(&f1).ok_or(Error::NoConvergence { candidates: 1, best_residual: r })?;
        h.inc -= step;
    }
    if !(res < 1e-9 * scale) {
        return Err(Error::NoConvergence { candidates: 1, best_residual: res });
    }
    let y = endpoint_map(model, x, &h)?.pop().unwrap();
    Ok(DiscreteGeodesic { x: sol.x.clone(), y, h, lambda1: lam, kkt_residual: res })
}

fn initial_control(model: &Model, sol: &GeodesicSolution, n: usize) -> Result<ControlGrid> {
    let m = model.m;
    let sub = 8;
    let fine = hamflow::flow(model, &sol.lambda0, 1.0, n * sub)?;
    let dtf = fine.dt();
    let mut inc = DVector::zeros(n * m);
    for i in 0..n {
        for l in 0..m {
            let f: Vec<f64> = (0..=sub).map(|s| fine.controls[i * sub + s][l]).collect();
            inc[i * m + l] = hamflow::trapezoid(&f, dtf);
        }
    }
    Ok(ControlGrid::from_increments(n, m, inc))
}

/// CM-orthonormal basis of ker dφ₁ in increment coordinates (columns).
#[derive(Clone, Debug)]
pub struct Kernel {
    pub basis: DMatrix<f64>,
    pub rank: usize,
    pub dphi: DMatrix<f64>,
}

fn kernel_from(dphi: &DMatrix<f64>, dt: f64, d: usize) -> Result<Kernel> {
    let nm = dphi.ncols();
    let svd = dphi.clone().svd(false, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > KERNEL_RTOL * smax && s > 0.0).count();
    if rank < d {
        return Err(Error::RankDeficiency { rank, d });
    }
    let vt = svd.v_t.unwrap();
    let mut keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > KERNEL_RTOL * smax)
        .collect();
    keep.sort_unstable();
    let rows = vt.select_rows(keep.iter());
    let proj = DMatrix::<f64>::identity(nm, nm) - rows.transpose() * &rows;
    let eig = proj.symmetric_eigen();
    let mut idx: Vec<usize> = (0..nm).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    idx.sort_unstable();
    let basis = eig.eigenvectors.select_columns(idx.iter()) * dt.sqrt();
    Ok(Kernel { basis, rank, dphi: dphi.clone() })
}

pub fn kernel_basis(model: &Model, geo: &DiscreteGeodesic) -> Result<Kernel> {
    let sens = sensitivity(model, geo.x.as_slice(), &geo.h, None)?;
    kernel_from(&sens.dphi, geo.h.dt(), model.d)
}

/// Relative CM norm of the part of k outside ker dφ₁.
pub fn kernel_residual(kernel: &Kernel, k: &ControlGrid) -> f64 {
    let dt = k.dt();
    let g = dt * &kernel.dphi * kernel.dphi.transpose();
    let b = &kernel.dphi * &k.inc;
    let Some(ginv) = g.try_inverse() else { return f64::INFINITY };
    let perp2 = b.dot(&(ginv * &b)).max(0.0);
    perp2.sqrt() / k.norm2().sqrt().max(1e-300)
}

/// q(k, k′) = ⟨k, k′⟩ − ⟨λ₁, ∂²φ₁(k, k′)⟩ for k, k′ in the kernel.
pub fn q_form(model: &Model, geo: &DiscreteGeodesic, k: &ControlGrid, k2: &ControlGrid) -> Result<f64> {
    let kern = kernel_basis(model, geo)?;
    for kk in [k, k2] {
        let r = kernel_residual(&kern, kk);
        if r > KERNEL_INPUT_TOL {
            return Err(Error::NotInKernel { residual: r });
        }
    }
    let w = second_derivative(model, geo.x.as_slice(), &geo.h, k, k2)?;
    Ok(k.inner(k2) - geo.lambda1.dot(&w))
}

/// Same as [`q_form`] with ∂²φ₁ from finite differences (ε = 1e−3).
pub fn q_form_fd(model: &Model, geo: &DiscreteGeodesic, k: &ControlGrid, k2: &ControlGrid) -> Result<f64> {
    let w = second_derivative_fd(model, geo.x.as_slice(), &geo.h, k, k2, 1e-3)?;
    Ok(k.inner(k2) - geo.lambda1.dot(&w))
}

#[derive(Clone, Debug)]
pub struct QSpectrum {
    pub geodesic: DiscreteGeodesic,
    pub kernel: Kernel,
    /// Eigenvalues of q on K, ascending.
    pub mu: Vec<f64>,
    /// Matching CM-orthonormal eigen-controls (increment coordinates).
    pub modes: DMatrix<f64>,
    /// Matrix of q on the kernel basis.
    pub q: DMatrix<f64>,
    /// Variation fields at the nodes for every unit increment direction.
    pub v_nodes: Vec<DMatrix<f64>>,
}

impl QSpectrum {
    pub fn mu_min(&self) -> f64 {
        self.mu.first().copied().unwrap_or(f64::INFINITY)
    }

    pub fn mode(&self, i: usize) -> ControlGrid {
        let g = &self.geodesic.h;
        ControlGrid::from_increments(g.n, g.m, self.modes.column(i).into_owned())
    }

    /// Variation field of control k at the nodes.
    pub fn field(&self, k: &ControlGrid) -> Vec<DVector<f64>> {
        self.v_nodes.iter().map(|v| v * &k.inc).collect()
    }

    /// q(k, k′) from the assembled Hessian; k, k′ need not lie in K.
    pub fn q_bilinear(&self, hess: &DMatrix<f64>, k: &ControlGrid, k2: &ControlGrid) -> f64 {
        k.inner(k2) - k.inc.dot(&(hess * &k2.inc))
    }
}

/// Spectrum of q restricted to ker dφ₁ on the discrete geodesic.
pub fn q_spectrum(model: &Model, geo: &DiscreteGeodesic) -> Result<QSpectrum> {
    let (spec, _) = q_spectrum_with_hessian(model, geo)?;
    Ok(spec)
}

/// [`q_spectrum`] plus the Hessian of ⟨λ₁, φ₁⟩ in increment coordinates.
pub fn q_spectrum_with_hessian(model: &Model, geo: &DiscreteGeodesic) -> Result<(QSpectrum, DMatrix<f64>)> {
    let sens = sensitivity(model, geo.x.as_slice(), &geo.h, Some(&geo.lambda1))?;
    let kernel = kernel_from(&sens.dphi, geo.h.dt(), model.d)?;
    let hm = sens.hess.unwrap();
    let e = &kernel.basis;
    let nk = e.ncols();
    let mut q = DMatrix::<f64>::identity(nk, nk) - e.transpose() * &hm * e;
    q = 0.5 * (&q + q.transpose());
    let eig = q.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..nk).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mu: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let modes = e * eig.eigenvectors.select_columns(order.iter());
    Ok((
        QSpectrum { geodesic: geo.clone(), kernel, mu, modes, q, v_nodes: sens.v_nodes },
        hm,
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct HeatConstant {
    pub c: f64,
    #[serde(rename = "detC1bar")]
    pub det_c1bar: f64,
    #[serde(rename = "Z1")]
    pub z1: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub spectral_factor: f64,
    /// max |μ_n − 1| once the 4d most deviating modes are set aside.
    pub tail_deviation: f64,
    pub mu: Vec<f64>,
}

/// Z₁ = ∫ u₁ u_t⁻¹ X̃₀(γ_t) dt by the trapezoid rule on the flow grid.
pub fn z1(model: &Model, sol: &GeodesicSolution) -> Result<DVector<f64>> {
    let jd = &sol.jacobi;
    let n = jd.steps;
    let u1 = &jd.u[n];
    let mut vals = Vec::with_capacity(n + 1);
    for (q, ui) in sol.path.points.iter().zip(&jd.uinv) {
        vals.push(u1 * ui * ito_drift(model, q.x.as_slice())?);
    }
    let h = sol.path.dt();
    let mut acc = DVector::zeros(model.d);
    for i in 0..n {
        acc += 0.5 * h * (&vals[i] + &vals[i + 1]);
    }
    Ok(acc)
}

/// max |μ − 1| after removing the `skip` largest deviations.
pub fn tail_deviation(mu: &[f64], skip: usize) -> f64 {
    let mut dev: Vec<f64> = mu.iter().map(|m| (m - 1.0).abs()).collect();
    dev.sort_by(|a, b| b.total_cmp(a));
    dev.get(skip).copied().unwrap_or(0.0)
}

/// c(x, y) from det C̄₁, Z₁ and the spectrum of q on an N-interval grid.
pub fn heat_constant(model: &Model, sol: &GeodesicSolution, n: usize) -> Result<HeatConstant> {
    let geo = discretize(model, sol, n)?;
    let spec = q_spectrum(model, &geo)?;
    heat_constant_from(model, sol, &spec)
}

pub fn heat_constant_from(model: &Model, sol: &GeodesicSolution, spec: &QSpectrum) -> Result<HeatConstant> {
    let d = model.d;
    if let Some(&mu) = spec.mu.iter().find(|&&mu| mu <= 0.0) {
        return Err(Error::CutLocus { mu });
    }
    let det = sol.jacobi.c1bar.determinant();
    let z = z1(model, sol)?;
    let lam = sol.path.end().p.clone();
    let log_spec = -0.5 * spec.mu.iter().map(|m| m.ln()).sum::<f64>();
    let c = (2.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0) * det.powf(-0.5)
        * (0.5 * lam.dot(&z)).exp()
        * log_spec.exp();
    let tail = tail_deviation(&spec.mu, 4 * d);
    Ok(HeatConstant {
        c,
        det_c1bar: det,
        z1: z.iter().copied().collect(),
        lambda1: lam.iter().copied().collect(),
        spectral_factor: log_spec.exp(),
        tail_deviation: tail,
        mu: spec.mu.clone(),
    })
}
