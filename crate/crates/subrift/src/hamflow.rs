//! Bicharacteristic flow of H(x,p) = ½⟨p, a(x)p⟩ and its linearizations.
//!
//! Everything is integrated with fixed-step classical RK4. The Jacobi maps
//! are the x-components of the linearized flow: J_t starts from (0, e_j) at
//! t = 0 and runs forward, K_t starts from (0, −e_j) at t = T and runs
//! backward.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::Model;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_ESCAPE_BOUND: f64 = 1e6;
pub const DEFAULT_TOL_H: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint {
    pub x: DVector<f64>,
    pub p: DVector<f64>,
}

impl PhasePoint {
    pub fn new(x: &[f64], p: &[f64]) -> Self {
        PhasePoint { x: DVector::from_column_slice(x), p: DVector::from_column_slice(p) }
    }
}

/// Scratch buffers for frame evaluation in the integrators.
pub(crate) struct Ws {
    pub d: usize,
    pub m: usize,
    pub v: Vec<f64>,
    pub j: Vec<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    /// P_ℓ = ⟨p, ∇X_ℓ⟩, layout [l*d + j].
    pub pj: Vec<f64>,
}

impl Ws {
    pub fn new(model: &Model) -> Self {
        let (d, m) = (model.d, model.m);
        Ws {
            d,
            m,
            v: vec![0.0; d * m],
            j: vec![0.0; m * d * d],
            h: vec![0.0; m * d * d * d],
            c: vec![0.0; m],
            pj: vec![0.0; m * d],
        }
    }

    /// Loads values and Jacobians at x and the controls c_ℓ = ⟨p, X_ℓ⟩.
    pub fn load(&mut self, model: &Model, x: &[f64], p: &[f64], hess: bool) {
        let (d, m) = (self.d, self.m);
        let f = model.frame();
        f.values(x, &mut self.v);
        f.jacobians(x, &mut self.j);
        if hess {
            f.hessians(x, &mut self.h);
        }
        for l in 0..m {
            self.c[l] = (0..d).map(|i| p[i] * self.v[l * d + i]).sum();
            for jj in 0..d {
                self.pj[l * d + jj] = (0..d).map(|i| p[i] * self.j[(l * d + i) * d + jj]).sum();
            }
        }
    }

    /// Bicharacteristic vector field at the loaded point.
    pub fn ham(&self, dx: &mut [f64], dp: &mut [f64]) {
        let (d, m) = (self.d, self.m);
        dx[..d].fill(0.0);
        dp[..d].fill(0.0);
        for l in 0..m {
            for i in 0..d {
                dx[i] += self.c[l] * self.v[l * d + i];
                dp[i] -= self.c[l] * self.pj[l * d + i];
            }
        }
    }

    /// Linearized field for one column (δx, δp); needs Hessians loaded.
    pub fn lin(&self, p: &[f64], ax: &[f64], ap: &[f64], dx: &mut [f64], dp: &mut [f64]) {
        let (d, m) = (self.d, self.m);
        dx[..d].fill(0.0);
        dp[..d].fill(0.0);
        for l in 0..m {
            let vl = &self.v[l * d..(l + 1) * d];
            let pl = &self.pj[l * d..(l + 1) * d];
            let jl = &self.j[l * d * d..(l + 1) * d * d];
            let hl = &self.h[l * d * d * d..(l + 1) * d * d * d];
            let dc: f64 = (0..d).map(|i| ap[i] * vl[i] + pl[i] * ax[i]).sum();
            let c = self.c[l];
            for i in 0..d {
                let jx: f64 = (0..d).map(|k| jl[i * d + k] * ax[k]).sum();
                dx[i] += dc * vl[i] + c * jx;
            }
            for jj in 0..d {
                let jtp: f64 = (0..d).map(|i| jl[i * d + jj] * ap[i]).sum();
                let mut qx = 0.0;
                for i in 0..d {
                    if p[i] == 0.0 {
                        continue;
                    }
                    let row = &hl[(i * d + jj) * d..(i * d + jj + 1) * d];
                    qx += p[i] * (0..d).map(|k| row[k] * ax[k]).sum::<f64>();
                }
                dp[jj] -= dc * pl[jj] + c * jtp + c * qx;
            }
        }
    }

    /// du = Σ_ℓ c_ℓ ∇X_ℓ u for a d×d column-major block.
    pub fn ulin(&self, u: &[f64], du: &mut [f64]) {
        let (d, m) = (self.d, self.m);
        du[..d * d].fill(0.0);
        for l in 0..m {
            let c = self.c[l];
            if c == 0.0 {
                continue;
            }
            let jl = &self.j[l * d * d..(l + 1) * d * d];
            for col in 0..d {
                for i in 0..d {
                    let s: f64 = (0..d).map(|k| jl[i * d + k] * u[col * d + k]).sum();
                    du[col * d + i] += c * s;
                }
            }
        }
    }
}

/// Classical RK4 with reusable stage buffers.
#[derive(Default)]
pub(crate) struct Rk4 {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4 {
    /// One step of y' = f(y) in place.
    pub fn step<F: FnMut(&[f64], &mut [f64])>(&mut self, y: &mut [f64], h: f64, f: &mut F) {
        let n = y.len();
        for k in self.k.iter_mut() {
            k.resize(n, 0.0);
        }
        self.tmp.resize(n, 0.0);
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        f(y, k1);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        f(tmp, k2);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        f(tmp, k3);
        for i in 0..n {
            tmp[i] = y[i] + h * k3[i];
        }
        f(tmp, k4);
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// H = ½ Σ_ℓ ⟨p, X_ℓ(x)⟩².
pub fn hamiltonian(model: &Model, lam: &PhasePoint) -> f64 {
    let v = model.values(lam.x.as_slice());
    0.5 * (0..model.m).map(|l| v.column(l).dot(&lam.p).powi(2)).sum::<f64>()
}

/// Grid of phase points at t_i = i·T/N with the controls ḣ^ℓ = ⟨p, X_ℓ⟩.
#[derive(Clone, Debug)]
pub struct BicharPath {
    pub t: Vec<f64>,
    pub points: Vec<PhasePoint>,
    pub steps: usize,
    pub horizon: f64,
    pub h0: f64,
    pub controls: Vec<DVector<f64>>,
}

impl BicharPath {
    pub fn start(&self) -> &PhasePoint {
        &self.points[0]
    }
    pub fn end(&self) -> &PhasePoint {
        &self.points[self.steps]
    }
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// ∫⟨p, a p⟩ dt by the composite trapezoid rule.
    pub fn energy_quadrature(&self) -> f64 {
        let f: Vec<f64> = self.controls.iter().map(|c| c.norm_squared()).collect();
        trapezoid(&f, self.dt())
    }
}

pub(crate) fn trapezoid(f: &[f64], h: f64) -> f64 {
    let n = f.len();
    if n < 2 {
        return 0.0;
    }
    h * (0.5 * (f[0] + f[n - 1]) + f[1..n - 1].iter().sum::<f64>())
}

fn check_state(y: &[f64], t: f64, bound: f64) -> Result<()> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { t });
    }
    if y.iter().any(|v| v.abs() > bound) {
        return Err(Error::FlowEscape { t, bound });
    }
    Ok(())
}

pub fn flow(model: &Model, lam0: &PhasePoint, horizon: f64, steps: usize) -> Result<BicharPath> {
    flow_with_bound(model, lam0, horizon, steps, DEFAULT_ESCAPE_BOUND)
}

pub fn flow_with_bound(
    model: &Model,
    lam0: &PhasePoint,
    horizon: f64,
    steps: usize,
    bound: f64,
) -> Result<BicharPath> {
    let d = model.d;
    if steps < 2 {
        return Err(Error::InvalidArgument("flow needs at least 2 steps".into()));
    }
    if lam0.x.len() != d || lam0.p.len() != d {
        return Err(Error::Dimension { expected: d, got: lam0.x.len() });
    }
    let mut ws = Ws::new(model);
    let mut y: Vec<f64> = lam0.x.iter().chain(lam0.p.iter()).copied().collect();
    check_state(&y, 0.0, bound)?;
    let h = horizon / steps as f64;
    let mut points = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps + 1);
    let mut rhs = |s: &[f64], out: &mut [f64]| {
        ws.load(model, &s[..d], &s[d..], false);
        let (a, b) = out.split_at_mut(d);
        ws.ham(a, b);
    };
    let mut t = Vec::with_capacity(steps + 1);
    let mut rk = Rk4::default();
    for i in 0..=steps {
        if i > 0 {
            rk.step(&mut y, h, &mut rhs);
            check_state(&y, i as f64 * h, bound)?;
        }
        t.push(i as f64 * h);
        points.push(PhasePoint::new(&y[..d], &y[d..]));
    }
    let vals: Vec<DMatrix<f64>> = points.iter().map(|q| model.values(q.x.as_slice())).collect();
    for (q, v) in points.iter().zip(&vals) {
        controls.push(v.transpose() * &q.p);
    }
    let h0 = hamiltonian(model, &points[0]);
    Ok(BicharPath { t, points, steps, horizon, h0, controls })
}

/// max_i |H(λ_{t_i}) − H₀| / (1 + H₀).
pub fn hamiltonian_drift_report(model: &Model, path: &BicharPath) -> f64 {
    path.points
        .iter()
        .map(|q| (hamiltonian(model, q) - path.h0).abs() / (1.0 + path.h0))
        .fold(0.0, f64::max)
}

/// J, K, u on the flow grid together with C₁ and C̄₁.
#[derive(Clone, Debug)]
pub struct JacobiData {
    pub t: Vec<f64>,
    pub steps: usize,
    pub horizon: f64,
    /// J_t and its p-component.
    pub j: Vec<DMatrix<f64>>,
    pub jp: Vec<DMatrix<f64>>,
    /// K_t, its p-component and the backward base trajectory.
    pub k: Vec<DMatrix<f64>>,
    pub kp: Vec<DMatrix<f64>>,
    pub kbase: Vec<PhasePoint>,
    pub u: Vec<DMatrix<f64>>,
    pub uinv: Vec<DMatrix<f64>>,
    /// ∫₀^{t_i} u⁻¹ a u⁻ᵀ by cumulative trapezoid.
    pub c1_cum: Vec<DMatrix<f64>>,
    pub c1: DMatrix<f64>,
    pub c1bar: DMatrix<f64>,
}

fn pack(x: &DVector<f64>, p: &DVector<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    x.iter().chain(p.iter()).chain(a.iter()).chain(b.iter()).copied().collect()
}

/// Integrator for (x, p, δx, δp) with `cols` columns, optionally carrying u.
pub(crate) struct LinSystem<'a> {
    model: &'a Model,
    ws: Ws,
    rk: Rk4,
    cols: usize,
    with_u: bool,
    dx: Vec<f64>,
    dp: Vec<f64>,
}

impl<'a> LinSystem<'a> {
    pub fn new(model: &'a Model, cols: usize, with_u: bool) -> Self {
        LinSystem {
            model,
            ws: Ws::new(model),
            rk: Rk4::default(),
            cols,
            with_u,
            dx: vec![0.0; model.d],
            dp: vec![0.0; model.d],
        }
    }

    pub fn step(&mut self, y: &mut [f64], h: f64) {
        let d = self.model.d;
        let (model, cols, with_u) = (self.model, self.cols, self.with_u);
        let ws = &mut self.ws;
        let (dxb, dpb) = (&mut self.dx, &mut self.dp);
        let mut rhs = |s: &[f64], out: &mut [f64]| {
            ws.load(model, &s[..d], &s[d..2 * d], true);
            {
                let (a, b) = out[..2 * d].split_at_mut(d);
                ws.ham(a, b);
            }
            let p = &s[d..2 * d];
            let ox = 2 * d;
            let op = ox + d * cols;
            for c in 0..cols {
                let ax = &s[ox + c * d..ox + (c + 1) * d];
                let ap = &s[op + c * d..op + (c + 1) * d];
                ws.lin(p, ax, ap, dxb, dpb);
                out[ox + c * d..ox + (c + 1) * d].copy_from_slice(dxb);
                out[op + c * d..op + (c + 1) * d].copy_from_slice(dpb);
            }
            if with_u {
                let ou = op + d * cols;
                let (_, tail) = out.split_at_mut(ou);
                ws.ulin(&s[ou..ou + d * d], tail);
            }
        };
        self.rk.step(y, h, &mut rhs);
    }
}

fn unpack(y: &[f64], d: usize, cols: usize) -> (PhasePoint, DMatrix<f64>, DMatrix<f64>) {
    let ox = 2 * d;
    let op = ox + d * cols;
    (
        PhasePoint::new(&y[..d], &y[d..2 * d]),
        DMatrix::from_column_slice(d, cols, &y[ox..op]),
        DMatrix::from_column_slice(d, cols, &y[op..op + d * cols]),
    )
}

pub fn jacobi_pair(model: &Model, path: &BicharPath) -> Result<JacobiData> {
    let d = model.d;
    let n = path.steps;
    let h = path.dt();
    let mut fwd = LinSystem::new(model, d, true);
    let mut bwd = LinSystem::new(model, d, false);

    let id = DMatrix::<f64>::identity(d, d);
    let zero = DMatrix::<f64>::zeros(d, d);
    let s0 = path.start();
    let mut y = pack(&s0.x, &s0.p, &zero, &id);
    y.extend(id.iter());
    let mut j = Vec::with_capacity(n + 1);
    let mut jp = Vec::with_capacity(n + 1);
    let mut u = Vec::with_capacity(n + 1);
    for i in 0..=n {
        if i > 0 {
            fwd.step(&mut y, h);
            check_state(&y, path.t[i], DEFAULT_ESCAPE_BOUND)?;
        }
        let (_, a, b) = unpack(&y, d, d);
        j.push(a);
        jp.push(b);
        u.push(DMatrix::from_column_slice(d, d, &y[2 * d + 2 * d * d..]));
    }

    let s1 = path.end();
    let mut y = pack(&s1.x, &s1.p, &zero, &(-&id));
    let mut k = vec![zero.clone(); n + 1];
    let mut kp = vec![zero.clone(); n + 1];
    let mut kbase = vec![s1.clone(); n + 1];
    for i in (0..=n).rev() {
        if i < n {
            bwd.step(&mut y, -h);
            check_state(&y, path.t[i], DEFAULT_ESCAPE_BOUND)?;
        }
        let (q, a, b) = unpack(&y, d, d);
        kbase[i] = q;
        k[i] = a;
        kp[i] = b;
    }

    let mut uinv = Vec::with_capacity(n + 1);
    for (i, ui) in u.iter().enumerate() {
        let inv = ui.clone().try_inverse().ok_or(Error::Linearization { t: path.t[i] })?;
        if !inv.iter().all(|v| v.is_finite()) {
            return Err(Error::Linearization { t: path.t[i] });
        }
        uinv.push(inv);
    }
    let integrand: Vec<DMatrix<f64>> = path
        .points
        .iter()
        .zip(&uinv)
        .map(|(q, ui)| {
            let v = model.values(q.x.as_slice());
            let w = ui * v;
            &w * w.transpose()
        })
        .collect();
    let mut c1_cum = Vec::with_capacity(n + 1);
    let mut acc = DMatrix::<f64>::zeros(d, d);
    c1_cum.push(acc.clone());
    for i in 1..=n {
        acc += 0.5 * h * (&integrand[i - 1] + &integrand[i]);
        c1_cum.push(acc.clone());
    }
    let c1 = acc;
    let c1bar = &u[n] * &c1 * u[n].transpose();
    Ok(JacobiData {
        t: path.t.clone(),
        steps: n,
        horizon: path.horizon,
        j,
        jp,
        k,
        kp,
        kbase,
        u,
        uinv,
        c1_cum,
        c1,
        c1bar,
    })
}

impl JacobiData {
    fn locate(&self, t: f64) -> (usize, f64) {
        let h = self.horizon / self.steps as f64;
        let t = t.clamp(0.0, self.horizon);
        let i = ((t / h).floor() as usize).min(self.steps);
        (i, t - self.t[i])
    }

    /// J at an arbitrary time by one RK4 sub-step from the nearest node below.
    pub fn j_at(&self, model: &Model, path: &BicharPath, t: f64) -> DMatrix<f64> {
        let (i, r) = self.locate(t);
        if r == 0.0 {
            return self.j[i].clone();
        }
        let d = model.d;
        let q = &path.points[i];
        let mut y = pack(&q.x, &q.p, &self.j[i], &self.jp[i]);
        LinSystem::new(model, d, false).step(&mut y, r);
        unpack(&y, d, d).1
    }

    /// K at an arbitrary time by one backward RK4 sub-step from the node above.
    pub fn k_at(&self, model: &Model, t: f64) -> DMatrix<f64> {
        let (i, r) = self.locate(t);
        if r == 0.0 {
            return self.k[i].clone();
        }
        let d = model.d;
        let q = &self.kbase[i + 1];
        let mut y = pack(&q.x, &q.p, &self.k[i + 1], &self.kp[i + 1]);
        let h = self.t[i + 1] - self.t[i];
        LinSystem::new(model, d, false).step(&mut y, -(h - r));
        unpack(&y, d, d).1
    }

    /// ‖J₁ − K₀ᵀ‖_F / ‖J₁‖_F.
    pub fn symmetry_residual(&self) -> f64 {
        let j1 = &self.j[self.steps];
        (j1 - self.k[0].transpose()).norm() / j1.norm()
    }
}
