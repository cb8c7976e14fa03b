//! Sub-Riemannian structures on a single chart ℝᵈ.
//!
//! A [`Model`] is a frame of `m` vector fields with exact first and second
//! derivatives. The zoo models in [`zoo`] have hand-written derivatives;
//! custom models implement [`ValueFrame`] once and get derivatives from
//! forward-mode jets.

pub mod dual;
pub mod zoo;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hamflow::{self, PhasePoint};
pub use dual::{Jet, Scalar};

/// Frame with analytic derivatives, written into flat buffers.
///
/// Layouts for dimension `d`:
/// values `[l*d + i] = X_l^i`, jacobians `[(l*d + i)*d + j] = ∂_j X_l^i`,
/// hessians `[((l*d + i)*d + j)*d + k] = ∂_j∂_k X_l^i`.
pub trait Frame: Send + Sync {
    fn dim(&self) -> usize;
    fn size(&self) -> usize;
    fn values(&self, x: &[f64], out: &mut [f64]);
    fn jacobians(&self, x: &[f64], out: &mut [f64]);
    fn hessians(&self, x: &[f64], out: &mut [f64]);
    /// Optional drift X₀; returns false when absent.
    fn drift(&self, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }
    /// Jacobian of X₀ in the layout `[i*d + j] = ∂_j X₀^i`.
    fn drift_jacobian(&self, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

/// Frame specified by values only, generic over the scalar type.
pub trait ValueFrame: Send + Sync {
    fn dim(&self) -> usize;
    fn size(&self) -> usize;
    /// The `m` fields at `x`, each of length `d`.
    fn fields<S: Scalar>(&self, x: &[S]) -> Vec<Vec<S>>;
    /// Optional drift X₀.
    fn drift<S: Scalar>(&self, _x: &[S]) -> Option<Vec<S>> {
        None
    }
}

/// Adapts a [`ValueFrame`] to [`Frame`] through jets.
pub struct DualFrame<F>(pub F);

impl<F: ValueFrame> Frame for DualFrame<F> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn size(&self) -> usize {
        self.0.size()
    }
    fn values(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (l, f) in self.0.fields(x).into_iter().enumerate() {
            out[l * d..(l + 1) * d].copy_from_slice(&f);
        }
    }
    fn jacobians(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (l, f) in self.0.fields(&Jet::seed(x)).into_iter().enumerate() {
            for (i, c) in f.iter().enumerate() {
                out[(l * d + i) * d..(l * d + i + 1) * d].copy_from_slice(&c.g);
            }
        }
    }
    fn hessians(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (l, f) in self.0.fields(&Jet::seed(x)).into_iter().enumerate() {
            for (i, c) in f.iter().enumerate() {
                let o = (l * d + i) * d * d;
                out[o..o + d * d].copy_from_slice(&c.h);
            }
        }
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) -> bool {
        match self.0.drift(x) {
            Some(v) => {
                out[..v.len()].copy_from_slice(&v);
                true
            }
            None => false,
        }
    }
    fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) -> bool {
        let d = self.dim();
        match self.0.drift(&Jet::seed(x)) {
            Some(v) => {
                for (i, c) in v.iter().enumerate() {
                    out[i * d..(i + 1) * d].copy_from_slice(&c.g);
                }
                true
            }
            None => false,
        }
    }
}

/// A named frame plus the metadata the zoo oracles rely on.
#[derive(Clone)]
pub struct Model {
    pub name: String,
    pub d: usize,
    pub m: usize,
    /// a(x) is positive definite on the chart domain.
    pub riemannian: bool,
    /// Constant identity frame; enables exact samplers.
    pub flat: bool,
    /// Chart coordinates with |x| below this radius are valid.
    pub chart_radius: f64,
    frame: Arc<dyn Frame>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("m", &self.m)
            .finish()
    }
}

impl Model {
    pub fn new(name: impl Into<String>, frame: Arc<dyn Frame>) -> Self {
        Model {
            name: name.into(),
            d: frame.dim(),
            m: frame.size(),
            riemannian: false,
            flat: false,
            chart_radius: f64::INFINITY,
            frame,
        }
    }

    /// A model from a value-only frame; derivatives come from jets.
    pub fn custom<F: ValueFrame + 'static>(name: impl Into<String>, f: F) -> Self {
        Model::new(name, Arc::new(DualFrame(f)))
    }

    pub fn with_riemannian(mut self, r: bool) -> Self {
        self.riemannian = r;
        self
    }

    pub fn with_chart_radius(mut self, r: f64) -> Self {
        self.chart_radius = r;
        self
    }

    pub fn frame(&self) -> &dyn Frame {
        &*self.frame
    }

    /// Columns are X_ℓ(x).
    pub fn values(&self, x: &[f64]) -> DMatrix<f64> {
        let mut buf = vec![0.0; self.d * self.m];
        self.frame.values(x, &mut buf);
        DMatrix::from_vec(self.d, self.m, buf)
    }

    /// ∇X_ℓ(x) with entry (i, j) = ∂_j X_ℓ^i.
    pub fn jacobians(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let d = self.d;
        let mut buf = vec![0.0; self.m * d * d];
        self.frame.jacobians(x, &mut buf);
        (0..self.m)
            .map(|l| DMatrix::from_row_slice(d, d, &buf[l * d * d..(l + 1) * d * d]))
            .collect()
    }

    /// `out[l][i]` has entry (j, k) = ∂_j∂_k X_ℓ^i.
    pub fn hessians(&self, x: &[f64]) -> Vec<Vec<DMatrix<f64>>> {
        let d = self.d;
        let mut buf = vec![0.0; self.m * d * d * d];
        self.frame.hessians(x, &mut buf);
        (0..self.m)
            .map(|l| {
                (0..d)
                    .map(|i| {
                        let o = (l * d + i) * d * d;
                        DMatrix::from_row_slice(d, d, &buf[o..o + d * d])
                    })
                    .collect()
            })
            .collect()
    }

    pub fn drift(&self, x: &[f64]) -> Option<DVector<f64>> {
        let mut buf = vec![0.0; self.d];
        self.frame.drift(x, &mut buf).then(|| DVector::from_vec(buf))
    }

    pub fn drift_jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let mut buf = vec![0.0; self.d * self.d];
        self.frame
            .drift_jacobian(x, &mut buf)
            .then(|| DMatrix::from_row_slice(self.d, self.d, &buf))
    }
}

/// X_ℓ, ∇X_ℓ and ∇²X_ℓ at one point.
#[derive(Clone, Debug)]
pub struct FrameEval {
    pub values: Vec<DVector<f64>>,
    pub jacobians: Vec<DMatrix<f64>>,
    /// `hessians[l][i]` is the Hessian of the component X_ℓ^i.
    pub hessians: Vec<Vec<DMatrix<f64>>>,
}

fn check_point(model: &Model, x: &[f64]) -> Result<()> {
    if x.len() != model.d {
        return Err(Error::Dimension { expected: model.d, got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("point is not finite".into()));
    }
    Ok(())
}

pub fn eval_frame(model: &Model, x: &[f64]) -> Result<FrameEval> {
    check_point(model, x)?;
    let vals = model.values(x);
    let jac = model.jacobians(x);
    let hess = model.hessians(x);
    for l in 0..model.m {
        let finite = vals.column(l).iter().all(|v| v.is_finite())
            && jac[l].iter().all(|v| v.is_finite())
            && hess[l].iter().all(|h| h.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::ModelEvaluation { field: l });
        }
    }
    Ok(FrameEval {
        values: (0..model.m).map(|l| vals.column(l).into_owned()).collect(),
        jacobians: jac,
        hessians: hess,
    })
}

/// a(x) = Σ_ℓ X_ℓ X_ℓᵀ.
pub fn diffusivity(model: &Model, x: &[f64]) -> Result<DMatrix<f64>> {
    check_point(model, x)?;
    let v = model.values(x);
    if let Some(l) = (0..model.m).find(|&l| v.column(l).iter().any(|c| !c.is_finite())) {
        return Err(Error::ModelEvaluation { field: l });
    }
    Ok(&v * v.transpose())
}

/// X̃₀ⁱ = X₀ⁱ + ½ Σ_ℓ Σ_j ∂_j X_ℓⁱ X_ℓʲ.
pub fn ito_drift(model: &Model, x: &[f64]) -> Result<DVector<f64>> {
    let fe = eval_frame(model, x)?;
    let mut out = model.drift(x).unwrap_or_else(|| DVector::zeros(model.d));
    for l in 0..model.m {
        out += 0.5 * &fe.jacobians[l] * &fe.values[l];
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelEvaluation { field: 0 });
    }
    Ok(out)
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EquivalenceReport {
    pub max_diffusivity_gap: f64,
    pub flow_endpoint_gap: f64,
}

/// Compares two frames through their diffusivities and Hamiltonian flows.
pub fn structure_equivalence_probe(
    a: &Model,
    b: &Model,
    points: &[Vec<f64>],
    lambda0: &PhasePoint,
    steps: usize,
) -> Result<EquivalenceReport> {
    if a.d != b.d {
        return Err(Error::Dimension { expected: a.d, got: b.d });
    }
    let mut gap: f64 = 0.0;
    for x in points {
        let da = diffusivity(a, x)?;
        let db = diffusivity(b, x)?;
        gap = gap.max((da - db).abs().max());
    }
    let pa = hamflow::flow(a, lambda0, 1.0, steps)?;
    let pb = hamflow::flow(b, lambda0, 1.0, steps)?;
    let ea = pa.end();
    let eb = pb.end();
    let flow_gap = (&ea.x - &eb.x).amax().max((&ea.p - &eb.p).amax());
    Ok(EquivalenceReport { max_diffusivity_gap: gap, flow_endpoint_gap: flow_gap })
}
