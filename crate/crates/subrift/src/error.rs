use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("model evaluation produced a non-finite value in field {field}")]
    ModelEvaluation { field: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("flow escaped the bound {bound} at t={t}")]
    FlowEscape { t: f64, bound: f64 },
    #[error("non-finite state at t={t}")]
    NonFinite { t: f64 },
    #[error("linearization u_t is singular at t={t}")]
    Linearization { t: f64 },
    #[error("no shooting start converged ({candidates} partial candidates, best residual {best_residual})")]
    NoConvergence { candidates: usize, best_residual: f64 },
    #[error("endpoint derivative has rank {rank} < {d}")]
    RankDeficiency { rank: usize, d: usize },
    #[error("control is not in the kernel of the endpoint derivative (residual {residual})")]
    NotInKernel { residual: f64 },
    #[error("second variation has a non-positive eigenvalue {mu}")]
    CutLocus { mu: f64 },
    #[error("J_1 is singular (min singular value {sigma})")]
    SingularJ1 { sigma: f64 },
    #[error("Cholesky factorization failed after jitter {jitter}")]
    Cholesky { jitter: f64 },
    #[error("model is not Riemannian at the queried point")]
    NotRiemannian,
    #[error("K_t is singular at t={t}")]
    SingularK { t: f64 },
    #[error("inconclusive: {0}")]
    Inconclusive(String),
    #[error("no bridge proposal was accepted")]
    ZeroAcceptance,
    #[error("too many escaped paths: {dropped} of {total}")]
    TooManyDropped { dropped: usize, total: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
