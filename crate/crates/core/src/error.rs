use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("grid mismatch: expected n = {expected}, found n = {found}")]
    GridMismatch { expected: usize, found: usize },
    #[error("degenerate eigenvector direction (|v| = {0:e})")]
    DegenerateEigenvector(f64),
    #[error("coefficient is not positive definite at node {node} (min eigenvalue {min_eig:e})")]
    NotPositiveDefinite { node: usize, min_eig: f64 },
    #[error("conjugate gradients did not converge in {iterations} iterations (relative residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },
    #[error("kmax = {kmax} requires grid n > {}, found n = {n}", 2 * kmax)]
    Resolution { kmax: usize, n: usize },
    #[error("degenerate Voigt-Reuss scale a_m - a_h = {0:e}")]
    DegenerateScale(f64),
    #[error("reference solution has zero norm for samples {0:?}")]
    ZeroNorm(Vec<usize>),
    #[error("exponent mismatch: q = {q} but 2p/(p-2) = {expected}")]
    ExponentMismatch { q: f64, expected: f64 },
    #[error("non-finite activation in layer {0}")]
    NonFiniteActivation(usize),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize, losses: Vec<f64> },
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line tool: 2 validation, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Format(_) => 4,
            Error::NonFinite(_)
            | Error::DegenerateEigenvector(_)
            | Error::NonConvergence { .. }
            | Error::DegenerateScale(_)
            | Error::ZeroNorm(_)
            | Error::NonFiniteActivation(_)
            | Error::NonFiniteGradient
            | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
