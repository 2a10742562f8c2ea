use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("lattice ball has {count} atoms, above the cap of {cap}")]
    AtomCapExceeded { count: usize, cap: usize },
    #[error("covariance is singular (min eigenvalue {min_eig:e})")]
    SingularCovariance { min_eig: f64 },
    #[error("quadrature did not converge: relative normalization error {rel_err:e}")]
    Quadrature { rel_err: f64 },
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("matrix is not PSD: eigenvalue {eig:e} below tolerance {tol:e}")]
    NotPsd { eig: f64, tol: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("kernel of A is not contained in kernel of B (residual {residual:e})")]
    KernelInclusion { residual: f64 },
    #[error("all weights underflowed at t = {t}; the step is too large")]
    WeightUnderflow { t: f64 },
    #[error("non-finite value encountered at t = {t}")]
    NonFinite { t: f64 },
    #[error("no collapse within {steps} steps (t = {t})")]
    NoCollapse { steps: usize, t: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("record has no stored path")]
    MissingPath,
    #[error("{0} records did not collapse")]
    Uncollapsed(usize),
    #[error("sample sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("sample size {0} exceeds the exact-assignment cap {1}")]
    SizeOverCap(usize, usize),
    #[error("sinkhorn did not converge in {iters} iterations (marginal error {err:e})")]
    SinkhornNoConvergence { iters: usize, err: f64 },
    #[error("aliasing: tail mass {mass:e} on the grid boundary")]
    Aliasing { mass: f64 },
    #[error("measure is flagged discrete; relative entropy to a Gaussian is infinite")]
    DiscreteInput,
    #[error("sigma vanishes at t = {t}")]
    ZeroSigma { t: f64 },
    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
