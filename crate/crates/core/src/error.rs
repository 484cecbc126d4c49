use thiserror::Error;

/// Errors raised by the homogenization toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid field spec: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point {point:?} lies outside the sampled box [{lo:?}, {hi:?}]")]
    OutOfDomain {
        point: Vec<f64>,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },

    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("grid under-resolves the microstructure: h = {h:e} but at most {h_max:e} is allowed ({detail})")]
    UnderResolved { h: f64, h_max: f64, detail: String },

    #[error("time step {dt:e} exceeds the stability bound {dt_max:e}")]
    Unstable { dt: f64, dt_max: f64 },

    #[error("degenerate update at cell {cell}: vector vanished before renormalization")]
    Degenerate { cell: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("statistic `{0}` has no reference value with provenance")]
    MissingReference(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
