use thiserror::Error;

/// Errors raised by kernel construction, fitting and testing.
#[derive(Debug, Error)]
pub enum PlrError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("fit diverged: {0}")]
    Divergence(String),
    #[error("{model} fit failed to converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    Convergence {
        model: String,
        iterations: usize,
        grad_norm: f64,
        coeffs: Vec<f64>,
    },
    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(String),
    #[error("bracket error: f(lo)={f_lo:.3e}, f(hi)={f_hi:.3e}; spectrum max {max_eig:.3e}, rank {rank}")]
    Bracket {
        f_lo: f64,
        f_hi: f64,
        max_eig: f64,
        rank: usize,
    },
    #[error("split degeneracy: a half had an empty group after {0} reshuffles")]
    SplitDegenerate(usize),
    #[error("calibration unreliable: {failed} of {total} permutation fits failed")]
    CalibrationUnreliable { failed: usize, total: usize },
    #[error("single group")]
    SingleGroup,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, PlrError>;
