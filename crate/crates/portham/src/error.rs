//! Error type shared by all modules.

use crate::ocp::OCPResult;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// `max |R - R^T|` exceeded the symmetry tolerance.
    #[error("matrix is not symmetric: max |R - R^T| = {deviation:.3e} exceeds {tol:.3e}")]
    NotSymmetric { deviation: f64, tol: f64 },

    /// `max |J + J^T|` must vanish exactly.
    #[error("matrix is not skew-symmetric: max |J + J^T| = {deviation:.3e}")]
    NotSkew { deviation: f64 },

    /// An eigenvalue fell below the clamping band `[-kernel_tol, 0)`.
    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue:.6e} < {limit:.6e}")]
    NotPsd { eigenvalue: f64, limit: f64 },

    /// Every eigenvalue sits at or below `kernel_tol`, so no positive
    /// spectral gap exists.
    #[error("no spectral gap: all eigenvalues are at or below kernel_tol = {kernel_tol:.3e}")]
    NoGap { kernel_tol: f64 },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    /// Explicit RK4 step outside its stability region.
    #[error(
        "time step {dt:.6e} is unstable for this system; largest admissible step is {max_dt:.6e}"
    )]
    UnstableStep { dt: f64, max_dt: f64 },

    #[error("control signal and trajectory do not share a time grid")]
    GridMismatch,

    #[error("horizon {horizon} is shorter than the steering phases {t0} + {t1}")]
    HorizonTooShort { horizon: f64, t0: f64, t1: f64 },

    /// Solver hit the outer-iteration limit before meeting its tolerances.
    /// Carries the best iterate found so callers can still inspect it.
    #[error(
        "solver did not converge: terminal error {terminal_error:.3e}, kkt residual {kkt_residual:.3e}"
    )]
    NotConverged {
        terminal_error: f64,
        kkt_residual: f64,
        result: Box<OCPResult>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
