use thiserror::Error;

use crate::bregman_iter::BregmanState;
use crate::variational::RegSolution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("point outside the functional domain: {0}")]
    Domain(String),

    #[error("subgradient certificate failed: duality gap {gap:e} exceeds {tol:e}")]
    Cert { gap: f64, tol: f64 },

    #[error("not differentiable: {0}")]
    NotDifferentiable(String),

    #[error("conjugate not available for {0}")]
    ConjugateUnavailable(&'static str),

    #[error("operation not supported for {0}")]
    UnsupportedFunctional(&'static str),

    #[error("rank deficient column block (diagonal ratio {ratio:e})")]
    RankDeficient { ratio: f64 },

    #[error("active-set loop did not converge after {0} iterations")]
    NonConvergence(usize),

    #[error("solver stopped after {iterations} iterations with KKT residual {residual:e}")]
    MaxIterExceeded { iterations: usize, residual: f64 },

    #[error("variational solve not certified: KKT residual {}", .0.kkt_residual)]
    SolveNotConverged(Box<RegSolution>),

    #[error("Bregman iteration hit max_iter={} before the stopping rule fired", .0.len().saturating_sub(1))]
    StoppingNotReached(Vec<BregmanState>),

    #[error("solution not KKT-certified")]
    NotCertified,

    #[error("no dual certificate with margin {margin}: off-support sup norm {achieved}")]
    Infeasible { margin: f64, achieved: f64 },

    #[error("inverse scale space exceeded {0} breakpoints")]
    MaxBreakpointsExceeded(usize),

    #[error("degenerate breakpoint: {0}")]
    Degenerate(String),

    #[error("supplied point is not a minimizer: gradient sup norm {0:e}")]
    NotMinimizer(f64),

    #[error("singular linear system")]
    SingularSystem,

    #[error("time step {0} failed")]
    StepFailure(usize),

    #[error("negative density {value:e} in cell {cell} at step {step}")]
    NegativeDensity { step: usize, cell: usize, value: f64 },

    #[error("relative entropy increased at step {step}: {before:e} -> {after:e}")]
    MonotonicityViolation { step: usize, before: f64, after: f64 },

    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),

    #[error("measure has no positive atoms")]
    EmptySupport,

    #[error("brute force limited to n <= 9, got {0}")]
    TooLarge(usize),

    #[error("bound violated: {0}")]
    BoundViolated(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    /// Stable machine-readable identifier used in CLI failure reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::Domain(_) => "DomainError",
            Error::Cert { .. } => "CertError",
            Error::NotDifferentiable(_) => "NotDifferentiable",
            Error::ConjugateUnavailable(_) => "ConjugateUnavailable",
            Error::UnsupportedFunctional(_) => "UnsupportedFunctional",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::NonConvergence(_) => "NonConvergence",
            Error::MaxIterExceeded { .. } | Error::SolveNotConverged(_) => "MaxIterExceeded",
            Error::StoppingNotReached(_) => "MaxIterExceeded",
            Error::NotCertified => "NotCertified",
            Error::Infeasible { .. } => "Infeasible",
            Error::MaxBreakpointsExceeded(_) => "MaxBreakpointsExceeded",
            Error::Degenerate(_) => "Degenerate",
            Error::NotMinimizer(_) => "NotMinimizer",
            Error::SingularSystem => "SingularSystem",
            Error::StepFailure(_) => "StepFailure",
            Error::NegativeDensity { .. } => "NegativeDensity",
            Error::MonotonicityViolation { .. } => "MonotonicityViolation",
            Error::MeshMismatch(_) => "MeshMismatch",
            Error::EmptySupport => "EmptySupport",
            Error::TooLarge(_) => "TooLarge",
            Error::BoundViolated(_) => "BoundViolated",
            Error::InvalidInput(_) => "InvalidInput",
            Error::Io { .. } => "IoError",
            Error::Parse { .. } => "ParseError",
        }
    }

    /// True for failures that signal a violated mathematical property rather
    /// than bad input.
    pub fn is_check_failure(&self) -> bool {
        matches!(
            self,
            Error::MonotonicityViolation { .. }
                | Error::BoundViolated(_)
                | Error::NegativeDensity { .. }
                | Error::NotCertified
        )
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
