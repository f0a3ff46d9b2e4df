use thiserror::Error;

/// Everything that can go wrong while fitting a posterior geometry or
/// evaluating a discrepancy measure.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BdmError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: String, got: usize },

    #[error("non-finite function value at {point:?}")]
    Evaluation { point: Vec<f64> },

    #[error("no convergence after {iterations} iterations (|grad|_inf = {grad_norm:e})")]
    Convergence {
        iterations: usize,
        grad_norm: f64,
        trace: Vec<f64>,
    },

    #[error("quadrature did not reach tolerance: estimate {estimate}, error {error:e}")]
    Accuracy { estimate: f64, error: f64 },

    #[error("no sign change found while bracketing: {0}")]
    Bracketing(String),

    #[error("skew-normal match has no solution: g({lo}) sign {sign_lo}, g({hi}) sign {sign_hi}")]
    NoSolution {
        lo: f64,
        hi: f64,
        sign_lo: f64,
        sign_hi: f64,
    },

    #[error("skew-normal match infeasible: scale matrix not positive definite at kappa = {kappa}")]
    InfeasibleMatch { kappa: f64 },

    #[error("linear algebra: {0}")]
    LinearAlgebra(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("missing capability: {0}")]
    Capability(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl BdmError {
    /// Configuration and input problems (exit code 2) versus numerical
    /// failures (exit code 3).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            BdmError::Evaluation { .. }
                | BdmError::Convergence { .. }
                | BdmError::Accuracy { .. }
                | BdmError::Bracketing(_)
                | BdmError::NoSolution { .. }
                | BdmError::InfeasibleMatch { .. }
                | BdmError::LinearAlgebra(_)
        )
    }

    /// Short machine-readable tag used on the CLI error stream.
    pub fn kind(&self) -> &'static str {
        match self {
            BdmError::Domain(_) => "domain",
            BdmError::Dimension { .. } => "dimension",
            BdmError::Evaluation { .. } => "evaluation",
            BdmError::Convergence { .. } => "convergence",
            BdmError::Accuracy { .. } => "accuracy",
            BdmError::Bracketing(_) => "bracketing",
            BdmError::NoSolution { .. } => "no-solution",
            BdmError::InfeasibleMatch { .. } => "infeasible-match",
            BdmError::LinearAlgebra(_) => "linear-algebra",
            BdmError::Unsupported(_) => "unsupported",
            BdmError::Capability(_) => "capability",
            BdmError::Schema(_) => "schema",
            BdmError::Parse { .. } => "parse",
            BdmError::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for BdmError {
    fn from(e: std::io::Error) -> Self {
        BdmError::Io(e.to_string())
    }
}

pub type Result<T, E = BdmError> = std::result::Result<T, E>;
