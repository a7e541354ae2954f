use thiserror::Error;

#[derive(Error, Debug)]
pub enum OpeselError {
    #[error("policy evaluation infeasible: {0}")]
    EvaluationInfeasible(String),
    #[error("value iteration did not converge after {iterations} iterations (residual {residual})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("importance sampling estimate undefined: all cumulative ratios are zero")]
    UndefinedEstimate,
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OpeselError>;
