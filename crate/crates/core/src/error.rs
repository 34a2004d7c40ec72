use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum TrcError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("infeasible mass at step {step}: m = {mass:.3} kg < m_dry = {m_dry:.3} kg")]
    InfeasibleMass { step: usize, mass: f64, m_dry: f64 },

    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrcError>;
