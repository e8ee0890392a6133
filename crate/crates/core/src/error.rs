use thiserror::Error;

/// Errors raised across the imitation, improvement and harness layers.
#[derive(Debug, Error)]
pub enum LampoError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("context outside model support (max component log-density {max_log_density:.1})")]
    OutOfSupport { max_log_density: f64 },

    #[error("ill-conditioned matrix in {0}")]
    Conditioning(&'static str),

    #[error("unreachable point ({x:.4}, {y:.4})")]
    Unreachable { x: f64, y: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LampoError>;

impl LampoError {
    /// Short stable identifier for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Domain(_) => "domain",
            Self::InvalidTrajectory(_) => "invalid_trajectory",
            Self::Config(_) => "config",
            Self::Dimension { .. } => "dimension",
            Self::NonFinite(_) => "non_finite",
            Self::InsufficientData(_) => "insufficient_data",
            Self::OutOfSupport { .. } => "out_of_support",
            Self::Conditioning(_) => "conditioning",
            Self::Unreachable { .. } => "unreachable",
            Self::Format(_) => "format",
            Self::Io(_) => "io",
            Self::Json(_) => "json",
            Self::Csv(_) => "csv",
        }
    }
}
