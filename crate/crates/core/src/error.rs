use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data failed validation. Carries every violation found, not just the first.
    #[error("validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    /// The likelihood of a case is exactly zero under the current parameters.
    #[error("degenerate likelihood for case `{case_id}` at t = {t}")]
    DegenerateLikelihood { case_id: String, t: i64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("alpha grid is empty")]
    EmptyGrid,

    #[error("cohort contains no transition periods; cannot build an alpha grid")]
    NoTransitions,

    #[error("instance too large for path enumeration: {n_paths:.0} paths exceeds {max:.0}")]
    TooLarge { n_paths: f64, max: f64 },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for input/validation problems,
    /// 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DegenerateLikelihood { .. } | Error::TooLarge { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
