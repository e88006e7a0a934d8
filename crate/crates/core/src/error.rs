use thiserror::Error;

use crate::adp::RankReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("gain is not mean-square stabilizing: {0}")]
    NonStabilizingGain(String),

    #[error("R + H is not positive definite: {0}")]
    IndefiniteCurvature(String),

    #[error(
        "data matrices fail the rank condition (rank {} of required {})",
        .0.rank,
        .0.required
    )]
    RankDeficient(Box<RankReport>),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("state blow-up on path {path} at t = {time}")]
    Instability { path: usize, time: f64 },

    #[error("moment integration lost accuracy at t = {time}: {detail}; try a smaller step")]
    IntegrationAccuracy { time: f64, detail: String },

    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::InvalidValue(_)
            | Error::Config(_)
            | Error::Parse(_)
            | Error::Io(_) => 1,
            Error::RankDeficient(_) => 2,
            Error::Instability { .. } => 4,
            Error::NonStabilizingGain(_)
            | Error::IndefiniteCurvature(_)
            | Error::Numerical(_)
            | Error::IntegrationAccuracy { .. } => 5,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
