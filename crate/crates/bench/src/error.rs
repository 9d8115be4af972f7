use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] ssam_core::Error),
    /// The generated set is too hard for the frozen encoder even unshifted.
    #[error("generation quality: {0}")]
    Quality(String),
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
    #[error("report output: {0}")]
    Output(String),
}

impl BenchError {
    /// 0 success, 1 config/format, 2 numeric, 3 gradient check.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(e) => e.exit_code(),
            Self::Gradcheck(_) => 3,
            Self::Quality(_) | Self::Output(_) => 1,
        }
    }
}

impl From<std::io::Error> for BenchError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

impl From<csv::Error> for BenchError {
    fn from(e: csv::Error) -> Self {
        Self::Output(e.to_string())
    }
}

impl From<serde_json::Error> for BenchError {
    fn from(e: serde_json::Error) -> Self {
        Self::Core(ssam_core::Error::Config(e.to_string()))
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
