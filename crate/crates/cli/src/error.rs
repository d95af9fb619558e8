use std::fmt;
use std::path::Path;

/// Everything a command can fail with.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ablb_core::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: byte {offset}: {message}")]
    Checkpoint { path: String, offset: usize, message: String },
    #[error("{0}")]
    Config(String),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            AppError::Usage(_) => "usage",
            AppError::Core(e) => e.code(),
            AppError::Io { .. } => "io",
            AppError::Parse { .. } => "parse",
            AppError::Checkpoint { .. } => "checkpoint",
            AppError::Config(_) => "config",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// `error[<code>]: <message>` on one line.
    pub fn line(&self) -> ErrorLine<'_> {
        ErrorLine(self)
    }
}

pub struct ErrorLine<'a>(&'a AppError);

impl fmt::Display for ErrorLine<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.0.to_string();
        let msg: Vec<&str> = msg.split_whitespace().collect();
        write!(f, "error[{}]: {}", self.0.code(), msg.join(" "))
    }
}
