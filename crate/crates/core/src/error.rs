use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("length error: {section} overflows max_seq_len ({len} > {max})")]
    Length {
        section: &'static str,
        len: usize,
        max: usize,
    },
    #[error("probing error: {0}")]
    Probing(String),
    #[error("singular design matrix")]
    SingularDesign,
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),
}

impl Error {
    /// Short machine-readable code, used by the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Template(_) => "template",
            Error::Generation(_) => "generation",
            Error::Length { .. } => "length",
            Error::Probing(_) => "probing",
            Error::SingularDesign => "singular",
            Error::UndefinedCorrelation(_) => "correlation",
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! input_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Input(alloc::format!($($arg)*))
    };
}
pub(crate) use input_err;
