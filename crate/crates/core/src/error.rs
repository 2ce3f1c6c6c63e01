use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// The variants map onto the CLI exit-code contract: `Config` and `Usage`
/// are caller mistakes, `Format` is malformed external input, `Numeric` and
/// `Divergence` are runtime numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric guard: {0}")]
    Numeric(String),
    #[error("loss became non-finite ({loss}) at iteration {iteration}")]
    Divergence { iteration: u64, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn usage_err(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

pub(crate) fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}
