//! Command-line pipeline: phantom datasets, two-stage training, inference and
//! evaluation, all driven by one JSON run configuration.

pub mod commands;
pub mod config;
pub mod dataset;

pub use config::{RunConfig, SplitCounts};
pub use dataset::Manifest;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "MIRRORSEG_THREADS";

/// Failure with a stable category, printed as `error[<category>]: <message>`.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Training(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Data(_) => "data",
            CliError::Training(_) => "training",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Data(_) => 5,
            CliError::Training(_) => 6,
        }
    }

    /// One line, no embedded newlines.
    pub fn line(&self) -> String {
        format!("error[{}]: {}", self.category(), self.to_string().replace(['\n', '\r'], " "))
    }
}

impl From<mirrorseg::Error> for CliError {
    fn from(e: mirrorseg::Error) -> Self {
        use mirrorseg::Error as E;
        let msg = e.to_string();
        match e {
            E::Io { .. } => CliError::Io(msg),
            E::Config(_) | E::EpochRange { .. } => CliError::Config(msg),
            E::NoLesionPatches | E::NonFiniteValue(_) | E::NonFiniteLoss { .. } | E::Stage(_) => {
                CliError::Training(msg)
            }
            _ => CliError::Data(msg),
        }
    }
}

/// Sizes the global worker pool from [`THREADS_ENV`] when set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}
