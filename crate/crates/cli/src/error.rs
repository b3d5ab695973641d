use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] difrecon_core::Error),

    /// Some shapes failed; their results are listed in `failures.json`.
    #[error("{failed} of {total} shapes failed (see {manifest})")]
    Partial {
        failed: usize,
        total: usize,
        numeric: bool,
        manifest: String,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Core(_) => EXIT_DATA,
            CliError::Partial { numeric: true, .. } => EXIT_NUMERIC,
            CliError::Partial { .. } => EXIT_DATA,
        }
    }
}
