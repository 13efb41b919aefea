use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAIN: i32 = 3;
pub const EXIT_EVAL: i32 = 4;

/// A failure carrying the process exit code it maps to.
#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: msg.into() }
    }

    pub fn train(e: gcrb::Error) -> Self {
        Self { code: EXIT_TRAIN, message: format!("training failed: {e}") }
    }

    pub fn eval(msg: impl Into<String>) -> Self {
        Self { code: EXIT_EVAL, message: msg.into() }
    }

    pub fn io(e: impl std::fmt::Display) -> Self {
        Self { code: 1, message: format!("i/o error: {e}") }
    }
}

/// Library errors surfacing while a config is turned into objects are
/// configuration problems.
impl From<gcrb::Error> for CliError {
    fn from(e: gcrb::Error) -> Self {
        CliError::config(e.to_string())
    }
}
