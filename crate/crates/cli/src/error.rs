use std::fmt;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

/// A failed command and the process exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn diverged(message: impl Into<String>) -> Self {
        Self { code: EXIT_DIVERGED, message: message.into() }
    }

    pub fn checkpoint(message: impl Into<String>) -> Self {
        Self { code: EXIT_CHECKPOINT, message: message.into() }
    }

    pub fn verification(message: impl Into<String>) -> Self {
        Self { code: EXIT_VERIFY, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<rediffuse_core::Error> for CliError {
    fn from(e: rediffuse_core::Error) -> Self {
        use rediffuse_core::Error;
        match e {
            Error::Checkpoint(_) => Self::checkpoint(e.to_string()),
            Error::NonFinite(_) => Self::diverged(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

/// Tags an error with the path it concerns.
pub(crate) fn at(path: &std::path::Path) -> impl Fn(rediffuse_core::Error) -> CliError + '_ {
    move |e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    }
}
