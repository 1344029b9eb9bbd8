use std::fmt;

/// CLI failure with a stable machine-readable kind.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    SelfCheck(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Contract(_) => "contract",
            CliError::Io(_) => "io",
            CliError::SelfCheck(_) => "self-check",
        }
    }

    /// 1 for configuration and contract errors, 2 for I/O, 3 for a failed
    /// self-check.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Contract(_) => 1,
            CliError::Io(_) => 2,
            CliError::SelfCheck(_) => 3,
        }
    }

    /// Single line: `error[kind]: message`.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {msg}", self.kind())
    }

    pub fn with_context(self, ctx: impl fmt::Display) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{ctx}: {m}")),
            CliError::Contract(m) => CliError::Contract(format!("{ctx}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{ctx}: {m}")),
            CliError::SelfCheck(m) => CliError::SelfCheck(format!("{ctx}: {m}")),
        }
    }
}

impl From<mvreid::Error> for CliError {
    fn from(e: mvreid::Error) -> Self {
        use mvreid::Error as E;
        match e {
            E::Config(_) => CliError::Config(e.to_string()),
            E::Contract(_) | E::Dimension { .. } => CliError::Contract(e.to_string()),
            E::Io(_) | E::Format(_) | E::Version { .. } => CliError::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(format!("json: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches a path or step to errors from the core library.
pub trait Context<T> {
    fn context(self, ctx: impl fmt::Display) -> CliResult<T>;
}

impl<T, E: Into<CliError>> Context<T> for Result<T, E> {
    fn context(self, ctx: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| e.into().with_context(ctx))
    }
}
