use std::fmt;

/// Failure classified by exit code: 1 for bad input, 2 for runtime failures.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "failed: {m}"),
        }
    }
}

impl From<transfusion::Error> for CliError {
    fn from(e: transfusion::Error) -> Self {
        use transfusion::Error as E;
        match e {
            E::Validation { .. } | E::Shape(_) | E::Config(_) | E::Incompatible { .. } => CliError::Validation(e.to_string()),
            E::Diverged { .. } | E::Io { .. } | E::Format(_) => CliError::Runtime(e.to_string()),
        }
    }
}
