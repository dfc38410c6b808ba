use std::fmt;

/// Failure classes of a CLI run. Everything detected before work starts
/// (bad flags, config, inputs) exits with 1; failures while running exit 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Usage(String),
    Config(String),
    Input(String),
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Input(_) => "input",
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 2,
            _ => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m)
            | CliError::Config(m)
            | CliError::Input(m)
            | CliError::Validation(m)
            | CliError::Runtime(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    /// Always a single line: `error[<kind>]: <message>`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat: Vec<&str> = self.message().split_whitespace().collect();
        write!(f, "error[{}]: {}", self.kind(), flat.join(" "))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches a path to a reader error and classifies it as an input problem.
pub fn input_err(path: &std::path::Path, e: impl fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

pub fn runtime_err(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}
