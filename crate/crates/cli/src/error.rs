use serde_json::{json, Value};

/// Failures reported in `error.json`; the exit code identifies the kind.
#[derive(Debug)]
pub enum CliError {
    ConfigInvalid(String),
    NotConverged(String),
    Solver(String),
    Io(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::ConfigInvalid(_) => "ConfigInvalid",
            CliError::NotConverged(_) => "NotConverged",
            CliError::Solver(_) => "SolverError",
            CliError::Io(_) => "IoError",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::ConfigInvalid(m) | CliError::NotConverged(m) | CliError::Solver(m) | CliError::Io(m) => m,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigInvalid(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Solver(_) => 4,
            CliError::Io(_) => 5,
        }
    }

    pub fn to_json(&self) -> Value {
        json!({"error": self.kind(), "message": self.message()})
    }
}

impl From<sbcascade::Error> for CliError {
    fn from(e: sbcascade::Error) -> Self {
        use sbcascade::Error as E;
        let msg = e.to_string();
        match e {
            E::NotConverged { .. } | E::PrefixNotConverged { .. } => CliError::NotConverged(msg),
            E::InvalidAxis(_)
            | E::InvalidStructure(_)
            | E::InvalidMeasure(_)
            | E::InvalidKernel(_)
            | E::InvalidOption(_)
            | E::NonpositiveTime(_)
            | E::TimeOutOfRange(_)
            | E::GridMismatch(_)
            | E::DependenceViolation { .. }
            | E::ZeroMass => CliError::ConfigInvalid(msg),
            E::Io(_) => CliError::Io(msg),
            _ => CliError::Solver(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
