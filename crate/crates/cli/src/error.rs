use std::fmt;

use repgan::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Divergence,
    Io,
    Checkpoint,
    Verification,
}

impl Kind {
    pub fn tag(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Data => "data",
            Kind::Divergence => "divergence",
            Kind::Io => "io",
            Kind::Checkpoint => "checkpoint",
            Kind::Verification => "verification",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Divergence => 4,
            Kind::Io | Kind::Checkpoint => 5,
            Kind::Verification => 1,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Kind::Config, message)
    }

    pub fn checkpoint(message: impl Into<String>) -> Self {
        Self::new(Kind::Checkpoint, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    /// One-line JSON for stderr.
    pub fn json_line(&self) -> String {
        serde_json::json!({
            "error": self.kind.tag(),
            "exit_code": self.exit_code(),
            "message": self.message,
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind.tag(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Config(_) | Error::Shape(_) | Error::Domain(_) | Error::Support(_) => Kind::Config,
            Error::Idx(_) | Error::HashMismatch { .. } | Error::Data(_) | Error::Network { .. } => Kind::Data,
            Error::Divergence { .. } => Kind::Divergence,
            Error::Io(_) => Kind::Io,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(Kind::Io, e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::new(Kind::Io, e.to_string())
    }
}
