use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Schema(String),

    #[error(transparent)]
    Core(#[from] tabf::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("artifacts are not comparable: {0}")]
    Incomparable(String),

    #[error("{0}")]
    Other(String),
}

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const SCHEMA: i32 = 2;
    pub const NONCONVERGENCE: i32 = 3;
    pub const BLOW_UP: i32 = 4;
    pub const IO: i32 = 5;
    pub const INCOMPARABLE: i32 = 6;
}

#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub exit_code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        use tabf::Error as E;
        match self {
            Self::Schema(_) => "schema",
            Self::Io { .. } | Self::Core(E::Io(_)) => "io",
            Self::Incomparable(_) => "incomparable",
            Self::Other(_) => "other",
            Self::Core(e) => match e {
                E::NonConvergence { .. } => "nonconvergence",
                E::Stability { .. } | E::DisplacementCap { .. } | E::NonFinite(_) | E::NonFiniteSample { .. } => {
                    "blow_up"
                }
                _ => "other",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "schema" => exit::SCHEMA,
            "nonconvergence" => exit::NONCONVERGENCE,
            "blow_up" => exit::BLOW_UP,
            "io" => exit::IO,
            "incomparable" => exit::INCOMPARABLE,
            _ => exit::OTHER,
        }
    }

    pub fn record(&self) -> ErrorRecord {
        ErrorRecord {
            exit_code: self.exit_code(),
            kind: self.kind(),
            message: self.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Core(tabf::Error::from(e))
    }
}
