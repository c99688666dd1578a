//! Pipeline errors and their exit codes.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Bad configuration or plan; exit 2.
    Config(String),
    /// An upstream stage has not produced its artifacts; exit 3.
    Prerequisite { stage: String, detail: String },
    /// Anything that went wrong while doing the work; exit 4.
    Runtime(String),
}

impl CliError {
    pub fn prerequisite(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        CliError::Prerequisite { stage: stage.into(), detail: detail.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Prerequisite { .. } => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Prerequisite { .. } => "prerequisite",
            CliError::Runtime(_) => "runtime",
        }
    }

    /// One JSON object on one line, e.g.
    /// `{"error":"prerequisite","exit":3,"requires":"preprocess","message":"..."}`.
    pub fn machine_line(&self) -> String {
        let mut obj = serde_json::json!({ "error": self.code(), "exit": self.exit_code(), "message": self.to_string() });
        if let CliError::Prerequisite { stage, .. } = self {
            obj["requires"] = stage.clone().into();
        }
        obj.to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Prerequisite { stage, detail } => write!(f, "missing prerequisite: run `{stage}` first ({detail})"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dermres_core::Error> for CliError {
    fn from(e: dermres_core::Error) -> Self {
        match e {
            dermres_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<dermres_nn::Error> for CliError {
    fn from(e: dermres_nn::Error) -> Self {
        match e {
            dermres_nn::Error::Core(c) => c.into(),
            dermres_nn::Error::Prerequisite { stage, detail } => CliError::prerequisite(stage, detail),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
