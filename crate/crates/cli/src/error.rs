use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad config file, flag value or missing required input.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Module(#[from] gda_core::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Module(_) => 1,
        }
    }

    /// One-line JSON error record for stderr.
    pub fn to_json(&self, command: &str) -> String {
        let kind = match self {
            CliError::Config(_) => "config",
            CliError::Module(_) => "module",
        };
        json!({ "command": command, "status": "error", "kind": kind, "message": self.to_string() }).to_string()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Module(gda_core::Error::invalid(format!("I/O: {e}")))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Module(e.into())
    }
}
