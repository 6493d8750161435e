use node_core::NodeError;

#[derive(Debug)]
pub enum CliError {
    Core(NodeError),
    Usage(String),
    ConfigMismatch { model: String, config: String },
    Io(std::io::Error),
    Json(serde_json::Error),
    Csv(csv::Error),
}

impl From<NodeError> for CliError {
    fn from(e: NodeError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Json(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Csv(e)
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::ConfigMismatch { .. } => "config_mismatch",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
            CliError::Csv(_) => "csv",
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Core(e) => e.to_string(),
            CliError::Usage(m) => m.trim_end().to_string(),
            CliError::ConfigMismatch { model, config } => {
                format!("model was trained with config digest {model}, the given config hashes to {config}")
            }
            CliError::Io(e) => e.to_string(),
            CliError::Json(e) => e.to_string(),
            CliError::Csv(e) => e.to_string(),
        }
    }

    /// Single-line JSON error record.
    pub fn record(&self) -> String {
        let mut rec = serde_json::json!({ "error": self.kind(), "message": self.message() });
        if let CliError::Core(NodeError::Config(errs)) = self {
            rec["errors"] = serde_json::json!(errs);
        }
        rec.to_string()
    }
}
