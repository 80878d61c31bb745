use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Numeric(_) => "numeric",
        }
    }

    /// One line, `error kind=<kind> code=<n> msg=<json string>`.
    pub fn machine_line(&self) -> String {
        let msg = match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Numeric(m) => m,
        };
        let quoted = serde_json::to_string(msg).unwrap_or_else(|_| "\"?\"".into());
        format!("error kind={} code={} msg={quoted}", self.kind(), self.exit_code())
    }
}

impl From<pvic::Error> for CliError {
    fn from(e: pvic::Error) -> Self {
        use pvic::Error as E;
        match e {
            E::Io(_) | E::Format { .. } | E::Json(_) => CliError::Io(e.to_string()),
            E::NonFinite(_) | E::Diverged(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
