use thiserror::Error;

/// CLI failure classes with fixed exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(String),
    #[error("config: {0}")]
    Config(String),
    #[error("runtime: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Config(_) => 4,
            CliError::Runtime(_) => 5,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<maemi_core::Error> for CliError {
    fn from(e: maemi_core::Error) -> Self {
        match e {
            maemi_core::Error::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<maemi_datagen::Error> for CliError {
    fn from(e: maemi_datagen::Error) -> Self {
        match e {
            maemi_datagen::Error::Io(io) => CliError::Io(io.to_string()),
            maemi_datagen::Error::BadFractions(msg) => CliError::Config(msg),
            maemi_datagen::Error::MissingApiKey(var) => {
                CliError::Config(format!("api key environment variable {var} is not set"))
            }
            maemi_datagen::Error::Core(core) => core.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
