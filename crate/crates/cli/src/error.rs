use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    UnknownCommand(String),

    #[error("bad config: {0}")]
    Config(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("{0}")]
    Core(streamdec::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::UnknownCommand(_) => 2,
            CliError::Usage(_) => 3,
            CliError::Config(_) => 4,
            CliError::MissingInput(_) => 5,
            CliError::Core(_) | CliError::Io { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

impl From<streamdec::Error> for CliError {
    fn from(e: streamdec::Error) -> Self {
        use streamdec::Error as E;
        match e {
            E::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => CliError::MissingInput(path),
            E::Config(msg) | E::InvalidVocab(msg) => CliError::Config(msg),
            other => CliError::Core(other),
        }
    }
}
