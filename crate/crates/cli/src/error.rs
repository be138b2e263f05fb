use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("check failed: {0}")]
    Check(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Check(_) | CliError::Io(_) => 1,
            CliError::MissingData(_) => 2,
            CliError::Config(_) => 3,
            CliError::Numerical(_) => 4,
        })
    }
}

/// Maps a library error raised while training or evaluating.
pub fn from_core(e: idkm::Error) -> CliError {
    use idkm::Error as E;
    let msg = e.to_string();
    let mut inner = &e;
    while let E::Layer { source, .. } = inner {
        inner = source;
    }
    match inner {
        E::Numerics(_) | E::AdjointDivergence { .. } => CliError::Numerical(msg),
        E::Param(_) | E::Shape(_) | E::Partition(_) => CliError::Config(msg),
        E::Format { .. } => CliError::MissingData(msg),
        E::Io(_) | E::Layer { .. } => match e {
            E::Io(io) => CliError::Io(io),
            _ => CliError::Check(msg),
        },
    }
}
