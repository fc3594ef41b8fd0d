use std::path::PathBuf;

use eflsim_core::EflError;

use crate::channel::ChannelError;

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {reason}", path.display())]
    Csv { path: PathBuf, line: u64, reason: String },

    #[error("malformed trace: {0}")]
    Trace(String),

    #[error(transparent)]
    Channel(#[from] ChannelError),

    #[error(transparent)]
    Core(#[from] EflError),
}

impl SimError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io { path: path.into(), source }
    }

    /// 2 for bad input (config, data files, partition specs, traces),
    /// 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Config(_) | SimError::Csv { .. } | SimError::Trace(_) => 2,
            SimError::Core(e) => match root(e) {
                EflError::InvalidConfig(_) | EflError::InfeasiblePartition { .. } | EflError::EmptyNode { .. } => 2,
                _ => 3,
            },
            SimError::Io { .. } | SimError::Channel(_) => 3,
        }
    }
}

fn root(e: &EflError) -> &EflError {
    match e {
        EflError::Node { source, .. } | EflError::Model { source, .. } => root(source),
        other => other,
    }
}
