use std::path::PathBuf;

/// Failures of the experiment driver, grouped by process exit code.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    /// 2 for configuration, 3 for data and files, 4 for non-finite values.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) | Self::Io { .. } => 3,
            Self::Numerical(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}

impl From<mta_core::Error> for HarnessError {
    fn from(e: mta_core::Error) -> Self {
        use mta_core::Error as E;
        match e {
            E::NonFinite { .. } => Self::Numerical(e.to_string()),
            E::InvalidArgument(_) | E::InfeasibleConfig(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}
