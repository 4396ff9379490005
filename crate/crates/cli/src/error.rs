use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Model(#[from] shapelift::Error),

    #[error(transparent)]
    Net(#[from] shapelift_nn::Error),

    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("config error in {path}: {source}")]
    Config { path: String, source: serde_json::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VALIDATION: i32 = 2;
    pub const IO: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Short class name printed in front of the message.
    pub fn class(&self) -> &'static str {
        match self.exit_code() {
            exit::VALIDATION => "validation",
            exit::IO => "io",
            _ => "numerical",
        }
    }

    pub fn exit_code(&self) -> i32 {
        use shapelift::Error as M;
        use shapelift_nn::Error as N;
        let model = |e: &M| match e {
            M::InvalidArgument(_) | M::DimensionMismatch { .. } => exit::VALIDATION,
            M::Io(_) | M::Json(_) | M::Format(_) | M::EndOfData(_) => exit::IO,
            M::Degenerate(_) | M::NonFinite(_) => exit::NUMERICAL,
        };
        match self {
            Error::Validation(_) | Error::Config { .. } => exit::VALIDATION,
            Error::Io { .. } => exit::IO,
            Error::Model(e) => model(e),
            Error::Net(N::Model(e)) => model(e),
            Error::Net(N::Shape(_) | N::InvalidArgument(_)) => exit::VALIDATION,
            Error::Net(N::Checkpoint(_) | N::Io(_) | N::Json(_)) => exit::IO,
        }
    }
}
