use coperc_core::CoreError;
use coperc_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Bad configuration, incompatible or missing inputs: exit code 2.
    #[error("{0}")]
    Validation(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) | HarnessError::Core(CoreError::Config(_)) => 2,
            _ => 1,
        }
    }
}
