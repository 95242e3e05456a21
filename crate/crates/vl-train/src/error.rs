use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at {batch_id}")]
    NonFiniteLoss { batch_id: String },

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] vl_core::CoreError),

    #[error(transparent)]
    Data(#[from] vl_data::DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;
