use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("record {id}: field {field}: {msg}")]
    Schema {
        id: String,
        field: &'static str,
        msg: String,
    },

    #[error("duplicate record id {0}")]
    DuplicateId(String),

    #[error("manifest header: {0}")]
    Header(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Core(#[from] vl_core::CoreError),
}

pub type Result<T> = std::result::Result<T, DataError>;
