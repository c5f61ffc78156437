use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("initialization error: {0}")]
    Init(String),
    #[error("element {index} is {value}, expected exactly -1 or +1")]
    NotBinary { index: usize, value: f64 },
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("cannot export layer `{layer}`: {reason}")]
    Export { layer: String, reason: String },
    #[error("dataset pairing error: {images} images but {labels} labels")]
    Pairing { images: usize, labels: usize },
    #[error("nothing to report: no completed runs")]
    EmptyReport,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
