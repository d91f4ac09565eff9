use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Validation { field: &'static str, reason: String },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("step index {t} outside [1, {max}]")]
    StepOutOfRange { t: usize, max: usize },
    #[error("numeric failure in {location}: {reason}")]
    Numeric { location: String, reason: String },
    #[error("duplicate record for class {class} image {image_id}")]
    Conflict { class: usize, image_id: String },
    #[error("class {0} has no stored descriptions")]
    EmptyClass(usize),
    #[error("unsupported in {mode} mode: {what}")]
    UnsupportedMode { mode: &'static str, what: &'static str },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unknown extractor {id:?}; registered: {registered}")]
    UnknownExtractor { id: String, registered: String },
}

impl Error {
    pub fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation { field, reason: reason.into() }
    }

    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape { expected: expected.into(), got: got.into() }
    }
}
