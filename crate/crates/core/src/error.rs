use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate box [{x1}, {y1}, {x2}, {y2}]")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("manifest parse error in {path}: {source}")]
    ManifestParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid manifest record: {0}")]
    ManifestValidation(String),

    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("split protocol requires an even category count, got {0}")]
    OddCategoryCount(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scene too crowded: could not place objects for image {image_index} after {retries} retries")]
    SceneTooCrowded { image_index: usize, retries: usize },

    #[error("label {label} out of range for {what} with {classes} classes")]
    LabelOutOfRange {
        what: &'static str,
        label: usize,
        classes: usize,
    },

    #[error("variant {variant} requires predicted categories for the attribute path")]
    MissingCategories { variant: String },

    #[error("unknown variant {name:?}; valid names: {valid}")]
    UnknownVariant { name: String, valid: String },

    #[error("operation not supported for variant {variant}: {reason}")]
    WrongVariant { variant: String, reason: String },

    #[error("non-finite loss at step {step} in component {component}")]
    NonFiniteLoss { step: usize, component: String },

    #[error("attribute head {0} is disabled")]
    AttributeDisabled(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
