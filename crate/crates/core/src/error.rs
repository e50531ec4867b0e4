use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // dataset pipeline
    #[error("dataset source missing or empty: {0}")]
    MissingSource(PathBuf),
    #[error("cannot decode image {0}")]
    UndecodableImage(PathBuf),
    #[error("label count {labels} does not match image count {images}")]
    LabelMismatch { images: usize, labels: usize },
    #[error("class {class}: requested {requested} samples but only {available} available")]
    TargetExceedsAvailable {
        class: usize,
        requested: usize,
        available: usize,
    },
    #[error("image batch is already scaled to [-1, 1]")]
    AlreadyScaled,

    // networks
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for {num_classes} classes")]
    OutOfRangeLabel { label: i64, num_classes: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("shape mismatch at layer {0}")]
    ShapeMismatch(String),
    #[error("incompatible checkpoint: {0}")]
    CheckpointIncompatible(String),

    // training
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("covariance of class {0} is not positive definite after regularization")]
    NotPsd(usize),
    #[error("non-finite input to loss")]
    NonFiniteInput,
    #[error("non-finite gradient in penalty term")]
    NonFiniteGradient,
    #[error("wrong-label term needs at least two classes")]
    ClassCountOne,
    #[error("no space left on device")]
    DiskFull,

    // evaluation
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("matrix square root has an imaginary residual of {0:e}")]
    ComplexResidual(f64),
    #[error("validation set has no samples of class {0}")]
    EmptyClassInValidation(usize),
    #[error("no real example for class {0}")]
    MissingRealExample(usize),
    #[error("silhouette needs at least two classes")]
    SingleClass,
    #[error("feature extractor unavailable: {0}")]
    ExtractorUnavailable(String),

    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(io::Error),
    #[error(transparent)]
    Torch(#[from] tch::TchError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("tensor container: {0}")]
    Container(String),
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        if err.kind() == io::ErrorKind::StorageFull {
            Error::DiskFull
        } else {
            Error::Io(err)
        }
    }
}

impl From<safetensors::SafeTensorError> for Error {
    fn from(err: safetensors::SafeTensorError) -> Self {
        Error::Container(err.to_string())
    }
}
