use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not an NPY v1.0 file (magic mismatch)")]
    MagicMismatch,
    #[error("unsupported NPY layout: {0}")]
    UnsupportedDtype(String),
    #[error("malformed NPY header: {0}")]
    HeaderParse(String),
    #[error("truncated data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing bundle component: {0}")]
    MissingFile(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("value out of range: {0}")]
    RangeError(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("position ({u}, {v}) outside {h}x{w} grid")]
    OutOfRangePosition { u: usize, v: usize, h: usize, w: usize },
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("receptive field of ({u}, {v}) lies entirely in padding")]
    FieldOutsideImage { u: usize, v: usize },

    #[error("row {0} is the zero vector")]
    ZeroVector(usize),
    #[error("class {0} has no images")]
    EmptyClass(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("bundle has no usable images")]
    EmptyBundle,
    #[error("original accuracy {a_orig} does not exceed chance level {chance}")]
    DegenerateOriginal { a_orig: f64, chance: f64 },

    #[error("{m} concepts exceed the exact Shapley limit of {limit}")]
    TooManyConcepts { m: usize, limit: usize },

    #[error("relevance weights are not finite")]
    DegenerateWeights,
    #[error("{which} embedding row {row} has zero norm")]
    ZeroNormEmbedding { which: &'static str, row: usize },
    #[error("k = {k} outside 1..={s}")]
    KOutOfRange { k: usize, s: usize },

    #[error("configuration error: {0}")]
    Config(String),
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Strips any stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for errors caused by bad inputs (bundle contents, manifests,
    /// configuration) as opposed to failures while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self.root(),
            Error::MagicMismatch
                | Error::UnsupportedDtype(_)
                | Error::HeaderParse(_)
                | Error::TruncatedData { .. }
                | Error::MissingFile(_)
                | Error::ShapeMismatch(_)
                | Error::RangeError(_)
                | Error::NonFiniteValue(_)
                | Error::Manifest(_)
                | Error::InvalidArch(_)
                | Error::Config(_)
                | Error::Json { .. }
                | Error::EmptyClass(_)
                | Error::DegenerateOriginal { .. }
        )
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| Error::Stage {
            stage,
            source: Box::new(source),
        })
    }
}
