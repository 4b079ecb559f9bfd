use thiserror::Error;

pub type Result<T, E = MftError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MftError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("grouped convolution: {0}")]
    GroupedConv(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("gradient verifier: {0}")]
    Verifier(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("coordinate ({row}, {col}) outside {rows}x{cols} raster")]
    Bounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("split error: {0}")]
    Split(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("scene generator: {0}")]
    Generator(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("payload length mismatch for {file}: expected {expected} bytes, found {actual}")]
    Length {
        file: String,
        expected: usize,
        actual: usize,
    },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("empty evaluation: no samples were accumulated")]
    EmptyEvaluation,

    #[error("class {class} is beyond the {size}-entry palette")]
    Palette { class: usize, size: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MftError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        MftError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        MftError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
