use thiserror::Error;

/// Crate-wide error type. Variants are grouped roughly by the layer that
/// raises them; everything is boxed into one enum so pipeline code can use a
/// single `Result` alias.
#[derive(Debug, Error)]
pub enum Error {
    // ── tensors / kernels / tape ────────────────────────────────────────
    #[error("shape mismatch: {context} (got {got:?}, expected {expected:?})")]
    ShapeMismatch {
        context: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("softmax row {row} is fully masked; no finite logit to normalize")]
    AllMaskedRow { row: usize },
    #[error("tape node {0} does not exist")]
    UnknownNode(usize),
    #[error("cannot L1-normalize a vector with zero mass")]
    ZeroMass,
    #[error("degenerate input: {0}")]
    DegenerateData(String),

    // ── scene documents ─────────────────────────────────────────────────
    #[error("scene schema error: {0}")]
    SchemaError(String),
    #[error("scene validation failed at {path}: {message}")]
    ValidationError { path: String, message: String },
    #[error("box {box_:?} rasterizes to zero pixels at {height}x{width}")]
    EmptyBox {
        box_: [f64; 4],
        height: usize,
        width: usize,
    },

    // ── masks ───────────────────────────────────────────────────────────
    #[error("token {token} carries conflicting roles: {roles}")]
    RoleConflict { token: usize, roles: String },

    // ── denoiser / training ─────────────────────────────────────────────
    #[error("training loss diverged (non-finite) at step {step}")]
    DivergedLoss { step: usize },

    // ── guidance ────────────────────────────────────────────────────────
    #[error("subject {0} has an empty context set; nothing to guide")]
    EmptySubject(usize),
    #[error("guidance gradient is non-finite at step {step}, iteration {iteration}")]
    NonFiniteGradient { step: usize, iteration: usize },

    // ── refinement ──────────────────────────────────────────────────────
    #[error("no attention records available for {0}")]
    NoRecords(String),

    // ── harness ─────────────────────────────────────────────────────────
    #[error("subject {subject} references color {color:?} absent from the palette")]
    UnknownColor { subject: usize, color: String },

    // ── io ──────────────────────────────────────────────────────────────
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed tensor dump: {0}")]
    BadDump(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn shape(context: impl Into<String>, got: &[usize], expected: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            got: got.to_vec(),
            expected: expected.to_vec(),
        }
    }
}
