//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by segmentation, scoring backends, attribution, search,
/// and the evaluation harness.
#[derive(Debug, Error)]
pub enum Error {
    /// The raw document is empty or all whitespace.
    #[error("document is empty or all whitespace")]
    EmptyDocument,

    /// The document has too few words for the requested injection.
    #[error("document too short: {0}")]
    DocumentTooShort(String),

    /// No scoring or generation backend is configured for the operation.
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    /// The backend cannot return per-token log-probabilities.
    #[error("output not scoreable: {0}")]
    OutputNotScoreable(String),

    /// Non-success HTTP status from the inference server.
    #[error("http error: status {status}: {body}")]
    HttpError { status: u16, body: String },

    /// The server response does not follow the expected wire format.
    #[error("protocol error: {0}")]
    ProtocolError(String),

    /// The request exceeded the configured timeout (after retries).
    #[error("request timed out: {0}")]
    Timeout(String),

    /// Exact Shapley enumeration guard tripped.
    #[error("too many units for exact enumeration: {got} > {limit}")]
    TooManyUnits { got: usize, limit: usize },

    /// Every sampled mask is identical; the surrogate regression is singular.
    #[error("degenerate design: all sampled masks are identical")]
    DegenerateDesign,

    /// Invalid trace or harness configuration.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A metric denominator set is empty.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// The model's citation response contains no parseable indices.
    #[error("unparseable citation response: {0:?}")]
    UnparseableCitation(String),

    /// The corpus file contains no cases.
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    /// Malformed corpus or report data.
    #[error("malformed record at line {line}: {source}")]
    MalformedRecord {
        line: usize,
        source: serde_json::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
