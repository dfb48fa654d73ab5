//! Crate-wide error type with process exit-code mapping.
//!
//! Every fallible public operation returns [`Error`]. The CLI maps the
//! variant class to an exit code: usage problems exit 1, data problems
//! exit 2, numeric failures exit 3.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad command-line usage or an invalid configuration value.
    #[error("usage: {0}")]
    Usage(String),

    /// Mismatched tensor shapes in a graph operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A differentiable primitive without an implemented backward rule.
    #[error("gradient not implemented for primitive `{0}`; extend the op set or remove it from the loss path")]
    UnsupportedPrimitive(String),

    /// Non-finite value detected where finiteness is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Loss evaluation changed between repeated runs during gradient checking.
    #[error("loss closure is non-deterministic: {0}")]
    NonDeterministicLoss(String),

    /// Quaternion with near-zero norm where a rotation is required.
    #[error("degenerate quaternion (norm {norm:.3e} below {min:.1e})")]
    DegenerateQuaternion { norm: f64, min: f64 },

    /// A label lookup failed in an imported embedding table.
    #[error("unknown label `{label}`{}", suggestion_text(.suggestions))]
    UnknownLabel {
        label: String,
        suggestions: Vec<String>,
    },

    /// Dataset, embedding table, cloud, or checkpoint content is invalid.
    #[error("data: {0}")]
    Data(String),

    /// File I/O failure, tagged with the path involved.
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure, tagged with what was being parsed.
    #[error("parse {what}: {source}")]
    Json {
        what: String,
        #[source]
        source: serde_json::Error,
    },

    /// Training halted on a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    /// Sampling produced an unusable output after the allowed retry.
    #[error("sampling failed: {0}")]
    Sampling(String),
}

fn suggestion_text(suggestions: &[String]) -> String {
    if suggestions.is_empty() {
        String::new()
    } else {
        format!(" (closest known: {})", suggestions.join(", "))
    }
}

impl Error {
    /// Process exit code for this error class: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_)
            | Error::Io { .. }
            | Error::Json { .. }
            | Error::UnknownLabel { .. } => 2,
            Error::Shape { .. }
            | Error::UnsupportedPrimitive(_)
            | Error::NonFinite(_)
            | Error::NonDeterministicLoss(_)
            | Error::DegenerateQuaternion { .. }
            | Error::Diverged { .. }
            | Error::Sampling(_) => 3,
        }
    }

    /// Shorthand for a shape error.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Error {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Shorthand for an I/O error tagged with its path.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
