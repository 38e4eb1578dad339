//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },

    #[error("non-finite value {value} at row {row}, col {col}")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("row {row} has near-zero norm {norm:e}")]
    ZeroRow { row: usize, norm: f64 },

    #[error("points {a} and {b} nearly coincide (distance {distance:e})")]
    CoincidentPoints { a: usize, b: usize, distance: f64 },

    #[error("dimension mismatch in {context}: {lhs} vs {rhs}")]
    DimensionMismatch {
        context: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("label {label} out of range at line {line}")]
    LabelRange { label: i64, line: usize },

    #[error("bad IDX magic in {path}: found {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("IDX file {path} truncated: need {needed} bytes, have {have}")]
    Truncated {
        path: String,
        needed: usize,
        have: usize,
    },

    #[error("unsupported centroid format version {found} (expected {expected})")]
    FormatVersionMismatch { found: u64, expected: u64 },

    #[error("centroid schema error: {0}")]
    Schema(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
