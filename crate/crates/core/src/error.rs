//! Crate-wide error type.
//!
//! One enum covers all modules so that pipeline stages can propagate errors
//! without conversion boilerplate. Variants are grouped by contract kind —
//! the distinction matters to the CLI, which maps invariant violations to a
//! dedicated exit code.

use thiserror::Error;

/// Any failure produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes incompatible with the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape {
        /// Operation that rejected its operands.
        op: &'static str,
        /// Human-readable description naming both shapes.
        detail: String,
    },

    /// A caller-supplied argument is out of contract (bad axis, empty
    /// subset, unknown site, temperature ≤ 0, ...).
    #[error("parameter error: {0}")]
    Param(String),

    /// An internal invariant that should hold by construction was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An activation patch could not be applied at the named site.
    #[error("patch error at {site}: {detail}")]
    Patch {
        /// Printable site name, e.g. `C3.output`.
        site: String,
        /// What went wrong.
        detail: String,
    },

    /// A prune recipe is structurally invalid (empty keep set, attention
    /// sub-layer left with zero heads, no cross-attention retained, ...).
    #[error("recipe error: {0}")]
    Recipe(String),

    /// Synthetic data generation could not satisfy its spec.
    #[error("generation error: {0}")]
    DataGen(String),

    /// Document corruption is undefined for the given input.
    #[error("corruption error: {0}")]
    Corrupt(String),

    /// A token sequence exceeds the model's maximum prompt length.
    #[error("length error: {0}")]
    Length(String),

    /// A configuration file or block is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint serialization or deserialization failed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for violations of internal invariants (as opposed to bad input,
    /// bad data, or environment failures). The CLI reports these with a
    /// distinct exit code.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(self, Error::Contract(_))
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
