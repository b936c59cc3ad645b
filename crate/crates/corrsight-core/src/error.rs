//! One error type for the whole crate.
//!
//! Numeric kernels fail loudly: every tensor op scans its output and refuses
//! to hand back NaN or infinity, so a diverging run stops at the op that
//! produced the first bad value instead of three modules later.

/// Errors produced by tensors, layers, training and detection.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes that the op cannot reconcile.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// The op produced NaN or +/-inf.
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    /// A bad argument that is not a shape pairing problem.
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    /// An optimizer step saw a NaN/inf gradient and refused to apply it.
    #[error("optimizer: non-finite gradient for parameter {param:?}")]
    NonFiniteGradient { param: String },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
