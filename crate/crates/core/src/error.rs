use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by tensor operations, model construction and loss assembly.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands (or an operand and a declared layout) disagree on shape.
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    /// A single operand has a shape the operation cannot accept.
    InvalidShape { op: &'static str, reason: String },
    /// A non-finite value reached an operation that rejects it.
    NonFinite { op: &'static str },
    /// `backward` was called on a tensor with more than one element.
    NotScalar { shape: Vec<usize> },
    /// An argument is outside the operation's domain.
    InvalidArgument { op: &'static str, reason: String },
    /// A configuration violates one of its invariants.
    InvalidConfig(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                op,
                expected,
                found,
            } => write!(f, "{op}: shape mismatch, expected {expected:?}, found {found:?}"),
            Error::InvalidShape { op, reason } => write!(f, "{op}: invalid shape: {reason}"),
            Error::NonFinite { op } => write!(f, "{op}: non-finite input"),
            Error::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::InvalidArgument { op, reason } => write!(f, "{op}: {reason}"),
            Error::InvalidConfig(reason) => write!(f, "invalid config: {reason}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn invalid_arg(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

pub(crate) fn invalid_shape(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidShape {
        op,
        reason: reason.into(),
    }
}
