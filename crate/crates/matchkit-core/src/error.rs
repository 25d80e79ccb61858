use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors produced by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not satisfy an operation's contract.
    Shape { op: &'static str, detail: String },
    /// An argument is outside its documented domain.
    InvalidArg { what: &'static str, detail: String },
    /// A forward value came out NaN or infinite.
    NonFinite { op: &'static str },
    /// The attention operations require at least one support item.
    EmptySupport,
    /// `backward` was called on a graph that was already consumed.
    GraphConsumed,
    /// `backward` requires a scalar loss.
    NotScalar { shape: Vec<usize> },
    /// Variables from different graphs were combined.
    GraphMismatch,
    /// The sampler asked for more classes than the split provides.
    InsufficientClasses { requested: usize, available: usize },
    /// A class does not hold enough examples for the requested episode.
    InsufficientExamples {
        class_id: u32,
        needed: usize,
        available: usize,
    },
    /// A named parameter is missing from the parameter map.
    MissingParam(String),
    /// Training hit a non-finite loss and aborted.
    NumericAbort { step: u64, detail: String },
    /// A configuration value fails validation.
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::InvalidArg { what, detail } => write!(f, "invalid {what}: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::EmptySupport => write!(f, "support set is empty"),
            Error::GraphConsumed => write!(f, "graph already consumed by backward"),
            Error::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::GraphMismatch => write!(f, "variables belong to different graphs"),
            Error::InsufficientClasses {
                requested,
                available,
            } => write!(
                f,
                "episode needs {requested} classes but the split has {available}"
            ),
            Error::InsufficientExamples {
                class_id,
                needed,
                available,
            } => write!(
                f,
                "class {class_id} has {available} examples, episode needs {needed}"
            ),
            Error::MissingParam(name) => write!(f, "missing parameter `{name}`"),
            Error::NumericAbort { step, detail } => {
                write!(f, "numeric abort at step {step}: {detail}")
            }
            Error::Config(detail) => write!(f, "invalid configuration: {detail}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn shape_err(op: &'static str, detail: impl fmt::Display) -> Error {
    Error::Shape {
        op,
        detail: alloc::format!("{detail}"),
    }
}
