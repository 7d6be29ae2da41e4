use std::fmt;

use thiserror::Error;

use crate::tensor::{DType, Shape};

/// A single problem found while validating a graph, tied to the node it
/// was found on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node: String,
    pub message: String,
}

impl Violation {
    pub fn new(node: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            node: node.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node '{}': {}", self.node, self.message)
    }
}

/// Distinguishes the ways reading a checkpoint can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointErrorKind {
    FileNotFound,
    NameNotFound,
    Corrupt,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {a} and {b}")]
    ShapeMismatch { op: String, a: Shape, b: Shape },

    #[error("{op}: expected dtype {expected}, got {got}")]
    DTypeMismatch {
        op: String,
        expected: DType,
        got: DType,
    },

    #[error("{op}: index {index} out of range [0, {bound})")]
    IndexOutOfRange { op: String, index: i64, bound: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no kernel registered for op '{op}' on device type '{device_type}' with dtype {dtype}")]
    NoKernel {
        op: String,
        device_type: String,
        dtype: String,
    },

    #[error("graph validation failed: {}", join_violations(.0))]
    Validation(Vec<Violation>),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("fetched endpoint {0} carries a dead value")]
    DeadFetch(String),

    #[error("step stalled with unsatisfied fetches; stalled nodes: {stalled:?}")]
    Deadlock { stalled: Vec<String> },

    #[error("node '{node}': {source}")]
    Kernel {
        node: String,
        #[source]
        source: Box<Error>,
    },

    #[error("consistency violation: {0}")]
    Consistency(String),

    #[error("cancelled: {0}")]
    Cancelled(String),

    #[error("queue closed")]
    QueueClosed,

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("dangling handle to resource {0}")]
    DanglingHandle(u64),

    #[error("checkpoint error ({kind:?}): {message}")]
    Checkpoint {
        kind: CheckpointErrorKind,
        message: String,
    },

    #[error("gradient construction failed: {0}")]
    Gradient(String),

    #[error("placement failed: {0}")]
    Placement(String),

    #[error("wire protocol error: {0}")]
    Wire(String),

    #[error("task unavailable: {0}")]
    Unavailable(String),

    #[error("deadline exceeded: {0}")]
    Timeout(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn in_node(self, node: &str) -> Self {
        match self {
            Error::Kernel { .. } | Error::Cancelled(_) => self,
            other => Error::Kernel {
                node: node.to_string(),
                source: Box::new(other),
            },
        }
    }

    /// Strips `Kernel` wrappers to expose the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Kernel { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn checkpoint_kind(&self) -> Option<CheckpointErrorKind> {
        match self.root() {
            Error::Checkpoint { kind, .. } => Some(*kind),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
