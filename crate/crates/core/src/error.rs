use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the engine, the losses and the training step.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for `op`.
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    /// `backward` was called on a tensor with more than one element.
    NotScalar { shape: Vec<usize> },
    /// Inputs of one op live on different graphs.
    GraphMismatch { op: &'static str },
    /// An argument violates its documented precondition.
    InvalidArgument { what: &'static str, detail: String },
    /// Anchor and contrastive embeddings were not produced from the same samples.
    SampleMismatch { detail: String },
    /// A class-aware batch cannot be drawn from the dataset.
    Infeasible { detail: String },
    /// Retrieval from an empty memory bank.
    EmptyBank,
    /// A loss component evaluated to NaN or infinity.
    NonFinite { component: String, value: f64 },
    /// Training diverged past the abort threshold.
    Diverged { loss: f64 },
    /// A snapshot is already held; snapshots do not nest.
    SnapshotActive,
    /// `restore` was called without an outstanding snapshot.
    NoSnapshot,
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            what,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, shapes } => {
                write!(f, "shape mismatch in {op}: operands ")?;
                for (i, s) in shapes.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" vs ")?;
                    }
                    write!(f, "{s:?}")?;
                }
                Ok(())
            }
            Error::NotScalar { shape } => {
                write!(f, "backward requires a single-element tensor, got shape {shape:?}")
            }
            Error::GraphMismatch { op } => write!(f, "inputs of {op} belong to different graphs"),
            Error::InvalidArgument { what, detail } => write!(f, "invalid {what}: {detail}"),
            Error::SampleMismatch { detail } => write!(f, "sample mismatch: {detail}"),
            Error::Infeasible { detail } => write!(f, "infeasible batch: {detail}"),
            Error::EmptyBank => f.write_str("memory bank is empty"),
            Error::NonFinite { component, value } => {
                write!(f, "non-finite loss component {component}: {value}")
            }
            Error::Diverged { loss } => write!(f, "training diverged (loss {loss})"),
            Error::SnapshotActive => f.write_str("a parameter snapshot is already active"),
            Error::NoSnapshot => f.write_str("no active snapshot to restore"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T, E = Error> = core::result::Result<T, E>;
