use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the engine.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Two operand shapes do not line up for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operation expected a scalar tensor.
    NotScalar { shape: Vec<usize> },
    /// Shape and payload length disagree.
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    /// A tensor from a different graph was passed to an operation.
    ForeignGraph { op: &'static str },
    /// A label row is not one-hot.
    NotOneHot { row: usize },
    /// A named parameter is not reachable from the loss on the tape.
    UnreachableParam { name: String },
    /// Loss became non-finite during iterative training.
    NonFiniteLoss { iteration: usize },
    /// Task list length does not match the configured meta-batch.
    TaskCount { expected: usize, got: usize },
    /// Dataset has fewer samples than an episode needs.
    DatasetTooSmall { needed: usize, have: usize },
    /// Not enough classes, or not enough samples per class, for an episode.
    InsufficientClasses { detail: String },
    /// Draw count exceeds the population in the collision model.
    CollisionDomain { c: u64, m: u64, n_way: u64 },
    /// A spec or configuration failed validation.
    InvalidSpec(String),
    /// Malformed serialized tensor or checkpoint bytes.
    Decode(String),
    /// An error that occurred at a specific meta-training iteration.
    AtIteration {
        iteration: usize,
        inner: Box<CoreError>,
    },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            CoreError::NotScalar { shape } => {
                write!(f, "expected scalar tensor, got shape {shape:?}")
            }
            CoreError::ShapeDataMismatch { shape, len } => {
                write!(f, "shape {shape:?} does not match data length {len}")
            }
            CoreError::ForeignGraph { op } => {
                write!(f, "{op}: tensor belongs to a different graph")
            }
            CoreError::NotOneHot { row } => {
                write!(f, "label row {row} is not one-hot")
            }
            CoreError::UnreachableParam { name } => {
                write!(f, "parameter `{name}` is not reachable from the loss")
            }
            CoreError::NonFiniteLoss { iteration } => {
                write!(f, "loss became non-finite at update {iteration}")
            }
            CoreError::TaskCount { expected, got } => {
                write!(f, "expected {expected} tasks in the meta-batch, got {got}")
            }
            CoreError::DatasetTooSmall { needed, have } => {
                write!(f, "dataset has {have} samples but the episode needs {needed}")
            }
            CoreError::InsufficientClasses { detail } => {
                write!(f, "insufficient classes for episode: {detail}")
            }
            CoreError::CollisionDomain { c, m, n_way } => {
                write!(
                    f,
                    "cannot draw {n_way} distinct samples from {c} classes of {m} instances"
                )
            }
            CoreError::InvalidSpec(msg) => write!(f, "invalid spec: {msg}"),
            CoreError::Decode(msg) => write!(f, "decode error: {msg}"),
            CoreError::AtIteration { iteration, inner } => {
                write!(f, "meta-iteration {iteration}: {inner}")
            }
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
