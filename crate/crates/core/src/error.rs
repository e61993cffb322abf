use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands whose shapes cannot be combined.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Window or kernel does not fit the (padded) input.
    Geometry(String),
    InvalidNeuron {
        layer: usize,
        unit: usize,
    },
    InvalidModel(String),
    InvalidParameter(String),
    /// Training produced a non-finite loss.
    Diverged {
        epoch: usize,
        learning_rate: f32,
    },
    /// A label is out of range for the model.
    InvalidLabel {
        label: usize,
        class_count: usize,
    },
    /// Not enough erroneous samples to build the requested suites.
    InsufficientErrors {
        needed: usize,
        available: usize,
    },
    /// Coverage artifacts built for a different model.
    ModelMismatch {
        expected: u64,
        found: u64,
    },
    EmptyInput(&'static str),
    /// A statistic is undefined for the given values.
    Degenerate(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::Geometry(msg) => write!(f, "geometry error: {msg}"),
            Error::InvalidNeuron { layer, unit } => {
                write!(f, "neuron {unit} does not exist in coverage layer {layer}")
            }
            Error::InvalidModel(msg) => write!(f, "invalid model: {msg}"),
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::Diverged {
                epoch,
                learning_rate,
            } => write!(
                f,
                "training diverged (non-finite loss) in epoch {epoch}; \
                 lower the learning rate (currently {learning_rate})"
            ),
            Error::InvalidLabel { label, class_count } => {
                write!(f, "label {label} out of range for {class_count} classes")
            }
            Error::InsufficientErrors { needed, available } => write!(
                f,
                "need {needed} erroneous samples but only {available} are available \
                 (short by {})",
                needed.saturating_sub(*available)
            ),
            Error::ModelMismatch { expected, found } => write!(
                f,
                "model hash mismatch: artifact built for {expected:016x}, got model {found:016x}"
            ),
            Error::EmptyInput(what) => write!(f, "{what} is empty"),
            Error::Degenerate(what) => write!(f, "degenerate input: {what}"),
        }
    }
}

impl core::error::Error for Error {}
