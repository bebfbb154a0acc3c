//! Dense `f64` tensors, the forward operations the attention blocks need,
//! reverse-mode gradient accumulation on a per-pass tape, and a
//! finite-difference gradient-checking oracle.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use params::ParamStore;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use alloc::string::String;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NumericsError {
    /// Operand shapes are incompatible for the requested operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// `backward` was called on a non-scalar node.
    NotScalar,
    /// A parameter name was inserted twice or looked up without existing.
    UnknownParam(String),
    DuplicateParam(String),
    /// A label index was outside `[0, class_count)`.
    LabelOutOfRange { label: usize, classes: usize },
    /// An SGD step ran before gradients were populated.
    MissingGradients(String),
}

impl core::fmt::Display for NumericsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            NumericsError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            NumericsError::NotScalar => write!(f, "loss node is not a scalar"),
            NumericsError::UnknownParam(name) => write!(f, "unknown parameter {name}"),
            NumericsError::DuplicateParam(name) => write!(f, "duplicate parameter {name}"),
            NumericsError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            NumericsError::MissingGradients(name) => {
                write!(f, "parameter {name} has no gradient buffer")
            }
        }
    }
}
