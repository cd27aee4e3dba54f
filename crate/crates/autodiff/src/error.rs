use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("shape mismatch in {op} (node {node}): {detail}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        detail: String,
    },

    #[error("numeric fault: {op} (node {node}) produced a non-finite value")]
    NonFinite { op: &'static str, node: usize },

    #[error("root node {node} is not scalar (shape {shape:?})")]
    NonScalarRoot { node: usize, shape: Vec<usize> },

    #[error("no second-order rule for op {op} (node {node}) on the differentiated path")]
    NoSecondOrderRule { op: &'static str, node: usize },

    #[error("binding for input `{name}` has shape {got:?}, expected {expected:?}")]
    BindingShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),

    #[error("node {node} is not an input leaf")]
    NotAnInput { node: usize },
}
