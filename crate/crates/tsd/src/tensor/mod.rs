//! Dense f64 tensors and a reverse-mode autodiff tape.
//!
//! Everything in the crate that needs gradients runs through [`Tape`]:
//! forward ops append nodes to a Wengert list and [`Tape::backward`] walks it
//! once in reverse. Tensors themselves are plain storage and carry no graph
//! state, so they can be serialized, hashed and shipped around freely.

mod functional;
mod tape;

pub use functional::{cross_entropy_mean, kl_divergence, smooth_l1, softmax_temperature};
pub use tape::{Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors produced by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("variable #{index} does not belong to this tape")]
    ForeignTape { index: usize },
    #[error("backward already ran on this tape; build a new forward pass first")]
    DoubleBackward,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any differentiable leaf")]
    NoGradPath,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// A dense row-major tensor of f64 values.
///
/// The shape product always equals the number of values; an empty shape means
/// a scalar. `grad` is populated by [`Tape::backward`] consumers and is never
/// serialized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    #[serde(skip)]
    node: Option<Var>,
}

impl Tensor {
    /// Builds a tensor, rejecting shape/value length disagreements.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                expect,
                values.len()
            )));
        }
        Ok(Tensor { shape, values, requires_grad: false, grad: None, node: None })
    }

    /// Scalar tensor with empty shape.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], values: vec![value], requires_grad: false, grad: None, node: None }
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor { shape, values: vec![0.0; len], requires_grad: false, grad: None, node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    /// Builder-style variant of [`set_requires_grad`](Self::set_requires_grad).
    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Stores a gradient of the same length as the values, or clears it.
    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) -> Result<(), TensorError> {
        if let Some(g) = &grad {
            if g.len() != self.values.len() {
                return Err(TensorError::ShapeMismatch(format!(
                    "gradient length {} does not match tensor length {}",
                    g.len(),
                    self.values.len()
                )));
            }
        }
        self.grad = grad;
        Ok(())
    }

    /// Tape handle recorded by [`Tape::attach`], if any.
    pub fn node(&self) -> Option<Var> {
        self.node
    }

    pub fn set_node(&mut self, node: Option<Var>) {
        self.node = node;
    }

    /// True when every value is finite.
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.values == other.values
            && self.requires_grad == other.requires_grad
    }
}
