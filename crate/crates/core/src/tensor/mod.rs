//! Dense CPU tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap, reference-counted handle to an immutable buffer.
//! Operations that touch a tensor with `requires_grad` record a backward
//! closure on their output, so the set of live tensors reachable from a loss
//! forms the graph that [`Tensor::backward`] walks.
//!
//! Gradients accumulate: calling `backward` twice without
//! [`Tensor::zero_grad`] adds the second gradient onto the first.

mod autograd;
pub mod checkpoint;
mod conv;
mod element;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use autograd::{grad_check, Graph};
pub use checkpoint::{read_checkpoint, write_checkpoint, AnyTensor, DType};
pub use conv::conv_out_extent;
pub use element::Element;

/// Errors raised by tensor construction, forward ops and backward.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward: tensor is not attached to a gradient graph")]
    Detached,
    #[error("grad_check: function is not deterministic ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

/// What a backward closure sees: the upstream gradient, the forward output,
/// and the op's inputs.
pub struct BackwardCtx<'a, T: Element> {
    pub grad_out: &'a [T],
    pub out: &'a [T],
    pub inputs: &'a [Tensor<T>],
}

pub(crate) struct GradFn<T: Element> {
    pub(crate) name: &'static str,
    pub(crate) inputs: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

pub(crate) struct Node<T: Element> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<T>>>,
    pub(crate) grad_fn: Option<GradFn<T>>,
}

/// Row-major dense tensor. Cloning shares the underlying buffer.
pub struct Tensor<T: Element = f64>(pub(crate) Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape);
        if self.numel() <= 16 {
            d.field("data", &self.0.data);
        }
        d.field("requires_grad", &self.0.requires_grad);
        if let Some(g) = &self.0.grad_fn {
            d.field("op", &g.name);
        }
        d.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn from_node(node: Node<T>) -> Self {
        Tensor(Rc::new(node))
    }

    fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Self::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn: None,
        })
    }

    /// Builds a constant tensor, checking that the buffer matches the shape.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::Invalid {
                op: "from_vec",
                msg: format!(
                    "buffer of length {} does not fill shape {:?}",
                    data.len(),
                    shape
                ),
            });
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::lit(v)).collect(), shape)
    }

    /// A trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Ok(Self::from_vec(data, shape)?.requires_grad())
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(vec![v], vec![], false)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::leaf(vec![v; numel_of(shape)], shape.to_vec(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Returns a fresh leaf sharing this tensor's values with gradient
    /// tracking switched on.
    pub fn requires_grad(self) -> Self {
        if self.0.requires_grad && self.0.grad_fn.is_none() {
            return self;
        }
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), true)
    }

    /// A constant copy with no graph history.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_tracked(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the op that produced this tensor, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    /// Scalar value; errors unless the tensor holds exactly one element.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "item",
                msg: format!("expected one element, shape is {:?}", self.shape()),
            });
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    /// Accumulated gradient, or zeros when nothing has flowed into this tensor.
    pub fn grad_or_zeros(&self) -> Vec<T> {
        self.grad().unwrap_or_else(|| vec![T::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Casts to another element type. The result is a detached constant.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self
            .0
            .data
            .iter()
            .map(|v| U::lit(v.as_f64()))
            .collect();
        Tensor::leaf(data, self.0.shape.clone(), false)
    }

    /// Records a new op output. Inputs that do not require grad are kept
    /// out of the graph; if none do, the result is a plain constant.
    ///
    /// This is the extension point for ops defined outside this module.
    pub fn from_op(
        name: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: &[&Tensor<T>],
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(numel_of(&shape), data.len(), "{name}");
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let tracked = inputs.iter().any(|t| t.0.requires_grad);
        if !tracked {
            return Ok(Self::leaf(data, shape, false));
        }
        Ok(Self::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad: true,
            grad: RefCell::new(None),
            grad_fn: Some(GradFn {
                name,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                backward: Box::new(backward),
            }),
        }))
    }
}

pub(crate) fn shape_err<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

#[cfg(test)]
mod tests;
