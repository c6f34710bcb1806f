//! Reverse-mode automatic differentiation on dynamic-dimension arrays.
//!
//! A [`Tape`] is an append-only arena of nodes; every operation evaluates
//! eagerly and records what it needs for the backward pass. Ids grow
//! monotonically, so the node list is already a topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! The element type is generic: training runs in `f32`, the
//! finite-difference suites re-run the same graph builders in `f64`.
//!
//! Everything here is single-threaded and allocation-order deterministic;
//! two identical forward/backward passes produce bit-identical results.

mod conv;
mod ops;

pub use conv::{conv2d_out_shape, conv3d_out_shape};

use ndarray::{ArrayD, IxDyn};

/// Element type the tape operates on.
pub trait Scalar:
    ndarray::LinalgScalar
    + num_traits::Float
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + PartialOrd
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    /// Negative-slope leak, slope in the payload.
    LeakyRelu,
    Tanh,
    Sigmoid,
    Exp,
    Ln,
    Abs,
    Sqr,
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Unary(usize, UnaryKind, f64),
    Clamp(usize, f64, f64),
    MatMul(usize, usize),
    /// y = x · wᵀ (+ b): x (n, in), w (out, in), b (out).
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    /// Batched matmul; `trans_b` multiplies by bᵀ per batch item.
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Conv3d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    Upsample2x(usize),
    InstanceNorm2d {
        x: usize,
        eps: f64,
    },
    /// out[n,c,h,w] = s[n,c]·x[n,c,h,w] + b[n,c]
    ChannelAffine {
        x: usize,
        s: usize,
        b: usize,
    },
    /// Row-wise softmax with excluded positions pinned to exactly zero.
    MaskedSoftmax {
        logits: usize,
        mask: ndarray::Array2<bool>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(usize),
    SumAll(usize),
    MeanAll(usize),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    /// y[b,:] = Σ_j alpha[b,j] · u[b,j,:]
    WeightedSumRows {
        u: usize,
        alpha: usize,
    },
    /// Broadcast-add `p` over the leading axis of `x`.
    AddBc0 {
        x: usize,
        p: usize,
    },
    /// Stack (B,C,H,W) frames into (B,C,T,H,W).
    StackTime {
        frames: Vec<usize>,
    },
    /// Tile (B,C,H,W) to (B,C,T,H,W).
    RepeatTime {
        x: usize,
        t: usize,
    },
}

pub(crate) struct Node<T: Scalar> {
    pub value: ArrayD<T>,
    pub op: Op,
    pub needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Grads<T: Scalar>(Vec<Option<ArrayD<T>>>);

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when the sweep never
    /// reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

/// Append-only computation graph.
pub struct Tape<T: Scalar> {
    nodes: std::cell::RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: std::cell::RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<T>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Constant input: excluded from the backward sweep.
    pub fn constant(&self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn param(&self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> std::cell::Ref<'_, ArrayD<T>> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn value_clone(&self, v: Var) -> ArrayD<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a 0-d node.
    pub fn scalar_value(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert_eq!(val.ndim(), 0, "scalar_value on non-scalar node");
        val[IxDyn(&[])]
    }

    /// Reverse sweep from a 0-d `loss` node. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.ndim(),
            0,
            "backward seed must be a scalar node"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[]), T::one()));

        for id in (0..=loss.0).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            ops::backward_step(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads(grads)
    }
}

pub(crate) fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<ArrayD<T>>],
    id: usize,
    shape: &[usize],
) -> &'a mut ArrayD<T> {
    grads[id].get_or_insert_with(|| ArrayD::zeros(IxDyn(shape)))
}
