//! Eager tape recording and reverse-mode differentiation.
//!
//! Every op executes immediately and appends one node to the tape. Because a
//! node can only reference nodes that already exist, the tape is in
//! topological order by construction and [`Graph::backward`] is a single
//! reverse sweep that visits each node once.

mod conv;
mod elementwise;
mod matmul;
mod norm;
mod reduce;
pub(crate) mod resample;
mod shape_ops;

use std::cell::{Cell, Ref, RefCell};

pub use conv::ConvOpts;
pub use norm::{BatchNormMode, BatchStats};
pub use reduce::PoolKind;

use crate::error::{Error, Result};
use crate::tensor::{round_to_mode, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Unary {
    Sigmoid,
    Relu,
    Gelu,
    Ln,
    Exp,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Powf {
        x: Var,
        exponent: f64,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    SumAll(Var),
    MeanAxes {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Matmul(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        opts: ConvOpts,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        training: bool,
    },
    Upsample {
        x: Var,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Binary(Binary::Div, ..) => "div",
            Op::Unary(Unary::Sigmoid, _) => "sigmoid",
            Op::Unary(Unary::Relu, _) => "relu",
            Op::Unary(Unary::Gelu, _) => "gelu",
            Op::Unary(Unary::Ln, _) => "ln",
            Op::Unary(Unary::Exp, _) => "exp",
            Op::Unary(Unary::Sqrt, _) => "sqrt",
            Op::Affine { .. } => "affine",
            Op::Powf { .. } => "powf",
            Op::Clamp { .. } => "clamp",
            Op::SumAll(_) => "sum",
            Op::MeanAxes { .. } => "mean",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Linear { .. } => "linear",
            Op::Matmul(..) => "matmul",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Upsample { .. } => "upsample_bilinear",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Unary(_, x)
            | Op::Affine { x, .. }
            | Op::Powf { x, .. }
            | Op::Clamp { x, .. }
            | Op::SumAll(x)
            | Op::MeanAxes { x, .. }
            | Op::Reshape(x)
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::Softmax(x)
            | Op::Upsample { x } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Gradient accumulator used during the reverse sweep.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> GradSink<'a> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer for `v`, zero-initialized on first access.
    pub(crate) fn buf(&mut self, v: Var) -> &mut [f64] {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    pub(crate) fn value(&self, v: Var) -> &'a Tensor {
        let nodes: &'a [Node] = self.nodes;
        &nodes[v.0].value
    }
}

thread_local! {
    static CORRUPT_CONV_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Test fixture: runs `f` with a deliberately wrong conv2d weight gradient,
/// so gradient-check harnesses can prove they catch a broken backward.
#[doc(hidden)]
pub fn with_corrupted_conv_backward<R>(f: impl FnOnce() -> R) -> R {
    CORRUPT_CONV_BACKWARD.with(|c| c.set(true));
    let out = f();
    CORRUPT_CONV_BACKWARD.with(|c| c.set(false));
    out
}

pub(crate) fn conv_backward_corrupted() -> bool {
    CORRUPT_CONV_BACKWARD.with(|c| c.get())
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf whose gradient will be populated by [`backward`](Self::backward).
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op.name()
    }

    pub(crate) fn push(&self, mut value: Tensor, op: Op) -> Var {
        round_to_mode(value.data_mut());
        debug_assert!(
            value.is_finite() || !self.inputs_finite(&op),
            "{} produced a non-finite value from finite inputs",
            op.name()
        );
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn inputs_finite(&self, op: &Op) -> bool {
        let nodes = self.nodes.borrow();
        op.inputs().iter().all(|v| nodes[v.0].value.is_finite())
    }

    /// Populates the gradient of every `requires_grad` node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {shape:?}"),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut gout) = grads[i].take() else {
                continue;
            };
            round_to_mode(&mut gout);
            let mut sink = GradSink {
                nodes: &nodes,
                grads: &mut grads,
            };
            backward_node(node, &gout, &mut sink);
            // Interior grads are kept so callers can inspect intermediate values.
            grads[i] = Some(gout);
        }
        for g in grads.iter_mut().flatten() {
            round_to_mode(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.nodes.borrow()[v.0].value.shape().to_vec();
        Some(Tensor::from_parts(shape, g.clone()))
    }
}

fn backward_node(node: &Node, gout: &[f64], sink: &mut GradSink<'_>) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => elementwise::binary_backward(*kind, *a, *b, out, gout, sink),
        Op::Unary(kind, x) => elementwise::unary_backward(*kind, *x, out, gout, sink),
        Op::Affine { x, scale } => elementwise::affine_backward(*x, *scale, gout, sink),
        Op::Powf { x, exponent } => elementwise::powf_backward(*x, *exponent, gout, sink),
        Op::Clamp { x, lo, hi } => elementwise::clamp_backward(*x, *lo, *hi, gout, sink),
        Op::SumAll(x) => reduce::sum_all_backward(*x, gout, sink),
        Op::MeanAxes { x, axes } => reduce::mean_axes_backward(*x, axes, out, gout, sink),
        Op::Reshape(x) => shape_ops::reshape_backward(*x, gout, sink),
        Op::Permute { x, perm } => shape_ops::permute_backward(*x, perm, out, gout, sink),
        Op::Concat { xs, axis } => shape_ops::concat_backward(xs, *axis, out, gout, sink),
        Op::Narrow { x, axis, start } => shape_ops::narrow_backward(*x, *axis, *start, out, gout, sink),
        Op::Linear { x, w, b } => matmul::linear_backward(*x, *w, *b, gout, sink),
        Op::Matmul(a, b) => matmul::matmul_backward(*a, *b, gout, sink),
        Op::Softmax(x) => norm::softmax_backward(*x, out, gout, sink),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => norm::layer_norm_backward(*x, *gamma, *beta, xhat, rstd, gout, sink),
        Op::Conv2d { x, w, b, opts } => conv::conv2d_backward(*x, *w, *b, opts, out, gout, sink),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            training,
        } => norm::batch_norm_backward(*x, *gamma, *beta, xhat, rstd, *training, gout, sink),
        Op::Upsample { x } => resample::upsample_backward(*x, out, gout, sink),
    }
}
