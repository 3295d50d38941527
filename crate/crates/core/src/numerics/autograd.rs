//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Var`] is an immutable tensor value, optionally linked to a node on a
//! [`Tape`]. Operations whose inputs are all untracked produce untracked
//! results and record nothing, so inference runs over the same layer code
//! without building a graph. Nodes are appended in execution order, which is
//! a topological order, and [`Tape::backward`] walks them in reverse.
//!
//! The op set is closed. Modules with their own differentiable kernels (the
//! sample-axis scans) plug in through [`CustomOp`].

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{FeatError, Result};
use crate::numerics::activations as act;
use crate::numerics::tensor::{gemm, pairwise_sum, Tensor};

/// Backward rule for an op defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input (in registration order), given
    /// the gradient of the output. `None` marks an input with no gradient.
    fn backward(&self, grad_output: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Gelu,
    Silu,
    Softplus,
    Phi,
    Tanh,
    Sigmoid,
    Exp,
    Huber(f64),
}

impl UnaryKind {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Gelu => act::gelu(x),
            UnaryKind::Silu => act::silu(x),
            UnaryKind::Softplus => act::softplus(x),
            UnaryKind::Phi => act::phi(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Sigmoid => act::sigmoid(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Huber(delta) => act::huber(x, delta),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            UnaryKind::Gelu => act::gelu_grad(x),
            UnaryKind::Silu => act::silu_grad(x),
            UnaryKind::Softplus => act::sigmoid(x),
            UnaryKind::Phi => act::phi_grad(x),
            UnaryKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            UnaryKind::Sigmoid => {
                let s = act::sigmoid(x);
                s * (1.0 - s)
            }
            UnaryKind::Exp => x.exp(),
            UnaryKind::Huber(delta) => act::huber_grad(x, delta),
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Arc<Tensor>,
        b: Arc<Tensor>,
    },
    Add {
        rhs_shape: Vec<usize>,
    },
    Sub {
        rhs_shape: Vec<usize>,
    },
    Mul {
        a: Arc<Tensor>,
        b: Arc<Tensor>,
    },
    Scale(f64),
    AddScalar,
    Unary {
        kind: UnaryKind,
        input: Arc<Tensor>,
    },
    Softmax {
        output: Arc<Tensor>,
    },
    LogSoftmax {
        output: Arc<Tensor>,
    },
    LayerNorm {
        xhat: Tensor,
        inv_std: Vec<f64>,
        gain: Arc<Tensor>,
    },
    SumAll {
        shape: Vec<usize>,
    },
    Reshape {
        from: Vec<usize>,
    },
    Permute {
        perm: Vec<usize>,
    },
    Concat {
        axis: usize,
        shapes: Vec<Vec<usize>>,
    },
    Narrow {
        axis: usize,
        start: usize,
        in_shape: Vec<usize>,
    },
    IndexSelect {
        axis: usize,
        indices: Vec<usize>,
        in_shape: Vec<usize>,
    },
    Expand {
        from: Vec<usize>,
    },
    MaskedFillRows {
        mask: Arc<Vec<bool>>,
        width: usize,
    },
    Custom(Box<dyn CustomOp>),
}

struct Node {
    op: Op,
    inputs: Vec<Option<usize>>,
    shape: Vec<usize>,
}

/// Records differentiable operations for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A tensor value, tracked on a tape or constant.
#[derive(Clone)]
pub struct Var {
    value: Arc<Tensor>,
    node: Option<(Rc<Tape>, usize)>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.value)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.node
            .as_ref()
            .and_then(|(_, id)| self.grads.get(*id))
            .and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when it did not influence the root.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl Tape {
    pub fn new() -> Rc<Tape> {
        Rc::new(Tape::default())
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf holding `value`.
    pub fn leaf(self: &Rc<Self>, value: Tensor) -> Var {
        self.leaf_arc(Arc::new(value))
    }

    pub fn leaf_arc(self: &Rc<Self>, value: Arc<Tensor>) -> Var {
        let id = self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: value.shape().to_vec(),
        });
        Var {
            value,
            node: Some((Rc::clone(self), id)),
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(FeatError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                loss.shape()
            )));
        }
        self.vjp(loss, &Tensor::ones(loss.shape()))
    }

    /// Vector–Jacobian product: pulls `cotangent` back from `output` to
    /// every leaf.
    pub fn vjp(&self, output: &Var, cotangent: &Tensor) -> Result<Gradients> {
        let root = match &output.node {
            Some((tape, id)) if std::ptr::eq(Rc::as_ptr(tape), self) => *id,
            Some(_) => return Err(FeatError::Contract("output lives on another tape".into())),
            None => return Err(FeatError::Contract("output is not tracked".into())),
        };
        if cotangent.shape() != output.shape() {
            return Err(FeatError::Dimension(format!(
                "cotangent shape {:?} does not match output {:?}",
                cotangent.shape(),
                output.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root] = Some(cotangent.clone());
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let input_grads = node.op.backward(&g)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(iid), Some(ig)) = (input, ig) else { continue };
                debug_assert_eq!(ig.shape(), nodes[*iid].shape.as_slice(), "{}", node.op.name());
                match &mut grads[*iid] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(ig.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl Var {
    pub fn constant(value: Tensor) -> Var {
        Var {
            value: Arc::new(value),
            node: None,
        }
    }

    pub fn from_arc(value: Arc<Tensor>) -> Var {
        Var { value, node: None }
    }

    pub fn scalar(value: f64) -> Var {
        Var::constant(Tensor::scalar(value))
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn tensor(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// The tape this value is tracked on, if any.
    pub fn tape(&self) -> Option<Rc<Tape>> {
        self.node.as_ref().map(|(t, _)| Rc::clone(t))
    }

    /// Same value, detached from any tape.
    pub fn detach(&self) -> Var {
        Var::from_arc(Arc::clone(&self.value))
    }

    /// Wrap a value computed by a [`CustomOp`]. `op` is only built when at
    /// least one input is tracked.
    pub fn custom(
        inputs: &[&Var],
        value: Tensor,
        op: impl FnOnce() -> Box<dyn CustomOp>,
    ) -> Result<Var> {
        Self::record(inputs, value, || Op::Custom(op()))
    }

    fn record(inputs: &[&Var], value: Tensor, op: impl FnOnce() -> Op) -> Result<Var> {
        let mut tape: Option<&Rc<Tape>> = None;
        for v in inputs {
            if let Some((t, _)) = &v.node {
                match tape {
                    None => tape = Some(t),
                    Some(prev) if Rc::ptr_eq(prev, t) => {}
                    Some(_) => {
                        return Err(FeatError::Contract(
                            "operands are tracked on different tapes".into(),
                        ))
                    }
                }
            }
        }
        let Some(tape) = tape else {
            return Ok(Var::constant(value));
        };
        let node = Node {
            op: op(),
            inputs: inputs.iter().map(|v| v.node.as_ref().map(|(_, id)| *id)).collect(),
            shape: value.shape().to_vec(),
        };
        let id = tape.push(node);
        Ok(Var {
            value: Arc::new(value),
            node: Some((Rc::clone(tape), id)),
        })
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// Matrix product over the last two axes.
    ///
    /// `self` is `[..., m, k]`. `rhs` is either a shared `[k, n]` matrix or a
    /// batch `[..., k, n]` with the same leading extents.
    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        let (a, b) = (self.value(), rhs.value());
        let value = matmul_forward(a, b)?;
        Self::record(&[self, rhs], value, || Op::MatMul {
            a: self.tensor(),
            b: rhs.tensor(),
        })
    }

    // ── elementwise ──────────────────────────────────────────────────

    /// Sum with `rhs` broadcast over leading axes (its shape must be a
    /// suffix of `self`'s, or the other way round).
    pub fn add(&self, rhs: &Var) -> Result<Var> {
        if rhs.value.numel() > self.value.numel() {
            return rhs.add(self);
        }
        let inner = suffix_inner(self.shape(), rhs.shape())?;
        let rv = rhs.value.data();
        let data = self
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv[i % inner])
            .collect();
        let value = Tensor::new(self.shape().to_vec(), data)?;
        Self::record(&[self, rhs], value, || Op::Add {
            rhs_shape: rhs.shape().to_vec(),
        })
    }

    /// Difference with `rhs` broadcast over leading axes of `self`.
    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        let inner = suffix_inner(self.shape(), rhs.shape())?;
        let rv = rhs.value.data();
        let data = self
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x - rv[i % inner])
            .collect();
        let value = Tensor::new(self.shape().to_vec(), data)?;
        Self::record(&[self, rhs], value, || Op::Sub {
            rhs_shape: rhs.shape().to_vec(),
        })
    }

    /// Hadamard product with suffix broadcasting.
    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        if rhs.value.numel() > self.value.numel() {
            return rhs.mul(self);
        }
        let inner = suffix_inner(self.shape(), rhs.shape())?;
        let rv = rhs.value.data();
        let data = self
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * rv[i % inner])
            .collect();
        let value = Tensor::new(self.shape().to_vec(), data)?;
        Self::record(&[self, rhs], value, || Op::Mul {
            a: self.tensor(),
            b: rhs.tensor(),
        })
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        let value = self.value.map(|x| x * c);
        Self::record(&[self], value, || Op::Scale(c))
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        let value = self.value.map(|x| x + c);
        Self::record(&[self], value, || Op::AddScalar)
    }

    pub fn unary(&self, kind: UnaryKind) -> Result<Var> {
        let value = self.value.map(|x| kind.apply(x));
        Self::record(&[self], value, || Op::Unary {
            kind,
            input: self.tensor(),
        })
    }

    pub fn gelu(&self) -> Result<Var> {
        self.unary(UnaryKind::Gelu)
    }

    pub fn silu(&self) -> Result<Var> {
        self.unary(UnaryKind::Silu)
    }

    pub fn softplus(&self) -> Result<Var> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn phi(&self) -> Result<Var> {
        self.unary(UnaryKind::Phi)
    }

    pub fn tanh(&self) -> Result<Var> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(UnaryKind::Exp)
    }

    /// Elementwise Huber penalty of `self` read as residuals.
    pub fn huber(&self, delta: f64) -> Result<Var> {
        if !(delta > 0.0) {
            return Err(FeatError::Parameter(format!("huber delta must be > 0, got {delta}")));
        }
        self.unary(UnaryKind::Huber(delta))
    }

    // ── normalization ────────────────────────────────────────────────

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&self) -> Result<Var> {
        let n = self.value.last_dim();
        let mut out = self.value.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(self.shape().to_vec(), out)?;
        let output = Arc::new(value.clone());
        Self::record(&[self], value, || Op::Softmax { output })
    }

    pub fn log_softmax(&self) -> Result<Var> {
        let n = self.value.last_dim();
        let mut out = self.value.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(self.shape().to_vec(), out)?;
        let output = Arc::new(value.clone());
        Self::record(&[self], value, || Op::LogSoftmax { output })
    }

    /// Layer normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&self, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let d = self.value.last_dim();
        if d == 0 || gain.shape() != [d] || bias.shape() != [d] {
            return Err(FeatError::Dimension(format!(
                "layer_norm over {:?} with gain {:?} and bias {:?}",
                self.shape(),
                gain.shape(),
                bias.shape()
            )));
        }
        let rows = self.value.numel() / d;
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        let (g, b) = (gain.value.data(), bias.value.data());
        for r in 0..rows {
            let x = &self.value.data()[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (x[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(self.shape().to_vec(), out)?;
        Self::record(&[self, gain, bias], value, || Op::LayerNorm {
            xhat: Tensor::new(self.shape().to_vec(), xhat).expect("same shape"),
            inv_std,
            gain: gain.tensor(),
        })
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&self) -> Result<Var> {
        let value = Tensor::scalar(self.value.sum());
        Self::record(&[self], value, || Op::SumAll {
            shape: self.shape().to_vec(),
        })
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value.numel();
        if n == 0 {
            return Err(FeatError::Dimension("mean of an empty tensor".into()));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    // ── shape manipulation ───────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = (*self.value).clone().reshape(shape)?;
        Self::record(&[self], value, || Op::Reshape {
            from: self.shape().to_vec(),
        })
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let value = permute_forward(&self.value, perm)?;
        Self::record(&[self], value, || Op::Permute {
            perm: perm.to_vec(),
        })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| v.value()).collect();
        let value = concat_forward(&tensors, axis)?;
        Self::record(parts, value, || Op::Concat {
            axis,
            shapes: parts.iter().map(|v| v.shape().to_vec()).collect(),
        })
    }

    /// The slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(FeatError::Dimension(format!(
                "narrow({axis}, {start}, {len}) on shape {shape:?}"
            )));
        }
        let indices: Vec<usize> = (start..start + len).collect();
        let value = index_select_forward(&self.value, axis, &indices);
        Self::record(&[self], value, || Op::Narrow {
            axis,
            start,
            in_shape: shape.to_vec(),
        })
    }

    /// Gather entries along `axis` (indices may repeat).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(FeatError::Dimension(format!("axis {axis} on shape {shape:?}")));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(FeatError::Dimension(format!(
                "index {bad} out of range for axis {axis} of {shape:?}"
            )));
        }
        let value = index_select_forward(&self.value, axis, indices);
        Self::record(&[self], value, || Op::IndexSelect {
            axis,
            indices: indices.to_vec(),
            in_shape: shape.to_vec(),
        })
    }

    /// Broadcast over new leading axes so the result has `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Var> {
        let inner = suffix_inner(shape, self.shape())?;
        let total: usize = shape.iter().product();
        let src = self.value.data();
        let data = (0..total).map(|i| src[i % inner]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Self::record(&[self], value, || Op::Expand {
            from: self.shape().to_vec(),
        })
    }

    /// For `self` of shape `[rows, w]`: rows where `mask` is false are
    /// replaced by `fill` (shape `[w]`), bit for bit.
    pub fn masked_fill_rows(&self, keep: &[bool], fill: &Var) -> Result<Var> {
        let shape = self.shape();
        if shape.len() != 2 || keep.len() != shape[0] || fill.shape() != [shape[1]] {
            return Err(FeatError::Dimension(format!(
                "masked_fill_rows on {:?} with {} flags and fill {:?}",
                shape,
                keep.len(),
                fill.shape()
            )));
        }
        let w = shape[1];
        let mut data = self.value.data().to_vec();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                data[r * w..(r + 1) * w].copy_from_slice(fill.value.data());
            }
        }
        let value = Tensor::new(shape.to_vec(), data)?;
        Self::record(&[self, fill], value, || Op::MaskedFillRows {
            mask: Arc::new(keep.to_vec()),
            width: w,
        })
    }
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Unary { .. } => "unary",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SumAll { .. } => "sum",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::IndexSelect { .. } => "index_select",
            Op::Expand { .. } => "expand",
            Op::MaskedFillRows { .. } => "masked_fill_rows",
            Op::Custom(c) => c.name(),
        }
    }

    fn backward(&self, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } => {
                let (da, db) = matmul_backward(a, b, g)?;
                vec![Some(da), Some(db)]
            }
            Op::Add { rhs_shape } => {
                vec![Some(g.clone()), Some(reduce_to_suffix(g, rhs_shape))]
            }
            Op::Sub { rhs_shape } => {
                let r = reduce_to_suffix(g, rhs_shape).map(|v| -v);
                vec![Some(g.clone()), Some(r)]
            }
            Op::Mul { a, b } => {
                let inner = b.numel();
                let (ad, bd, gd) = (a.data(), b.data(), g.data());
                let da: Vec<f64> = gd.iter().enumerate().map(|(i, x)| x * bd[i % inner]).collect();
                let mut db = vec![0.0; inner];
                for (i, x) in gd.iter().enumerate() {
                    db[i % inner] += x * ad[i];
                }
                vec![
                    Some(Tensor::new(a.shape().to_vec(), da)?),
                    Some(Tensor::new(b.shape().to_vec(), db)?),
                ]
            }
            Op::Scale(c) => vec![Some(g.map(|x| x * c))],
            Op::AddScalar => vec![Some(g.clone())],
            Op::Unary { kind, input } => {
                let data = g
                    .data()
                    .iter()
                    .zip(input.data())
                    .map(|(gv, x)| gv * kind.derivative(*x))
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::Softmax { output } => {
                let n = output.last_dim();
                let mut dx = vec![0.0; g.numel()];
                for ((gr, yr), dr) in g
                    .data()
                    .chunks(n)
                    .zip(output.data().chunks(n))
                    .zip(dx.chunks_mut(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), dx)?)]
            }
            Op::LogSoftmax { output } => {
                let n = output.last_dim();
                let mut dx = vec![0.0; g.numel()];
                for ((gr, yr), dr) in g
                    .data()
                    .chunks(n)
                    .zip(output.data().chunks(n))
                    .zip(dx.chunks_mut(n))
                {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        dr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), dx)?)]
            }
            Op::LayerNorm {
                xhat,
                inv_std,
                gain,
            } => {
                let d = gain.numel();
                let rows = inv_std.len();
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let gn = gain.data();
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat.data()[r * d..(r + 1) * d];
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for j in 0..d {
                        let gh = gr[j] * gn[j];
                        mean_gh += gh;
                        mean_ghx += gh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_gh /= d as f64;
                    mean_ghx /= d as f64;
                    for j in 0..d {
                        let gh = gr[j] * gn[j];
                        dx[r * d + j] = inv_std[r] * (gh - mean_gh - hr[j] * mean_ghx);
                    }
                }
                vec![
                    Some(Tensor::new(g.shape().to_vec(), dx)?),
                    Some(Tensor::new(vec![d], dgain)?),
                    Some(Tensor::new(vec![d], dbias)?),
                ]
            }
            Op::SumAll { shape } => vec![Some(Tensor::full(shape, g.item()?))],
            Op::Reshape { from } => vec![Some(g.clone().reshape(from)?)],
            Op::Permute { perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![Some(permute_forward(g, &inverse)?)]
            }
            Op::Concat { axis, shapes } => {
                let mut out = Vec::with_capacity(shapes.len());
                let mut start = 0;
                for s in shapes {
                    let idx: Vec<usize> = (start..start + s[*axis]).collect();
                    out.push(Some(index_select_forward(g, *axis, &idx)));
                    start += s[*axis];
                }
                out
            }
            Op::Narrow {
                axis,
                start,
                in_shape,
            } => {
                let idx: Vec<usize> = (*start..*start + g.shape()[*axis]).collect();
                vec![Some(index_add(g, *axis, &idx, in_shape))]
            }
            Op::IndexSelect {
                axis,
                indices,
                in_shape,
            } => vec![Some(index_add(g, *axis, indices, in_shape))],
            Op::Expand { from } => vec![Some(reduce_to_suffix(g, from))],
            Op::MaskedFillRows { mask, width } => {
                let mut da = g.data().to_vec();
                let mut dfill = vec![0.0; *width];
                for (r, &k) in mask.iter().enumerate() {
                    if !k {
                        let row = &mut da[r * width..(r + 1) * width];
                        dfill.iter_mut().zip(row.iter()).for_each(|(a, b)| *a += b);
                        row.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                vec![
                    Some(Tensor::new(g.shape().to_vec(), da)?),
                    Some(Tensor::new(vec![*width], dfill)?),
                ]
            }
            Op::Custom(op) => op.backward(g)?,
        })
    }
}

/// Stable `ln Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Number of elements of the broadcast operand, after checking its shape is
/// a suffix of `full`.
fn suffix_inner(full: &[usize], suffix: &[usize]) -> Result<usize> {
    if suffix.len() > full.len() || full[full.len() - suffix.len()..] != *suffix {
        return Err(FeatError::Dimension(format!(
            "cannot broadcast {suffix:?} against {full:?}"
        )));
    }
    Ok(suffix.iter().product::<usize>().max(1))
}

fn reduce_to_suffix(g: &Tensor, suffix: &[usize]) -> Tensor {
    let inner: usize = suffix.iter().product::<usize>().max(1);
    if inner == g.numel() {
        return g.clone().reshape(suffix).expect("same numel");
    }
    let outer = g.numel() / inner;
    // pairwise across the broadcast axis keeps the sum order fixed
    let mut out = vec![0.0; inner];
    let mut column = vec![0.0; outer];
    for (j, o) in out.iter_mut().enumerate() {
        for (i, c) in column.iter_mut().enumerate() {
            *c = g.data()[i * inner + j];
        }
        *o = pairwise_sum(&column);
    }
    Tensor::new(suffix.to_vec(), out).expect("suffix shape")
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize, bool)> {
    let err = || {
        FeatError::Dimension(format!(
            "matmul of {:?} by {:?}",
            a.shape(),
            b.shape()
        ))
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(err());
    }
    let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (k2, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    if k != k2 {
        return Err(err());
    }
    let batch: usize = a.shape()[..a.rank() - 2].iter().product();
    if b.rank() == 2 {
        Ok((batch, m, k, n, true))
    } else if a.shape()[..a.rank() - 2] == b.shape()[..b.rank() - 2] {
        Ok((batch, m, k, n, false))
    } else {
        Err(err())
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n, shared) = matmul_dims(a, b)?;
    let mut shape = a.shape().to_vec();
    *shape.last_mut().expect("rank >= 2") = n;
    let mut out = vec![0.0; batch * m * n];
    if shared {
        gemm(batch * m, k, n, a.data(), false, b.data(), false, &mut out, false);
    } else {
        for t in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[t * m * k..(t + 1) * m * k],
                false,
                &b.data()[t * k * n..(t + 1) * k * n],
                false,
                &mut out[t * m * n..(t + 1) * m * n],
                false,
            );
        }
    }
    Tensor::new(shape, out)
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (batch, m, k, n, shared) = matmul_dims(a, b)?;
    let mut da = vec![0.0; a.numel()];
    let mut db = vec![0.0; b.numel()];
    if shared {
        // dA = G·Bᵀ, dB = Aᵀ·G over the flattened batch
        gemm(batch * m, n, k, g.data(), false, b.data(), true, &mut da, false);
        gemm(k, batch * m, n, a.data(), true, g.data(), false, &mut db, false);
    } else {
        for t in 0..batch {
            let gs = &g.data()[t * m * n..(t + 1) * m * n];
            let as_ = &a.data()[t * m * k..(t + 1) * m * k];
            let bs = &b.data()[t * k * n..(t + 1) * k * n];
            gemm(m, n, k, gs, false, bs, true, &mut da[t * m * k..(t + 1) * m * k], false);
            gemm(k, m, n, as_, true, gs, false, &mut db[t * k * n..(t + 1) * k * n], false);
        }
    }
    Ok((
        Tensor::new(a.shape().to_vec(), da)?,
        Tensor::new(b.shape().to_vec(), db)?,
    ))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_forward(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(FeatError::Dimension(format!(
            "invalid permutation {perm:?} for shape {:?}",
            t.shape()
        )));
    }
    let in_strides = strides(t.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        // walk the output in row-major order, tracking the source offset;
        // the innermost axis is copied as a strided run
        let last = rank - 1;
        let inner_len = out_shape[last];
        let inner_stride = src_stride[last];
        let mut index = vec![0usize; rank];
        let mut base = 0usize;
        let src = t.data();
        loop {
            for i in 0..inner_len {
                out.push(src[base + i * inner_stride]);
            }
            // advance the outer index
            let mut axis = last;
            loop {
                if axis == 0 {
                    return Tensor::new(out_shape, out);
                }
                axis -= 1;
                index[axis] += 1;
                base += src_stride[axis];
                if index[axis] < out_shape[axis] {
                    break;
                }
                base -= src_stride[axis] * out_shape[axis];
                index[axis] = 0;
            }
        }
    }
    Tensor::new(out_shape, out)
}

fn concat_forward(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| FeatError::Dimension("concat of zero tensors".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(FeatError::Dimension(format!("concat axis {axis} on rank {rank}")));
    }
    for p in parts {
        let ok = p.rank() == rank
            && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
        if !ok {
            return Err(FeatError::Dimension(format!(
                "concat of {:?} with {:?} along {axis}",
                first.shape(),
                p.shape()
            )));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, out)
}

fn index_select_forward(t: &Tensor, axis: usize, indices: &[usize]) -> Tensor {
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let extent = t.shape()[axis];
    let mut shape = t.shape().to_vec();
    shape[axis] = indices.len();
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &ix in indices {
            let start = (o * extent + ix) * inner;
            out.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    Tensor::new(shape, out).expect("gather shape")
}

fn index_add(g: &Tensor, axis: usize, indices: &[usize], in_shape: &[usize]) -> Tensor {
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let extent = in_shape[axis];
    let mut out = vec![0.0; in_shape.iter().product()];
    for o in 0..outer {
        for (pos, &ix) in indices.iter().enumerate() {
            let src = (o * indices.len() + pos) * inner;
            let dst = (o * extent + ix) * inner;
            for i in 0..inner {
                out[dst + i] += g.data()[src + i];
            }
        }
    }
    Tensor::new(in_shape.to_vec(), out).expect("scatter shape")
}
