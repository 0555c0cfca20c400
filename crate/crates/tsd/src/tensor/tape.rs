//! Wengert-list reverse-mode autodiff.
//!
//! A [`Tape`] owns every node of one forward pass. Operations validate shapes
//! eagerly, compute values immediately and record just enough structure for a
//! single reverse sweep. Handles are [`Var`]s tagged with the tape identity,
//! so stale or foreign handles are rejected instead of reading garbage.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::functional::{self, PROB_FLOOR};
use super::{Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_tape_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    DivByScalar { x: usize, divisor: usize },
    ClampMin(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    Linear { x: usize, w: usize, b: usize },
    Conv1d { x: usize, w: usize, stride: usize, padding: usize },
    ScaleShift { x: usize, gamma: usize, beta: usize },
    GlobalAvgPool(usize),
    SoftmaxTemp { x: usize, tau: f64 },
    CrossEntropy { logits: usize, labels: Vec<usize> },
    KlDiv { p: usize, q: usize },
    SmoothL1 { a: usize, b: usize },
    Mean(usize),
    Reshape(usize),
    Select { x: usize, flat_index: usize },
    ConcatScalars(Vec<usize>),
    SliceFlat { x: usize, start: usize, len: usize },
    SliceCols { x: usize, start: usize, len: usize },
    TimeStep { x: usize, t: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
struct Inner {
    id: u64,
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Reverse-mode autodiff tape.
///
/// Not `Sync`: parallel work builds one tape per worker.
#[derive(Debug)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                id: fresh_tape_id(),
                nodes: Vec::new(),
                leaf_grads: Vec::new(),
                backward_done: false,
            }),
        }
    }

    /// Number of nodes recorded so far.
    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Drops every node and invalidates all previously issued handles.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.id = fresh_tape_id();
        inner.nodes.clear();
        inner.leaf_grads.clear();
        inner.backward_done = false;
    }

    fn resolve(inner: &Inner, v: Var) -> Result<usize, TensorError> {
        if v.tape != inner.id || v.index >= inner.nodes.len() {
            return Err(TensorError::ForeignTape { index: v.index });
        }
        Ok(v.index)
    }

    fn push(&self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            inner.backward_done = false;
            inner.leaf_grads.clear();
        }
        let index = inner.nodes.len();
        inner.nodes.push(Node { op, shape, values, requires_grad });
        Var { tape: inner.id, index }
    }

    /// Records an input with gradients controlled by `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor) -> Result<Var, TensorError> {
        if !tensor.is_finite() {
            return Err(TensorError::NonFinite("leaf values"));
        }
        Ok(self.push(
            Op::Leaf,
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            tensor.requires_grad(),
        ))
    }

    /// Records a leaf and stores the issued handle back on the tensor.
    pub fn attach(&self, tensor: &mut Tensor) -> Result<Var, TensorError> {
        let v = self.leaf(tensor)?;
        tensor.set_node(Some(v));
        Ok(v)
    }

    /// Records an input that never receives gradients.
    pub fn constant(&self, tensor: &Tensor) -> Result<Var, TensorError> {
        if !tensor.is_finite() {
            return Err(TensorError::NonFinite("constant values"));
        }
        Ok(self.push(Op::Constant, tensor.shape().to_vec(), tensor.values().to_vec(), false))
    }

    /// Convenience constant from raw shape and values.
    pub fn constant_from(&self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var, TensorError> {
        self.constant(&Tensor::new(shape, values)?)
    }

    /// Clones the current value of a node out of the tape.
    pub fn value(&self, v: Var) -> Result<Tensor, TensorError> {
        let inner = self.inner.borrow();
        let idx = Self::resolve(&inner, v)?;
        let node = &inner.nodes[idx];
        Tensor::new(node.shape.clone(), node.values.clone())
    }

    /// Value of a single-element node.
    pub fn value_scalar(&self, v: Var) -> Result<f64, TensorError> {
        let inner = self.inner.borrow();
        let idx = Self::resolve(&inner, v)?;
        let node = &inner.nodes[idx];
        if node.values.len() != 1 {
            return Err(TensorError::NonScalarLoss(node.shape.clone()));
        }
        Ok(node.values[0])
    }

    fn binary_same_shape(
        &self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var, TensorError> {
        let (shape, values, rg) = {
            let inner = self.inner.borrow();
            let ia = Self::resolve(&inner, a)?;
            let ib = Self::resolve(&inner, b)?;
            let (na, nb) = (&inner.nodes[ia], &inner.nodes[ib]);
            if na.shape != nb.shape {
                return Err(TensorError::ShapeMismatch(format!(
                    "{name} over {:?} and {:?}",
                    na.shape, nb.shape
                )));
            }
            let values: Vec<f64> =
                na.values.iter().zip(&nb.values).map(|(&x, &y)| f(x, y)).collect();
            (na.shape.clone(), values, na.requires_grad || nb.requires_grad)
        };
        Ok(self.push(make(a.index, b.index), shape, values, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn unary(
        &self,
        x: Var,
        f: impl Fn(f64) -> f64,
        make: impl Fn(usize) -> Op,
    ) -> Result<Var, TensorError> {
        let (shape, values, rg) = {
            let inner = self.inner.borrow();
            let ix = Self::resolve(&inner, x)?;
            let n = &inner.nodes[ix];
            (n.shape.clone(), n.values.iter().map(|&v| f(v)).collect(), n.requires_grad)
        };
        Ok(self.push(make(x.index), shape, values, rg))
    }

    /// Multiplies every element by a fixed finite factor.
    pub fn scale(&self, x: Var, factor: f64) -> Result<Var, TensorError> {
        if !factor.is_finite() {
            return Err(TensorError::InvalidArgument(format!("scale factor {factor}")));
        }
        self.unary(x, |v| v * factor, |i| Op::Scale(i, factor))
    }

    /// Divides `x` elementwise by a scalar node (used for profile normalization).
    pub fn div_by_scalar(&self, x: Var, divisor: Var) -> Result<Var, TensorError> {
        let (shape, values, rg) = {
            let inner = self.inner.borrow();
            let ix = Self::resolve(&inner, x)?;
            let id = Self::resolve(&inner, divisor)?;
            let (nx, nd) = (&inner.nodes[ix], &inner.nodes[id]);
            if nd.values.len() != 1 {
                return Err(TensorError::ShapeMismatch(format!(
                    "div_by_scalar divisor has shape {:?}",
                    nd.shape
                )));
            }
            let d = nd.values[0];
            if d == 0.0 {
                return Err(TensorError::NonFinite("div_by_scalar divisor"));
            }
            let values: Vec<f64> = nx.values.iter().map(|&v| v / d).collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite("div_by_scalar output"));
            }
            (nx.shape.clone(), values, nx.requires_grad || nd.requires_grad)
        };
        Ok(self.push(Op::DivByScalar { x: x.index, divisor: divisor.index }, shape, values, rg))
    }

    /// Elementwise `max(x, floor)`.
    pub fn clamp_min(&self, x: Var, floor: f64) -> Result<Var, TensorError> {
        if !floor.is_finite() {
            return Err(TensorError::InvalidArgument(format!("clamp_min floor {floor}")));
        }
        self.unary(x, |v| v.max(floor), |i| Op::ClampMin(i, floor))
    }

    pub fn relu(&self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, stable_sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, f64::tanh, Op::Tanh)
    }

    pub fn abs(&self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, f64::abs, Op::Abs)
    }

    /// Affine map `x · wᵀ + b` for `x: [rows, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, values, rg) = {
            let inner = self.inner.borrow();
            let ix = Self::resolve(&inner, x)?;
            let iw = Self::resolve(&inner, w)?;
            let ib = Self::resolve(&inner, b)?;
            let (nx, nw, nb) = (&inner.nodes[ix], &inner.nodes[iw], &inner.nodes[ib]);
            if nx.shape.len() != 2 || nw.shape.len() != 2 || nb.shape.len() != 1 {
                return Err(TensorError::ShapeMismatch(format!(
                    "linear over x {:?}, w {:?}, b {:?}",
                    nx.shape, nw.shape, nb.shape
                )));
            }
            let (rows, in_dim) = (nx.shape[0], nx.shape[1]);
            let (out_dim, w_in) = (nw.shape[0], nw.shape[1]);
            if w_in != in_dim || nb.shape[0] != out_dim {
                return Err(TensorError::ShapeMismatch(format!(
                    "linear over x {:?}, w {:?}, b {:?}",
                    nx.shape, nw.shape, nb.shape
                )));
            }
            let mut values = vec![0.0; rows * out_dim];
            for r in 0..rows {
                let xrow = &nx.values[r * in_dim..(r + 1) * in_dim];
                let orow = &mut values[r * out_dim..(r + 1) * out_dim];
                for (o, out) in orow.iter_mut().enumerate() {
                    let wrow = &nw.values[o * in_dim..(o + 1) * in_dim];
                    let mut acc = nb.values[o];
                    for i in 0..in_dim {
                        acc += xrow[i] * wrow[i];
                    }
                    *out = acc;
                }
            }
            let rg = nx.requires_grad || nw.requires_grad || nb.requires_grad;
            (vec![rows, out_dim], values, rg)
        };
        Ok(self.push(Op::Linear { x: x.index, w: w.index, b: b.index }, shape, values, rg))
    }

    /// Cross-correlation without bias for `x: [batch, in_ch, len]`,
    /// `w: [out_ch, in_ch, k]`, with zero padding on both ends.
    pub fn conv1d(&self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv1d stride must be positive".into()));
        }
        let (shape, values, rg) = {
            let inner = self.inner.borrow();
            let ix = Self::resolve(&inner, x)?;
            let iw = Self::resolve(&inner, w)?;
            let (nx, nw) = (&inner.nodes[ix], &inner.nodes[iw]);
            if nx.shape.len() != 3 || nw.shape.len() != 3 || nx.shape[1] != nw.shape[1] {
                return Err(TensorError::ShapeMismatch(format!(
                    "conv1d over x {:?}, w {:?}",
                    nx.shape, nw.shape
                )));
            }
            let (batch, in_ch, len) = (nx.shape[0], nx.shape[1], nx.shape[2]);
            let (out_ch, k) = (nw.shape[0], nw.shape[2]);
            if k == 0 || len + 2 * padding < k {
                return Err(TensorError::InvalidArgument(format!(
                    "conv1d kernel {k} does not fit input {len} with padding {padding}"
                )));
            }
            let out_len = (len + 2 * padding - k) / stride + 1;
            let mut values = vec![0.0; batch * out_ch * out_len];
            conv1d_forward(
                &nx.values, &nw.values, &mut values, batch, in_ch, len, out_ch, k, out_len,
                stride, padding,
            );
            (vec![batch, out_ch, out_len], values, nx.requires_grad || nw.requires_grad)
        };
        Ok(self.push(Op::Conv1d { x: x.index, w: w.index, stride, padding }, shape, values, rg))
    }

    /// Per-channel affine `x * gamma[c] + beta[c]` for `x: [batch, ch, len]`.
    pub fn scale_shift(&self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (shape, values, rg) = {
            let inner = self.inner.borrow();
            let ix = Self::resolve(&inner, x)?;
            let ig = Self::resolve(&inner, gamma)?;
            let ib = Self::resolve(&inner, beta)?;
            let (nx, ng, nb) = (&inner.nodes[ix], &inner.nodes[ig], &inner.nodes[ib]);
            if nx.shape.len() != 3
                || ng.shape != [nx.shape[1]]
                || nb.shape != [nx.shape[1]]
            {
                return Err(TensorError::ShapeMismatch(format!(
                    "scale_shift over x {:?}, gamma {:?}, beta {:?}",
                    nx.shape, ng.shape, nb.shape
                )));
            }
            let (batch, ch, len) = (nx.shape[0], nx.shape[1], nx.shape[2]);
            let mut values = vec![0.0; nx.values.len()];
            for b in 0..batch {
                for c in 0..ch {
                    let off = (b * ch + c) * len;
                    let (g, s) = (ng.values[c], nb.values[c]);
                    for l in 0..len {
                        values[off + l] = nx.values[off + l] * g + s;
                    }
                }
            }
            let rg = nx.requires_grad || ng.requires_grad || nb.requires_grad;
            (nx.shape.clone(), values, rg)
        };
        Ok(self.push(
            Op::ScaleShift { x: x.index, gamma: gamma.index, beta: beta.index },
            shape,
            values,
            rg,
        ))
    }

    /// Mean over the time axis: `[batch, ch, len] -> [batch, ch]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var, TensorError> {
        let (shape, values, rg) = {
            let inner = self.inner.borrow();
            let ix = Self::resolve(&inner, x)?;
            let nx = &inner.nodes[ix];
            if nx.shape.len() != 3 || nx.shape[2] == 0 {
                return Err(TensorError::ShapeMismatch(format!(
                    "global_avg_pool over {:?}",
                    nx.shape
                )));
            }
            let (batch, ch, len) = (nx.shape[0], nx.shape[1], nx.shape[2]);
            let mut values = vec![0.0; batch * ch];
            for (i, out) in values.iter_mut().enumerate() {
                let off = i * len;
                *out = nx.values[off..off + len].iter().sum::<f64>() / len as f64;
            }
            (vec![batch, ch], values, nx.requires_grad)
        };
        Ok(self.push(Op::GlobalAvgPool(x.index), shape, values, rg))
    }

    /// Temperature softmax over the last axis of a vector or row-major matrix.
    pub fn softmax_temperature(&self, x: Var, tau: f64) -> Result<Var, TensorError> {
        let (shape, values, rg) = {
            let inner = self.inner.borrow();
            let ix = Self::resolve(&inner, x)?;
            let nx = &inner.nodes[ix];
            let cols = row_width(&nx.shape)?;
            let mut values = Vec::with_capacity(nx.values.len());
            for row in nx.values.chunks_exact(cols) {
                values.extend(functional::softmax_temperature(row, tau)?);
            }
            (nx.shape.clone(), values, nx.requires_grad)
        };
        Ok(self.push(Op::SoftmaxTemp { x: x.index, tau }, shape, values, rg))
    }

    /// Mean cross-entropy of integer labels under row-wise softmax of logits.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (values, rg) = {
            let inner = self.inner.borrow();
            let il = Self::resolve(&inner, logits)?;
            let nl = &inner.nodes[il];
            if nl.shape.len() != 2 || nl.shape[0] != labels.len() {
                return Err(TensorError::ShapeMismatch(format!(
                    "cross_entropy over logits {:?} and {} labels",
                    nl.shape,
                    labels.len()
                )));
            }
            let loss = functional::cross_entropy_mean(&nl.values, nl.shape[1], labels)?;
            if !loss.is_finite() {
                return Err(TensorError::NonFinite("cross_entropy output"));
            }
            (vec![loss], nl.requires_grad)
        };
        Ok(self.push(
            Op::CrossEntropy { logits: logits.index, labels: labels.to_vec() },
            vec![],
            values,
            rg,
        ))
    }

    /// KL divergence of matching distributions; matrices average over rows.
    pub fn kl_divergence(&self, p: Var, q: Var) -> Result<Var, TensorError> {
        let (values, rg) = {
            let inner = self.inner.borrow();
            let ip = Self::resolve(&inner, p)?;
            let iq = Self::resolve(&inner, q)?;
            let (np, nq) = (&inner.nodes[ip], &inner.nodes[iq]);
            if np.shape != nq.shape {
                return Err(TensorError::ShapeMismatch(format!(
                    "kl_divergence over {:?} and {:?}",
                    np.shape, nq.shape
                )));
            }
            let cols = row_width(&np.shape)?;
            let rows = np.values.len() / cols;
            let mut total = 0.0;
            for (prow, qrow) in
                np.values.chunks_exact(cols).zip(nq.values.chunks_exact(cols))
            {
                total += functional::kl_divergence(prow, qrow)?;
            }
            total /= rows as f64;
            if !total.is_finite() {
                return Err(TensorError::NonFinite("kl_divergence output"));
            }
            (vec![total], np.requires_grad || nq.requires_grad)
        };
        Ok(self.push(Op::KlDiv { p: p.index, q: q.index }, vec![], values, rg))
    }

    /// Smooth L1 between equally shaped tensors, averaged over all elements.
    pub fn smooth_l1(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (values, rg) = {
            let inner = self.inner.borrow();
            let ia = Self::resolve(&inner, a)?;
            let ib = Self::resolve(&inner, b)?;
            let (na, nb) = (&inner.nodes[ia], &inner.nodes[ib]);
            if na.shape != nb.shape {
                return Err(TensorError::ShapeMismatch(format!(
                    "smooth_l1 over {:?} and {:?}",
                    na.shape, nb.shape
                )));
            }
            let loss = functional::smooth_l1(&na.values, &nb.values)?;
            (vec![loss], na.requires_grad || nb.requires_grad)
        };
        Ok(self.push(Op::SmoothL1 { a: a.index, b: b.index }, vec![], values, rg))
    }

    /// Mean over every element, producing a scalar.
    pub fn mean(&self, x: Var) -> Result<Var, TensorError> {
        let (values, rg) = {
            let inner = self.inner.borrow();
            let ix = Self::resolve(&inner, x)?;
            let nx = &inner.nodes[ix];
            if nx.values.is_empty() {
                return Err(TensorError::ShapeMismatch("mean of empty tensor".into()));
            }
            let m = nx.values.iter().sum::<f64>() / nx.values.len() as f64;
            (vec![m], nx.requires_grad)
        };
        Ok(self.push(Op::Mean(x.index), vec![], values, rg))
    }

    /// Reinterprets the flat values under a new shape of equal size.
    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let (values, rg) = {
            let inner = self.inner.borrow();
            let ix = Self::resolve(&inner, x)?;
            let nx = &inner.nodes[ix];
            if shape.iter().product::<usize>() != nx.values.len() {
                return Err(TensorError::ShapeMismatch(format!(
                    "reshape {:?} to {:?}",
                    nx.shape, shape
                )));
            }
            (nx.values.clone(), nx.requires_grad)
        };
        Ok(self.push(Op::Reshape(x.index), shape, values, rg))
    }

    /// Shape of a node without cloning its values.
    pub fn shape_of(&self, v: Var) -> Result<Vec<usize>, TensorError> {
        let inner = self.inner.borrow();
        let idx = Self::resolve(&inner, v)?;
        Ok(inner.nodes[idx].shape.clone())
    }

    /// Picks one element by flat index, producing a scalar.
    pub fn select(&self, x: Var, flat_index: usize) -> Result<Var, TensorError> {
        let (values, rg) = {
            let inner = self.inner.borrow();
            let ix = Self::resolve(&inner, x)?;
            let nx = &inner.nodes[ix];
            if flat_index >= nx.values.len() {
                return Err(TensorError::InvalidArgument(format!(
                    "select index {flat_index} out of {} elements",
                    nx.values.len()
                )));
            }
            (vec![nx.values[flat_index]], nx.requires_grad)
        };
        Ok(self.push(Op::Select { x: x.index, flat_index }, vec![], values, rg))
    }

    /// Stacks scalar nodes into a vector.
    pub fn concat_scalars(&self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::InvalidArgument("concat_scalars of nothing".into()));
        }
        let (parents, values, rg) = {
            let inner = self.inner.borrow();
            let mut parents = Vec::with_capacity(xs.len());
            let mut values = Vec::with_capacity(xs.len());
            let mut rg = false;
            for &v in xs {
                let i = Self::resolve(&inner, v)?;
                let n = &inner.nodes[i];
                if n.values.len() != 1 {
                    return Err(TensorError::ShapeMismatch(format!(
                        "concat_scalars over non-scalar {:?}",
                        n.shape
                    )));
                }
                parents.push(i);
                values.push(n.values[0]);
                rg |= n.requires_grad;
            }
            (parents, values, rg)
        };
        let shape = vec![values.len()];
        Ok(self.push(Op::ConcatScalars(parents), shape, values, rg))
    }

    /// Contiguous slice of the flattened values, producing a vector.
    pub fn slice_flat(&self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (values, rg) = {
            let inner = self.inner.borrow();
            let ix = Self::resolve(&inner, x)?;
            let nx = &inner.nodes[ix];
            if len == 0 || start + len > nx.values.len() {
                return Err(TensorError::InvalidArgument(format!(
                    "slice_flat [{start}, {start}+{len}) out of {} elements",
                    nx.values.len()
                )));
            }
            (nx.values[start..start + len].to_vec(), nx.requires_grad)
        };
        Ok(self.push(Op::SliceFlat { x: x.index, start, len }, vec![len], values, rg))
    }

    /// Column block `[rows, len]` of a row-major matrix.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (shape, values, rg) = {
            let inner = self.inner.borrow();
            let ix = Self::resolve(&inner, x)?;
            let nx = &inner.nodes[ix];
            if nx.shape.len() != 2 || len == 0 || start + len > nx.shape[1] {
                return Err(TensorError::ShapeMismatch(format!(
                    "slice_cols [{start}, {start}+{len}) of {:?}",
                    nx.shape
                )));
            }
            let (rows, cols) = (nx.shape[0], nx.shape[1]);
            let mut values = Vec::with_capacity(rows * len);
            for r in 0..rows {
                values.extend_from_slice(&nx.values[r * cols + start..r * cols + start + len]);
            }
            (vec![rows, len], values, nx.requires_grad)
        };
        Ok(self.push(Op::SliceCols { x: x.index, start, len }, shape, values, rg))
    }

    /// One time step of `[batch, ch, len]`, producing `[batch, ch]`.
    pub fn time_step(&self, x: Var, t: usize) -> Result<Var, TensorError> {
        let (shape, values, rg) = {
            let inner = self.inner.borrow();
            let ix = Self::resolve(&inner, x)?;
            let nx = &inner.nodes[ix];
            if nx.shape.len() != 3 || t >= nx.shape[2] {
                return Err(TensorError::ShapeMismatch(format!(
                    "time_step {t} of {:?}",
                    nx.shape
                )));
            }
            let (batch, ch, len) = (nx.shape[0], nx.shape[1], nx.shape[2]);
            let mut values = Vec::with_capacity(batch * ch);
            for bc in 0..batch * ch {
                values.push(nx.values[bc * len + t]);
            }
            (vec![batch, ch], values, nx.requires_grad)
        };
        Ok(self.push(Op::TimeStep { x: x.index, t }, shape, values, rg))
    }

    /// Reverse sweep from a scalar loss; leaf gradients become available via
    /// [`Tape::grad`]. Running twice without recording new ops is an error.
    pub fn backward(&self, loss: Var) -> Result<(), TensorError> {
        let mut inner = self.inner.borrow_mut();
        let root = Self::resolve(&inner, loss)?;
        if inner.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        {
            let node = &inner.nodes[root];
            if node.values.len() != 1 {
                return Err(TensorError::NonScalarLoss(node.shape.clone()));
            }
            if !node.requires_grad {
                return Err(TensorError::NoGradPath);
            }
        }
        let inner = &mut *inner;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &nodes[i].op {
                Op::Leaf => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::NonFinite("backward gradient"));
                    }
                    leaf_grads[i] = Some(g);
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, nodes, *a, |d| axpy(d, 1.0, &g));
                    accumulate(&mut grads, nodes, *b, |d| axpy(d, 1.0, &g));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, nodes, *a, |d| axpy(d, 1.0, &g));
                    accumulate(&mut grads, nodes, *b, |d| axpy(d, -1.0, &g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].values, &nodes[*b].values);
                    accumulate(&mut grads, nodes, *a, |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * vb[j];
                        }
                    });
                    accumulate(&mut grads, nodes, *b, |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * va[j];
                        }
                    });
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads, nodes, *a, |d| axpy(d, *factor, &g));
                }
                Op::DivByScalar { x, divisor } => {
                    let d0 = nodes[*divisor].values[0];
                    let y = &nodes[i].values;
                    accumulate(&mut grads, nodes, *x, |d| axpy(d, 1.0 / d0, &g));
                    accumulate(&mut grads, nodes, *divisor, |d| {
                        let mut dot = 0.0;
                        for j in 0..g.len() {
                            dot += g[j] * y[j];
                        }
                        d[0] -= dot / d0;
                    });
                }
                Op::ClampMin(a, floor) => {
                    let va = &nodes[*a].values;
                    accumulate(&mut grads, nodes, *a, |d| {
                        for j in 0..d.len() {
                            if va[j] >= *floor {
                                d[j] += g[j];
                            }
                        }
                    });
                }
                Op::Relu(a) => {
                    let va = &nodes[*a].values;
                    accumulate(&mut grads, nodes, *a, |d| {
                        for j in 0..d.len() {
                            if va[j] > 0.0 {
                                d[j] += g[j];
                            }
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = &nodes[i].values;
                    accumulate(&mut grads, nodes, *a, |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * y[j] * (1.0 - y[j]);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = &nodes[i].values;
                    accumulate(&mut grads, nodes, *a, |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * (1.0 - y[j] * y[j]);
                        }
                    });
                }
                Op::Abs(a) => {
                    let va = &nodes[*a].values;
                    accumulate(&mut grads, nodes, *a, |d| {
                        for j in 0..d.len() {
                            if va[j] > 0.0 {
                                d[j] += g[j];
                            } else if va[j] < 0.0 {
                                d[j] -= g[j];
                            }
                        }
                    });
                }
                Op::Linear { x, w, b } => {
                    let (rows, in_dim) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                    let out_dim = nodes[*w].shape[0];
                    let (vx, vw) = (&nodes[*x].values, &nodes[*w].values);
                    accumulate(&mut grads, nodes, *x, |d| {
                        for r in 0..rows {
                            let grow = &g[r * out_dim..(r + 1) * out_dim];
                            let drow = &mut d[r * in_dim..(r + 1) * in_dim];
                            for (o, &go) in grow.iter().enumerate() {
                                let wrow = &vw[o * in_dim..(o + 1) * in_dim];
                                axpy(drow, go, wrow);
                            }
                        }
                    });
                    accumulate(&mut grads, nodes, *w, |d| {
                        for r in 0..rows {
                            let grow = &g[r * out_dim..(r + 1) * out_dim];
                            let xrow = &vx[r * in_dim..(r + 1) * in_dim];
                            for (o, &go) in grow.iter().enumerate() {
                                axpy(&mut d[o * in_dim..(o + 1) * in_dim], go, xrow);
                            }
                        }
                    });
                    accumulate(&mut grads, nodes, *b, |d| {
                        for r in 0..rows {
                            axpy(d, 1.0, &g[r * out_dim..(r + 1) * out_dim]);
                        }
                    });
                }
                Op::Conv1d { x, w, stride, padding } => {
                    let (batch, in_ch, len) = {
                        let s = &nodes[*x].shape;
                        (s[0], s[1], s[2])
                    };
                    let (out_ch, k) = (nodes[*w].shape[0], nodes[*w].shape[2]);
                    let out_len = nodes[i].shape[2];
                    let (vx, vw) = (&nodes[*x].values, &nodes[*w].values);
                    accumulate(&mut grads, nodes, *x, |d| {
                        conv1d_backward_input(
                            &g, vw, d, batch, in_ch, len, out_ch, k, out_len, *stride, *padding,
                        );
                    });
                    accumulate(&mut grads, nodes, *w, |d| {
                        conv1d_backward_weight(
                            &g, vx, d, batch, in_ch, len, out_ch, k, out_len, *stride, *padding,
                        );
                    });
                }
                Op::ScaleShift { x, gamma, beta } => {
                    let (batch, ch, len) = {
                        let s = &nodes[*x].shape;
                        (s[0], s[1], s[2])
                    };
                    let (vx, vg) = (&nodes[*x].values, &nodes[*gamma].values);
                    accumulate(&mut grads, nodes, *x, |d| {
                        for b in 0..batch {
                            for c in 0..ch {
                                let off = (b * ch + c) * len;
                                axpy(&mut d[off..off + len], vg[c], &g[off..off + len]);
                            }
                        }
                    });
                    accumulate(&mut grads, nodes, *gamma, |d| {
                        for b in 0..batch {
                            for c in 0..ch {
                                let off = (b * ch + c) * len;
                                let mut acc = 0.0;
                                for l in 0..len {
                                    acc += g[off + l] * vx[off + l];
                                }
                                d[c] += acc;
                            }
                        }
                    });
                    accumulate(&mut grads, nodes, *beta, |d| {
                        for b in 0..batch {
                            for c in 0..ch {
                                let off = (b * ch + c) * len;
                                d[c] += g[off..off + len].iter().sum::<f64>();
                            }
                        }
                    });
                }
                Op::GlobalAvgPool(a) => {
                    let len = nodes[*a].shape[2];
                    accumulate(&mut grads, nodes, *a, |d| {
                        for (bc, &gv) in g.iter().enumerate() {
                            let off = bc * len;
                            let share = gv / len as f64;
                            for l in 0..len {
                                d[off + l] += share;
                            }
                        }
                    });
                }
                Op::SoftmaxTemp { x, tau } => {
                    let y = &nodes[i].values;
                    let cols = *nodes[i].shape.last().unwrap_or(&nodes[i].values.len());
                    accumulate(&mut grads, nodes, *x, |d| {
                        for r in 0..y.len() / cols {
                            let off = r * cols;
                            let (yr, gr) = (&y[off..off + cols], &g[off..off + cols]);
                            let mut dot = 0.0;
                            for j in 0..cols {
                                dot += gr[j] * yr[j];
                            }
                            for j in 0..cols {
                                d[off + j] += yr[j] * (gr[j] - dot) / tau;
                            }
                        }
                    });
                }
                Op::CrossEntropy { logits, labels } => {
                    let cols = nodes[*logits].shape[1];
                    let vz = &nodes[*logits].values;
                    let scale = g[0] / labels.len() as f64;
                    let probs: Vec<Vec<f64>> = vz
                        .chunks_exact(cols)
                        .map(|row| functional::softmax_temperature(row, 1.0))
                        .collect::<Result<_, _>>()?;
                    accumulate(&mut grads, nodes, *logits, |d| {
                        for (r, &label) in labels.iter().enumerate() {
                            let off = r * cols;
                            for j in 0..cols {
                                let target = if j == label { 1.0 } else { 0.0 };
                                d[off + j] += scale * (probs[r][j] - target);
                            }
                        }
                    });
                }
                Op::KlDiv { p, q } => {
                    let (vp, vq) = (&nodes[*p].values, &nodes[*q].values);
                    let cols = row_width(&nodes[*p].shape)?;
                    let rows = vp.len() / cols;
                    let scale = g[0] / rows as f64;
                    accumulate(&mut grads, nodes, *p, |d| {
                        for j in 0..vp.len() {
                            if vp[j] > 0.0 {
                                d[j] += scale * (vp[j].ln() - vq[j].max(PROB_FLOOR).ln() + 1.0);
                            }
                        }
                    });
                    accumulate(&mut grads, nodes, *q, |d| {
                        for j in 0..vq.len() {
                            if vp[j] > 0.0 && vq[j] >= PROB_FLOOR {
                                d[j] -= scale * vp[j] / vq[j];
                            }
                        }
                    });
                }
                Op::SmoothL1 { a, b } => {
                    let (va, vb) = (&nodes[*a].values, &nodes[*b].values);
                    let scale = g[0] / va.len() as f64;
                    let slope = |j: usize| {
                        let d = va[j] - vb[j];
                        if d.abs() < 1.0 {
                            d
                        } else {
                            d.signum()
                        }
                    };
                    accumulate(&mut grads, nodes, *a, |dst| {
                        for j in 0..va.len() {
                            dst[j] += scale * slope(j);
                        }
                    });
                    accumulate(&mut grads, nodes, *b, |dst| {
                        for j in 0..va.len() {
                            dst[j] -= scale * slope(j);
                        }
                    });
                }
                Op::Mean(a) => {
                    let share = g[0] / nodes[*a].values.len() as f64;
                    accumulate(&mut grads, nodes, *a, |d| {
                        for v in d.iter_mut() {
                            *v += share;
                        }
                    });
                }
                Op::Reshape(a) => {
                    accumulate(&mut grads, nodes, *a, |d| axpy(d, 1.0, &g));
                }
                Op::Select { x, flat_index } => {
                    accumulate(&mut grads, nodes, *x, |d| d[*flat_index] += g[0]);
                }
                Op::ConcatScalars(parents) => {
                    for (j, &p) in parents.iter().enumerate() {
                        accumulate(&mut grads, nodes, p, |d| d[0] += g[j]);
                    }
                }
                Op::SliceFlat { x, start, len } => {
                    accumulate(&mut grads, nodes, *x, |d| {
                        axpy(&mut d[*start..*start + *len], 1.0, &g);
                    });
                }
                Op::SliceCols { x, start, len } => {
                    let cols = nodes[*x].shape[1];
                    let rows = nodes[*x].shape[0];
                    accumulate(&mut grads, nodes, *x, |d| {
                        for r in 0..rows {
                            let src = &g[r * len..(r + 1) * len];
                            axpy(&mut d[r * cols + start..r * cols + start + len], 1.0, src);
                        }
                    });
                }
                Op::TimeStep { x, t } => {
                    let len = nodes[*x].shape[2];
                    accumulate(&mut grads, nodes, *x, |d| {
                        for (bc, &gv) in g.iter().enumerate() {
                            d[bc * len + t] += gv;
                        }
                    });
                }
            }
        }
        inner.leaf_grads = leaf_grads;
        inner.backward_done = true;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to a leaf.
    ///
    /// Leaves untouched by the loss report zeros; non-leaf or frozen nodes are
    /// rejected.
    pub fn grad(&self, v: Var) -> Result<Vec<f64>, TensorError> {
        let inner = self.inner.borrow();
        let idx = Self::resolve(&inner, v)?;
        if !inner.backward_done {
            return Err(TensorError::InvalidArgument(
                "gradients requested before backward".into(),
            ));
        }
        let node = &inner.nodes[idx];
        if !matches!(node.op, Op::Leaf) || !node.requires_grad {
            return Err(TensorError::InvalidArgument(format!(
                "node #{idx} is not a differentiable leaf"
            )));
        }
        Ok(match &inner.leaf_grads[idx] {
            Some(g) => g.clone(),
            None => vec![0.0; node.values.len()],
        })
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Width of the last axis; empty shapes (scalars) count as width 1.
fn row_width(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.len() > 2 {
        return Err(TensorError::ShapeMismatch(format!(
            "expected vector or matrix, got {shape:?}"
        )));
    }
    let w = *shape.last().unwrap_or(&1);
    if w == 0 {
        return Err(TensorError::ShapeMismatch("zero-width rows".into()));
    }
    Ok(w)
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Runs `f` on the gradient buffer of `idx` if that node participates in the
/// backward pass, allocating the buffer on first touch.
fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    idx: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[idx].requires_grad {
        return;
    }
    let buf = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].values.len()]);
    f(buf);
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    batch: usize,
    in_ch: usize,
    len: usize,
    out_ch: usize,
    k: usize,
    out_len: usize,
    stride: usize,
    padding: usize,
) {
    for b in 0..batch {
        for oc in 0..out_ch {
            let orow = &mut out[(b * out_ch + oc) * out_len..][..out_len];
            for ic in 0..in_ch {
                let xrow = &x[(b * in_ch + ic) * len..][..len];
                let wrow = &w[(oc * in_ch + ic) * k..][..k];
                if stride == 1 {
                    for (ki, &wk) in wrow.iter().enumerate() {
                        let lo = padding.saturating_sub(ki);
                        let hi = (len + padding).saturating_sub(ki).min(out_len);
                        if lo >= hi {
                            continue;
                        }
                        let src = &xrow[lo + ki - padding..hi + ki - padding];
                        let dst = &mut orow[lo..hi];
                        for t in 0..dst.len() {
                            dst[t] += wk * src[t];
                        }
                    }
                } else {
                    for (o, out_v) in orow.iter_mut().enumerate() {
                        let base = o * stride;
                        let mut acc = 0.0;
                        for (ki, &wk) in wrow.iter().enumerate() {
                            let j = base + ki;
                            if j >= padding && j - padding < len {
                                acc += wk * xrow[j - padding];
                            }
                        }
                        *out_v += acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward_input(
    g: &[f64],
    w: &[f64],
    dx: &mut [f64],
    batch: usize,
    in_ch: usize,
    len: usize,
    out_ch: usize,
    k: usize,
    out_len: usize,
    stride: usize,
    padding: usize,
) {
    for b in 0..batch {
        for oc in 0..out_ch {
            let grow = &g[(b * out_ch + oc) * out_len..][..out_len];
            for ic in 0..in_ch {
                let drow = &mut dx[(b * in_ch + ic) * len..][..len];
                let wrow = &w[(oc * in_ch + ic) * k..][..k];
                if stride == 1 {
                    for (ki, &wk) in wrow.iter().enumerate() {
                        let jlo = ki.saturating_sub(padding);
                        let jhi = (out_len + ki).saturating_sub(padding).min(len);
                        if jlo >= jhi {
                            continue;
                        }
                        let src = &grow[jlo + padding - ki..jhi + padding - ki];
                        let dst = &mut drow[jlo..jhi];
                        for t in 0..dst.len() {
                            dst[t] += wk * src[t];
                        }
                    }
                } else {
                    for (o, &gv) in grow.iter().enumerate() {
                        let base = o * stride;
                        for (ki, &wk) in wrow.iter().enumerate() {
                            let j = base + ki;
                            if j >= padding && j - padding < len {
                                drow[j - padding] += wk * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward_weight(
    g: &[f64],
    x: &[f64],
    dw: &mut [f64],
    batch: usize,
    in_ch: usize,
    len: usize,
    out_ch: usize,
    k: usize,
    out_len: usize,
    stride: usize,
    padding: usize,
) {
    for b in 0..batch {
        for oc in 0..out_ch {
            let grow = &g[(b * out_ch + oc) * out_len..][..out_len];
            for ic in 0..in_ch {
                let xrow = &x[(b * in_ch + ic) * len..][..len];
                let wrow = &mut dw[(oc * in_ch + ic) * k..][..k];
                if stride == 1 {
                    for (ki, wk) in wrow.iter_mut().enumerate() {
                        let lo = padding.saturating_sub(ki);
                        let hi = (len + padding).saturating_sub(ki).min(out_len);
                        if lo >= hi {
                            continue;
                        }
                        let xs = &xrow[lo + ki - padding..hi + ki - padding];
                        let gs = &grow[lo..hi];
                        let mut acc = 0.0;
                        for t in 0..gs.len() {
                            acc += gs[t] * xs[t];
                        }
                        *wk += acc;
                    }
                } else {
                    for (o, &gv) in grow.iter().enumerate() {
                        let base = o * stride;
                        for (ki, wk) in wrow.iter_mut().enumerate() {
                            let j = base + ki;
                            if j >= padding && j - padding < len {
                                *wk += gv * xrow[j - padding];
                            }
                        }
                    }
                }
            }
        }
    }
}
