//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! A [`GradTape`] records a DAG of operations over [`NdTensor`] values.
//! Tensors returned by tape methods carry a link (tape tag + node index)
//! back to the node that produced them; feeding a tensor from one tape into
//! another is an error, not silent garbage. Untracked tensors passed as
//! operands are registered automatically as constants.
//!
//! [`GradTape::backprop`] walks the recorded nodes in reverse from a scalar
//! loss and returns the gradients of every *trainable* leaf (registered with
//! [`GradTape::param`]) that the loss actually depends on. The tape is not
//! consumed: several losses can be differentiated against one recorded graph.
//!
//! Elementwise binary ops accept either two same-shaped operands or one
//! tensor and one single-element tensor (scalar broadcast). There is no
//! general broadcasting; the model code never needs it.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, SanmError};
use crate::numerics::tensor::{
    matmul_into, matmul_nt_into, matmul_tn_into, rank2, GradRef, NdTensor,
};

static TAPE_TAGS: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
enum Op {
    /// Input node. `trainable` marks leaves whose gradients are exported.
    Leaf { trainable: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddConst(usize),
    Scale(usize, f64),
    /// `[m,k] x [k,n]`
    Matmul(usize, usize),
    /// `[m,k] x [n,k]^T`
    MatmulNt(usize, usize),
    /// Row-broadcast add: `[t,d] + [d]`.
    AddRow(usize, usize),
    /// Copy one row of a rank-2 tensor to shape `[1,d]`.
    SelectRow(usize, usize),
    /// Stack rank-2 tensors with equal column counts along rows.
    ConcatRows(Vec<usize>),
    /// Take columns `start..start+len` of a rank-2 tensor.
    SliceCols { src: usize, start: usize, len: usize },
    /// Stack rank-2 tensors with equal row counts along columns.
    ConcatCols(Vec<usize>),
    Reshape(usize),
    SoftmaxRows(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Gelu(usize),
    Abs(usize),
    SumAll(usize),
    MeanAll(usize),
    /// Population std over all elements, clamped below at `eps`.
    StdAll { src: usize, eps: f64 },
    /// Whole-tensor L2 normalization with an `eps` guard for tiny norms.
    Normalize { src: usize, eps: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
}

/// Gradients of trainable leaves, keyed by tape node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    by_node: HashMap<usize, NdTensor>,
}

impl Gradients {
    /// Gradient for the leaf `handle` was returned from `param`, if the loss
    /// reached it. Detached or constant tensors have no entry.
    pub fn get(&self, handle: &NdTensor) -> Option<&NdTensor> {
        let r = handle.grad_node?;
        if r.tape != self.tape {
            return None;
        }
        self.by_node.get(&r.node)
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    /// Whether no leaf received a gradient.
    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

/// Recording tape for reverse-mode differentiation.
pub struct GradTape {
    tag: u64,
    nodes: Vec<Node>,
    /// Dedup of trainable leaves by buffer identity, so registering the same
    /// weight tensor twice yields one node with accumulated gradients.
    param_nodes: HashMap<usize, usize>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape {
            tag: TAPE_TAGS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Whether the tape has no nodes.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> NdTensor {
        let rc = Rc::new(value);
        let node = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape: shape.clone(),
            value: Rc::clone(&rc),
        });
        NdTensor::tracked(shape, rc, GradRef { tape: self.tag, node })
    }

    /// Register a trainable leaf. Calling twice with the same underlying
    /// buffer returns the same node.
    pub fn param(&mut self, t: &NdTensor) -> NdTensor {
        let key = Rc::as_ptr(t.data_rc()) as usize;
        if let Some(&node) = self.param_nodes.get(&key) {
            return NdTensor::tracked(
                t.shape().to_vec(),
                Rc::clone(&self.nodes[node].value),
                GradRef { tape: self.tag, node },
            );
        }
        let node = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf { trainable: true },
            shape: t.shape().to_vec(),
            value: Rc::clone(t.data_rc()),
        });
        self.param_nodes.insert(key, node);
        NdTensor::tracked(
            t.shape().to_vec(),
            Rc::clone(t.data_rc()),
            GradRef { tape: self.tag, node },
        )
    }

    /// Register a non-trainable leaf (gradients flow through it but are not
    /// exported).
    pub fn constant(&mut self, t: &NdTensor) -> NdTensor {
        let node = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf { trainable: false },
            shape: t.shape().to_vec(),
            value: Rc::clone(t.data_rc()),
        });
        NdTensor::tracked(
            t.shape().to_vec(),
            Rc::clone(t.data_rc()),
            GradRef { tape: self.tag, node },
        )
    }

    /// Node index of an operand, auto-registering untracked tensors as
    /// constants. Tensors tracked by a different tape are rejected.
    fn operand(&mut self, t: &NdTensor) -> Result<usize> {
        match t.grad_node {
            Some(r) if r.tape == self.tag => Ok(r.node),
            Some(_) => Err(SanmError::Graph(
                "operand was recorded on a different tape; re-register it here".into(),
            )),
            None => Ok(self.constant(t).grad_node.unwrap().node),
        }
    }

    fn val(&self, node: usize) -> &[f64] {
        &self.nodes[node].value
    }

    fn shape_of(&self, node: usize) -> &[usize] {
        &self.nodes[node].shape
    }

    // ---- elementwise binary ops (same shape, or scalar broadcast) ----

    fn binary_shape(&mut self, a: &NdTensor, b: &NdTensor, what: &str) -> Result<Vec<usize>> {
        if a.shape() == b.shape() {
            Ok(a.shape().to_vec())
        } else if a.numel() == 1 {
            Ok(b.shape().to_vec())
        } else if b.numel() == 1 {
            Ok(a.shape().to_vec())
        } else {
            Err(SanmError::Shape(format!(
                "{what} needs equal shapes or a single-element operand, got {:?} vs {:?}",
                a.shape(),
                b.shape()
            )))
        }
    }

    fn binary(
        &mut self,
        a: &NdTensor,
        b: &NdTensor,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<NdTensor> {
        let shape = self.binary_shape(a, b, what)?;
        let ia = self.operand(a)?;
        let ib = self.operand(b)?;
        let va = self.val(ia);
        let vb = self.val(ib);
        let out: Vec<f64> = if va.len() == vb.len() {
            va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else if va.len() == 1 {
            vb.iter().map(|&y| f(va[0], y)).collect()
        } else {
            va.iter().map(|&x| f(x, vb[0])).collect()
        };
        Ok(self.push(make(ia, ib), shape, out))
    }

    pub fn add(&mut self, a: &NdTensor, b: &NdTensor) -> Result<NdTensor> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: &NdTensor, b: &NdTensor) -> Result<NdTensor> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: &NdTensor, b: &NdTensor) -> Result<NdTensor> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: &NdTensor, b: &NdTensor) -> Result<NdTensor> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn add_const(&mut self, a: &NdTensor, c: f64) -> Result<NdTensor> {
        let ia = self.operand(a)?;
        let out: Vec<f64> = self.val(ia).iter().map(|&x| x + c).collect();
        Ok(self.push(Op::AddConst(ia), a.shape().to_vec(), out))
    }

    pub fn scale(&mut self, a: &NdTensor, c: f64) -> Result<NdTensor> {
        let ia = self.operand(a)?;
        let out: Vec<f64> = self.val(ia).iter().map(|&x| x * c).collect();
        Ok(self.push(Op::Scale(ia, c), a.shape().to_vec(), out))
    }

    // ---- matrix ops ----

    pub fn matmul(&mut self, a: &NdTensor, b: &NdTensor) -> Result<NdTensor> {
        let (m, k) = rank2(a.shape(), "matmul left operand")?;
        let (k2, n) = rank2(b.shape(), "matmul right operand")?;
        if k != k2 {
            return Err(SanmError::Shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let ia = self.operand(a)?;
        let ib = self.operand(b)?;
        let mut out = vec![0.0; m * n];
        matmul_into(self.val(ia), self.val(ib), m, k, n, &mut out);
        Ok(self.push(Op::Matmul(ia, ib), vec![m, n], out))
    }

    /// `a [m,k] x b[n,k]^T -> [m,n]`, the attention-score shape.
    pub fn matmul_nt(&mut self, a: &NdTensor, b: &NdTensor) -> Result<NdTensor> {
        let (m, k) = rank2(a.shape(), "matmul_nt left operand")?;
        let (n, k2) = rank2(b.shape(), "matmul_nt right operand")?;
        if k != k2 {
            return Err(SanmError::Shape(format!(
                "matmul_nt shared dimensions differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let ia = self.operand(a)?;
        let ib = self.operand(b)?;
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.val(ia), self.val(ib), m, k, n, &mut out);
        Ok(self.push(Op::MatmulNt(ia, ib), vec![m, n], out))
    }

    /// Add a row vector (`[d]` or `[1,d]`) to every row of `a [t,d]`.
    pub fn add_row(&mut self, a: &NdTensor, row: &NdTensor) -> Result<NdTensor> {
        let (t, d) = rank2(a.shape(), "add_row target")?;
        let cols = match row.shape() {
            [c] => *c,
            [1, c] => *c,
            other => {
                return Err(SanmError::Shape(format!(
                    "add_row vector must be [d] or [1,d], got {other:?}"
                )))
            }
        };
        if cols != d {
            return Err(SanmError::Shape(format!(
                "add_row width mismatch: target {:?}, row has {cols} columns",
                a.shape()
            )));
        }
        let ia = self.operand(a)?;
        let ir = self.operand(row)?;
        let va = self.val(ia);
        let vr = self.val(ir);
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            for c in 0..d {
                out[r * d + c] = va[r * d + c] + vr[c];
            }
        }
        Ok(self.push(Op::AddRow(ia, ir), vec![t, d], out))
    }

    /// Copy row `row` of `a [t,d]` to a `[1,d]` tensor.
    pub fn select_row(&mut self, a: &NdTensor, row: usize) -> Result<NdTensor> {
        let (t, d) = rank2(a.shape(), "select_row source")?;
        if row >= t {
            return Err(SanmError::Shape(format!(
                "select_row index {row} out of range for {t} rows"
            )));
        }
        let ia = self.operand(a)?;
        let out = self.val(ia)[row * d..(row + 1) * d].to_vec();
        Ok(self.push(Op::SelectRow(ia, row), vec![1, d], out))
    }

    /// Stack rank-2 tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[&NdTensor]) -> Result<NdTensor> {
        if parts.is_empty() {
            return Err(SanmError::Shape("concat_rows of zero tensors".into()));
        }
        let (_, d) = rank2(parts[0].shape(), "concat_rows operand")?;
        let mut ids = Vec::with_capacity(parts.len());
        let mut rows = 0usize;
        for p in parts {
            let (r, dp) = rank2(p.shape(), "concat_rows operand")?;
            if dp != d {
                return Err(SanmError::Shape(format!(
                    "concat_rows column mismatch: {d} vs {dp}"
                )));
            }
            rows += r;
            ids.push(self.operand(p)?);
        }
        let mut out = Vec::with_capacity(rows * d);
        for &id in &ids {
            out.extend_from_slice(self.val(id));
        }
        Ok(self.push(Op::ConcatRows(ids), vec![rows, d], out))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: &NdTensor, start: usize, len: usize) -> Result<NdTensor> {
        let (t, d) = rank2(a.shape(), "slice_cols source")?;
        if len == 0 || start + len > d {
            return Err(SanmError::Shape(format!(
                "slice_cols [{start}, {}) out of range for {d} columns",
                start + len
            )));
        }
        let ia = self.operand(a)?;
        let va = self.val(ia);
        let mut out = Vec::with_capacity(t * len);
        for r in 0..t {
            out.extend_from_slice(&va[r * d + start..r * d + start + len]);
        }
        Ok(self.push(Op::SliceCols { src: ia, start, len }, vec![t, len], out))
    }

    /// Stack rank-2 tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[&NdTensor]) -> Result<NdTensor> {
        if parts.is_empty() {
            return Err(SanmError::Shape("concat_cols of zero tensors".into()));
        }
        let (t, _) = rank2(parts[0].shape(), "concat_cols operand")?;
        let mut ids = Vec::with_capacity(parts.len());
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            let (tp, c) = rank2(p.shape(), "concat_cols operand")?;
            if tp != t {
                return Err(SanmError::Shape(format!(
                    "concat_cols row mismatch: {t} vs {tp}"
                )));
            }
            total += c;
            widths.push(c);
            ids.push(self.operand(p)?);
        }
        let mut out = vec![0.0; t * total];
        let mut offset = 0usize;
        for (&id, &w) in ids.iter().zip(widths.iter()) {
            let v = self.val(id);
            for r in 0..t {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(Op::ConcatCols(ids), vec![t, total], out))
    }

    /// Same elements under a new shape.
    pub fn reshape(&mut self, a: &NdTensor, shape: &[usize]) -> Result<NdTensor> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(SanmError::Shape(format!(
                "cannot reshape {:?} to {:?}",
                a.shape(),
                shape
            )));
        }
        let ia = self.operand(a)?;
        let out = self.val(ia).to_vec();
        Ok(self.push(Op::Reshape(ia), shape.to_vec(), out))
    }

    // ---- nonlinearities ----

    fn unary(
        &mut self,
        a: &NdTensor,
        f: impl Fn(f64) -> f64,
        make: impl Fn(usize) -> Op,
    ) -> Result<NdTensor> {
        let ia = self.operand(a)?;
        let out: Vec<f64> = self.val(ia).iter().map(|&x| f(x)).collect();
        Ok(self.push(make(ia), a.shape().to_vec(), out))
    }

    pub fn relu(&mut self, a: &NdTensor) -> Result<NdTensor> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn tanh(&mut self, a: &NdTensor) -> Result<NdTensor> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: &NdTensor) -> Result<NdTensor> {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    pub fn gelu(&mut self, a: &NdTensor) -> Result<NdTensor> {
        self.unary(a, gelu_value, Op::Gelu)
    }

    pub fn abs(&mut self, a: &NdTensor) -> Result<NdTensor> {
        self.unary(a, f64::abs, Op::Abs)
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: &NdTensor) -> Result<NdTensor> {
        let (t, d) = rank2(a.shape(), "softmax_rows input")?;
        let ia = self.operand(a)?;
        let va = self.val(ia);
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            let row = &va[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(row.iter()) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in &mut out[r * d..(r + 1) * d] {
                *o /= z;
            }
        }
        Ok(self.push(Op::SoftmaxRows(ia), vec![t, d], out))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: &NdTensor) -> Result<NdTensor> {
        let ia = self.operand(a)?;
        let s: f64 = self.val(ia).iter().sum();
        Ok(self.push(Op::SumAll(ia), vec![1], vec![s]))
    }

    pub fn mean_all(&mut self, a: &NdTensor) -> Result<NdTensor> {
        if a.numel() == 0 {
            return Err(SanmError::Shape("mean of an empty tensor".into()));
        }
        let ia = self.operand(a)?;
        let v = self.val(ia);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(Op::MeanAll(ia), vec![1], vec![m]))
    }

    /// Population standard deviation over all elements, clamped below at
    /// `eps` so downstream divisions stay finite. When the clamp is active
    /// the gradient is exactly zero.
    pub fn std_all(&mut self, a: &NdTensor, eps: f64) -> Result<NdTensor> {
        if a.numel() == 0 {
            return Err(SanmError::Shape("std of an empty tensor".into()));
        }
        if !(eps > 0.0) {
            return Err(SanmError::Config(format!(
                "std clamp must be positive, got {eps}"
            )));
        }
        let ia = self.operand(a)?;
        let v = self.val(ia);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = (v.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n).max(0.0);
        let std = var.sqrt().max(eps);
        Ok(self.push(Op::StdAll { src: ia, eps }, vec![1], vec![std]))
    }

    /// Whole-tensor L2 normalization: `x / max(||x||, eps)` in effect, with
    /// the exact unit-sphere Jacobian when the norm is above `eps`.
    pub fn normalize(&mut self, a: &NdTensor, eps: f64) -> Result<NdTensor> {
        if !(eps > 0.0) {
            return Err(SanmError::Config(format!(
                "normalize guard must be positive, got {eps}"
            )));
        }
        let ia = self.operand(a)?;
        let v = self.val(ia);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = if norm > eps { norm } else { eps };
        let out: Vec<f64> = v.iter().map(|&x| x / denom).collect();
        Ok(self.push(Op::Normalize { src: ia, eps }, a.shape().to_vec(), out))
    }

    // ---- backward pass ----

    /// Gradients of `loss` (a single-element tensor recorded on this tape)
    /// with respect to every trainable leaf on its dependency path. The tape
    /// is unchanged; call again with another loss if needed.
    pub fn backprop(&self, loss: &NdTensor) -> Result<Gradients> {
        let loss_node = match loss.grad_node {
            Some(r) if r.tape == self.tag => r.node,
            Some(_) => {
                return Err(SanmError::Graph(
                    "loss was recorded on a different tape".into(),
                ))
            }
            None => {
                return Err(SanmError::Graph(
                    "loss is not tracked by any tape; build it with tape ops".into(),
                ))
            }
        };
        if loss.numel() != 1 {
            return Err(SanmError::Graph(format!(
                "backprop needs a single-element loss, got shape {:?}",
                loss.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_node] = Some(vec![1.0]);

        for i in (0..=loss_node).rev() {
            let Some(g) = grads[i].clone() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    self.acc_broadcast(&mut grads, *a, &g, 1.0);
                    self.acc_broadcast(&mut grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.acc_broadcast(&mut grads, *a, &g, 1.0);
                    self.acc_broadcast(&mut grads, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let va = self.val(*a).to_vec();
                    let vb = self.val(*b).to_vec();
                    self.acc_weighted(&mut grads, *a, &g, &vb);
                    self.acc_weighted(&mut grads, *b, &g, &va);
                }
                Op::Div(a, b) => {
                    let va = self.val(*a).to_vec();
                    let vb = self.val(*b).to_vec();
                    // d(x/y)/dx = 1/y
                    let inv_b: Vec<f64> = vb.iter().map(|&y| 1.0 / y).collect();
                    self.acc_weighted(&mut grads, *a, &g, &inv_b);
                    // d(x/y)/dy = -x/y^2, evaluated with broadcast semantics.
                    let n = g.len();
                    let coef: Vec<f64> = (0..n)
                        .map(|j| {
                            let x = va[if va.len() == 1 { 0 } else { j }];
                            let y = vb[if vb.len() == 1 { 0 } else { j }];
                            -x / (y * y)
                        })
                        .collect();
                    self.acc_weighted(&mut grads, *b, &g, &coef);
                }
                Op::AddConst(a) => {
                    self.acc_slice(&mut grads, *a, &g);
                }
                Op::Scale(a, c) => {
                    let scaled: Vec<f64> = g.iter().map(|&x| x * c).collect();
                    self.acc_slice(&mut grads, *a, &scaled);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.shape_of(*a)[0], self.shape_of(*a)[1]);
                    let n = self.shape_of(*b)[1];
                    // dA = G x B^T, dB = A^T x G
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(&g, self.val(*b), m, n, k, &mut da);
                    self.acc_slice(&mut grads, *a, &da);
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(self.val(*a), &g, m, k, n, &mut db);
                    self.acc_slice(&mut grads, *b, &db);
                }
                Op::MatmulNt(a, b) => {
                    let (m, k) = (self.shape_of(*a)[0], self.shape_of(*a)[1]);
                    let n = self.shape_of(*b)[0];
                    // out = A x B^T: dA = G x B, dB = G^T x A
                    let mut da = vec![0.0; m * k];
                    matmul_into(&g, self.val(*b), m, n, k, &mut da);
                    self.acc_slice(&mut grads, *a, &da);
                    let mut db = vec![0.0; n * k];
                    matmul_tn_into(&g, self.val(*a), m, n, k, &mut db);
                    self.acc_slice(&mut grads, *b, &db);
                }
                Op::AddRow(a, r) => {
                    self.acc_slice(&mut grads, *a, &g);
                    let d = self.shape_of(*r).iter().product::<usize>();
                    let t = g.len() / d;
                    let mut dr = vec![0.0; d];
                    for row in 0..t {
                        for c in 0..d {
                            dr[c] += g[row * d + c];
                        }
                    }
                    self.acc_slice(&mut grads, *r, &dr);
                }
                Op::SelectRow(a, row) => {
                    let d = g.len();
                    let buf = Self::buf(&mut grads, *a, self.nodes[*a].value.len());
                    for c in 0..d {
                        buf[row * d + c] += g[c];
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0usize;
                    for &p in parts {
                        let n = self.nodes[p].value.len();
                        self.acc_slice(&mut grads, p, &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::SliceCols { src, start, len } => {
                    let d = self.shape_of(*src)[1];
                    let t = self.shape_of(*src)[0];
                    let buf = Self::buf(&mut grads, *src, t * d);
                    for r in 0..t {
                        for c in 0..*len {
                            buf[r * d + start + c] += g[r * len + c];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|&p| self.shape_of(p)[1]).collect();
                    let total: usize = widths.iter().sum();
                    let t = g.len() / total;
                    let mut offset = 0usize;
                    for (&p, &w) in parts.iter().zip(widths.iter()) {
                        let mut dp = vec![0.0; t * w];
                        for r in 0..t {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.acc_slice(&mut grads, p, &dp);
                        offset += w;
                    }
                }
                Op::Reshape(a) => {
                    self.acc_slice(&mut grads, *a, &g);
                }
                Op::SoftmaxRows(a) => {
                    let d = self.shape_of(*a)[1];
                    let t = self.shape_of(*a)[0];
                    let s = &self.nodes[i].value;
                    let mut da = vec![0.0; t * d];
                    for r in 0..t {
                        let srow = &s[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let dot: f64 = srow.iter().zip(grow.iter()).map(|(&x, &y)| x * y).sum();
                        for c in 0..d {
                            da[r * d + c] = srow[c] * (grow[c] - dot);
                        }
                    }
                    self.acc_slice(&mut grads, *a, &da);
                }
                Op::Relu(a) => {
                    let coef: Vec<f64> = self
                        .val(*a)
                        .iter()
                        .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                        .collect();
                    self.acc_weighted(&mut grads, *a, &g, &coef);
                }
                Op::Tanh(a) => {
                    let coef: Vec<f64> = self.nodes[i].value.iter().map(|&y| 1.0 - y * y).collect();
                    self.acc_weighted(&mut grads, *a, &g, &coef);
                }
                Op::Sigmoid(a) => {
                    let coef: Vec<f64> = self.nodes[i].value.iter().map(|&y| y * (1.0 - y)).collect();
                    self.acc_weighted(&mut grads, *a, &g, &coef);
                }
                Op::Gelu(a) => {
                    let coef: Vec<f64> = self.val(*a).iter().map(|&x| gelu_derivative(x)).collect();
                    self.acc_weighted(&mut grads, *a, &g, &coef);
                }
                Op::Abs(a) => {
                    let coef: Vec<f64> = self
                        .val(*a)
                        .iter()
                        .map(|&x| if x >= 0.0 { 1.0 } else { -1.0 })
                        .collect();
                    self.acc_weighted(&mut grads, *a, &g, &coef);
                }
                Op::SumAll(a) => {
                    let n = self.nodes[*a].value.len();
                    let buf = Self::buf(&mut grads, *a, n);
                    for b in buf.iter_mut() {
                        *b += g[0];
                    }
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[*a].value.len();
                    let per = g[0] / n as f64;
                    let buf = Self::buf(&mut grads, *a, n);
                    for b in buf.iter_mut() {
                        *b += per;
                    }
                }
                Op::StdAll { src, eps } => {
                    let v = self.val(*src).to_vec();
                    let n = v.len() as f64;
                    let mean = v.iter().sum::<f64>() / n;
                    let raw = (v.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n)
                        .max(0.0)
                        .sqrt();
                    if raw > *eps {
                        let buf = Self::buf(&mut grads, *src, v.len());
                        let c = g[0] / (n * raw);
                        for (b, &x) in buf.iter_mut().zip(v.iter()) {
                            *b += c * (x - mean);
                        }
                    }
                    // Clamped: output is the constant eps, gradient is zero.
                }
                Op::Normalize { src, eps } => {
                    let v = self.val(*src).to_vec();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > *eps {
                        let y = &self.nodes[i].value;
                        let dot: f64 = y.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
                        let buf = Self::buf(&mut grads, *src, v.len());
                        for j in 0..v.len() {
                            buf[j] += (g[j] - y[j] * dot) / norm;
                        }
                    } else {
                        let scaled: Vec<f64> = g.iter().map(|&x| x / eps).collect();
                        self.acc_slice(&mut grads, *src, &scaled);
                    }
                }
            }
        }

        let mut by_node = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { trainable: true } = node.op {
                if let Some(buf) = grads[i].take() {
                    by_node.insert(i, NdTensor::from_vec(&node.shape, buf)?);
                }
            }
        }
        Ok(Gradients {
            tape: self.tag,
            by_node,
        })
    }

    fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], idx: usize, numel: usize) -> &'a mut [f64] {
        grads[idx]
            .get_or_insert_with(|| vec![0.0; numel])
            .as_mut_slice()
    }

    /// Accumulate `c * g` into node `idx`, summing when the node is a
    /// single-element tensor receiving a broadcast gradient.
    fn acc_broadcast(&self, grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64], c: f64) {
        let n = self.nodes[idx].value.len();
        let buf = Self::buf(grads, idx, n);
        if n == g.len() {
            for (b, &x) in buf.iter_mut().zip(g.iter()) {
                *b += c * x;
            }
        } else {
            debug_assert_eq!(n, 1);
            buf[0] += c * g.iter().sum::<f64>();
        }
    }

    /// Accumulate `coef * g` elementwise into node `idx` (with scalar
    /// reduction when the node is single-element). `coef` has `g`'s length.
    fn acc_weighted(&self, grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64], coef: &[f64]) {
        let n = self.nodes[idx].value.len();
        let buf = Self::buf(grads, idx, n);
        if n == g.len() {
            if coef.len() == 1 {
                for (b, &x) in buf.iter_mut().zip(g.iter()) {
                    *b += coef[0] * x;
                }
            } else {
                for ((b, &x), &w) in buf.iter_mut().zip(g.iter()).zip(coef.iter()) {
                    *b += w * x;
                }
            }
        } else {
            debug_assert_eq!(n, 1);
            let mut s = 0.0;
            for (j, &x) in g.iter().enumerate() {
                s += x * coef[if coef.len() == 1 { 0 } else { j }];
            }
            buf[0] += s;
        }
    }

    /// Accumulate `g` verbatim into node `idx` (shapes already agree).
    fn acc_slice(&self, grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
        let n = self.nodes[idx].value.len();
        debug_assert_eq!(n, g.len());
        let buf = Self::buf(grads, idx, n);
        for (b, &x) in buf.iter_mut().zip(g.iter()) {
            *b += x;
        }
    }
}

fn gelu_value(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
