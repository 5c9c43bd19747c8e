//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. [`Tape::backward`] replays the nodes in reverse recorded
//! order, propagating adjoints with a per-call buffer and adding the result
//! into the gradient slots of leaves created with [`Tape::leaf`]. Repeated
//! calls accumulate until [`Tape::zero_grad`].
//!
//! All operations check their output for NaN/Inf and fail with
//! [`TensorError::NonFinite`] instead of propagating it.

use crate::tensor::{matmul_at_into, matmul_bt_into, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    MaxRows(Var, Vec<usize>),
    ScaleRows(Var, Vec<f64>),
    Cosine {
        a: Var,
        b: Var,
        clamped: bool,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Present only on leaves that require a gradient.
    grad: Option<Vec<f64>>,
}

/// Denominator guard used by [`Tape::cosine`].
pub const COSINE_EPS: f64 = 1e-12;

/// Additive bias that masked attention logits receive before the softmax.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| TensorError::Invalid {
        op,
        reason: format!("expected a matrix, got shape {:?}", t.shape()),
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf. Its gradient slot starts at zero.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let grad = Some(vec![0.0; value.numel()]);
        self.push_raw(value, Op::Leaf, true, grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad.is_some()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool, grad: Option<Vec<f64>>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad, None))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::ForeignVar {
                index: v.0,
                len: self.nodes.len(),
            })
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`n` bias vector to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = rank2("add_bias", tx)?;
        if tb.numel() != n || tb.rank() != 1 {
            return Err(shape_err("add_bias", tx, tb));
        }
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("affine", out, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(name, out, op, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, gelu, Op::Gelu(x))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let (_, n) = rank2("softmax_rows", t)?;
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(row.iter().map(|v| (v - max).exp()));
            let sum: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|v| *v /= sum);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax_rows", out, Op::SoftmaxRows(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let (m, n) = rank2("transpose", t)?;
        let src = t.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    /// Concatenates tensors of equal rank along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        for &p in parts {
            self.check(p)?;
        }
        let base = self.value(first);
        if axis >= base.rank() {
            return Err(TensorError::Invalid {
                op: "concat",
                reason: format!("axis {axis} out of range for shape {:?}", base.shape()),
            });
        }
        let mut shape = base.shape().to_vec();
        shape[axis] = 0;
        for &p in parts {
            let t = self.value(p);
            let compatible = t.rank() == base.rank()
                && t.shape().iter().zip(base.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", base, t));
            }
            shape[axis] += t.shape()[axis];
        }
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Takes `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        if axis >= t.rank() || start >= end || end > t.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                reason: format!("range {start}..{end} on axis {axis} of shape {:?}", t.shape()),
            });
        }
        let (outer, extent, inner) = axis_split(t.shape(), axis);
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            data.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let out = Tensor::new(shape, data)?;
        self.push("slice", out, Op::Slice { x, axis, start }, &[x])
    }

    /// Sum of all elements, as a length-1 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let t = self.value(table);
        let (rows, cols) = rank2("gather_rows", t)?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                reason: format!("id {bad} out of range for table with {rows} rows"),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                reason: "empty id list".into(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        self.push("gather_rows", out, Op::GatherRows(table, ids.to_vec()), &[table])
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gamma`/`beta`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (_, n) = rank2("layer_norm_rows", tx)?;
        if tg.shape() != [n] {
            return Err(shape_err("layer_norm_rows", tx, tg));
        }
        if tb.shape() != [n] {
            return Err(shape_err("layer_norm_rows", tx, tb));
        }
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(n) {
            let (mu, inv) = row_stats(row, eps);
            data.extend(
                row.iter()
                    .zip(tg.data().iter().zip(tb.data()))
                    .map(|(v, (g, b))| g * (v - mu) * inv + b),
            );
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(
            "layer_norm_rows",
            out,
            Op::LayerNorm { x, gamma, beta, eps },
            &[x, gamma, beta],
        )
    }

    /// Column-wise maximum over the rows of a matrix, giving a length-`n` vector.
    /// Ties resolve to the earliest row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let (m, n) = rank2("max_rows", t)?;
        let mut arg = vec![0usize; n];
        let mut best = t.row(0).to_vec();
        for i in 1..m {
            for (j, &v) in t.row(i).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    arg[j] = i;
                }
            }
        }
        self.push("max_rows", Tensor::vector(best), Op::MaxRows(x, arg), &[x])
    }

    /// Multiplies row `i` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let (m, n) = rank2("scale_rows", t)?;
        if weights.len() != m {
            return Err(TensorError::Shape {
                op: "scale_rows",
                left: t.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let data = t
            .data()
            .chunks(n)
            .zip(weights)
            .flat_map(|(row, w)| row.iter().map(move |v| v * w))
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("scale_rows", out, Op::ScaleRows(x, weights.to_vec()), &[x])
    }

    /// Cosine similarity `a.b / (|a||b| + eps)`, clamped to `[-1, 1]`.
    ///
    /// When the clamp is active the gradient is zero.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("cosine", ta, tb));
        }
        let raw = cosine_raw(ta.data(), tb.data());
        let value = raw.clamp(-1.0, 1.0);
        self.push(
            "cosine",
            Tensor::scalar(value),
            Op::Cosine {
                a,
                b,
                clamped: value != raw,
            },
            &[a, b],
        )
    }

    /// Propagates d(output)/d(leaf) into every trainable leaf reachable from `output`.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        self.check(output)?;
        let out_val = self.value(output);
        if out_val.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: out_val.shape().to_vec(),
            });
        }
        let nodes = &self.nodes;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);
        let mut leaf_updates = Vec::new();

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            backprop_node(nodes, node, &g, &mut adj);
            if matches!(node.op, Op::Leaf) {
                leaf_updates.push((i, g));
            }
        }

        for (i, g) in leaf_updates {
            if let Some(slot) = self.nodes[i].grad.as_mut() {
                slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
            }
        }
        Ok(())
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

pub(crate) fn cosine_raw(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + COSINE_EPS)
}

/// Adjoint buffer of `v`, allocated on first use; `None` if `v` needs no gradient.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).dims2().unwrap().1;
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(ga) = slot(nodes, adj, *a) {
                matmul_bt_into(g, bd, ga, m, k, n);
            }
            if let Some(gb) = slot(nodes, adj, *b) {
                matmul_at_into(ad, g, gb, m, k, n);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(ga) = slot(nodes, adj, *a) {
                ga.iter_mut().zip(g).for_each(|(s, v)| *s += v);
            }
            if let Some(gb) = slot(nodes, adj, *b) {
                gb.iter_mut().zip(g).for_each(|(s, v)| *s += sign * v);
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(ga) = slot(nodes, adj, *a) {
                for ((s, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                    *s += gv * bv;
                }
            }
            if let Some(gb) = slot(nodes, adj, *b) {
                for ((s, gv), av) in gb.iter_mut().zip(g).zip(ad) {
                    *s += gv * av;
                }
            }
        }
        Op::AddBias(x, bias) => {
            let n = val(*bias).numel();
            if let Some(gx) = slot(nodes, adj, *x) {
                gx.iter_mut().zip(g).for_each(|(s, v)| *s += v);
            }
            if let Some(gb) = slot(nodes, adj, *bias) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
            }
        }
        Op::Affine(x, scale) => {
            if let Some(gx) = slot(nodes, adj, *x) {
                gx.iter_mut().zip(g).for_each(|(s, v)| *s += scale * v);
            }
        }
        Op::Tanh(x) => {
            if let Some(gx) = slot(nodes, adj, *x) {
                for ((s, gv), y) in gx.iter_mut().zip(g).zip(out) {
                    *s += gv * (1.0 - y * y);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = slot(nodes, adj, *x) {
                for ((s, gv), y) in gx.iter_mut().zip(g).zip(out) {
                    *s += gv * y * (1.0 - y);
                }
            }
        }
        Op::Relu(x) => {
            let xd = val(*x).data();
            if let Some(gx) = slot(nodes, adj, *x) {
                for ((s, gv), xv) in gx.iter_mut().zip(g).zip(xd) {
                    if *xv > 0.0 {
                        *s += gv;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xd = val(*x).data();
            if let Some(gx) = slot(nodes, adj, *x) {
                for ((s, gv), xv) in gx.iter_mut().zip(g).zip(xd) {
                    *s += gv * gelu_grad(*xv);
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let n = node.value.dims2().unwrap().1;
            if let Some(gx) = slot(nodes, adj, *x) {
                for ((s_row, g_row), y_row) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                    for ((s, gv), y) in s_row.iter_mut().zip(g_row).zip(y_row) {
                        *s += y * (gv - dot);
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (m, n) = val(*x).dims2().unwrap();
            if let Some(gx) = slot(nodes, adj, *x) {
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Concat(parts, axis) => {
            let (outer, extent, inner) = axis_split(node.value.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let width = val(*p).shape()[*axis];
                if let Some(gp) = slot(nodes, adj, *p) {
                    let chunk = width * inner;
                    for o in 0..outer {
                        let src = o * extent * inner + offset * inner;
                        gp[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(&g[src..src + chunk])
                            .for_each(|(s, v)| *s += v);
                    }
                }
                offset += width;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, extent, inner) = axis_split(val(*x).shape(), *axis);
            let width = node.value.shape()[*axis];
            if let Some(gx) = slot(nodes, adj, *x) {
                let chunk = width * inner;
                for o in 0..outer {
                    let dst = o * extent * inner + start * inner;
                    gx[dst..dst + chunk]
                        .iter_mut()
                        .zip(&g[o * chunk..(o + 1) * chunk])
                        .for_each(|(s, v)| *s += v);
                }
            }
        }
        Op::Sum(x) | Op::Mean(x) => {
            let n = val(*x).numel();
            let coeff = if matches!(node.op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
            if let Some(gx) = slot(nodes, adj, *x) {
                gx.iter_mut().for_each(|s| *s += coeff);
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, adj, *x) {
                gx.iter_mut().zip(g).for_each(|(s, v)| *s += v);
            }
        }
        Op::GatherRows(table, ids) => {
            let cols = val(*table).dims2().unwrap().1;
            if let Some(gt) = slot(nodes, adj, *table) {
                for (row, &id) in g.chunks(cols).zip(ids) {
                    gt[id * cols..(id + 1) * cols]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(s, v)| *s += v);
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let n = val(*gamma).numel();
            let xd = val(*x).data();
            let gd = val(*gamma).data();
            let mut dx = vec![0.0; xd.len()];
            let mut dgamma = vec![0.0; n];
            let mut dbeta = vec![0.0; n];
            for ((x_row, g_row), dx_row) in xd.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                let (mu, inv) = row_stats(x_row, *eps);
                let xhat: Vec<f64> = x_row.iter().map(|v| (v - mu) * inv).collect();
                let dxhat: Vec<f64> = g_row.iter().zip(gd).map(|(a, b)| a * b).collect();
                let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    dx_row[j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    dgamma[j] += g_row[j] * xhat[j];
                    dbeta[j] += g_row[j];
                }
            }
            for (v, d) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                if let Some(s) = slot(nodes, adj, v) {
                    s.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::MaxRows(x, arg) => {
            let n = arg.len();
            if let Some(gx) = slot(nodes, adj, *x) {
                for (j, &i) in arg.iter().enumerate() {
                    gx[i * n + j] += g[j];
                }
            }
        }
        Op::ScaleRows(x, weights) => {
            let n = val(*x).dims2().unwrap().1;
            if let Some(gx) = slot(nodes, adj, *x) {
                for ((s_row, g_row), w) in gx.chunks_mut(n).zip(g.chunks(n)).zip(weights) {
                    s_row.iter_mut().zip(g_row).for_each(|(s, v)| *s += w * v);
                }
            }
        }
        Op::Cosine { a, b, clamped } => {
            if *clamped {
                return;
            }
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let dot: f64 = ad.iter().zip(bd).map(|(x, y)| x * y).sum();
            let na = ad.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = bd.iter().map(|x| x * x).sum::<f64>().sqrt();
            let den = na * nb + COSINE_EPS;
            // d/du of |u| is u/|u|; taken as 0 at the origin.
            let grad_into = |s: &mut Vec<f64>, own: &[f64], other: &[f64], n_own: f64, n_other: f64| {
                let norm_term = if n_own > 0.0 { dot * n_other / (n_own * den * den) } else { 0.0 };
                for ((s, o), u) in s.iter_mut().zip(other).zip(own) {
                    *s += g[0] * (o / den - norm_term * u);
                }
            };
            if let Some(ga) = slot(nodes, adj, *a) {
                grad_into(ga, ad, bd, na, nb);
            }
            if let Some(gb) = slot(nodes, adj, *b) {
                grad_into(gb, bd, ad, nb, na);
            }
        }
    }
}
