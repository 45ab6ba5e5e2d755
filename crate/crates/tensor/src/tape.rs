use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScaleShift(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Lookup(Var, Vec<usize>),
    Softmax(Var, f64),
    LogSoftmax(Var),
    CrossEntropy(Var, Vec<Option<usize>>, Vec<f64>),
    Pick(Var, Vec<Option<usize>>),
    SumRows(Var),
    SumAll(Var),
    MeanAll(Var),
    ScaleRows(Var, Var),
    SelectRows(Vec<bool>, Var, Var),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so every node follows the
/// producers of its inputs and a reverse sweep visits each node once.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    checked: bool,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    /// Gradient-recording tape with NaN/Inf checks enabled.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
            grad_enabled: true,
        }
    }

    /// Forward-only tape: nothing requires gradient, no backward rules kept.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
            grad_enabled: false,
        }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    /// First element of a value; intended for `1 x 1` results.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Records a borrowed tensor as a leaf; it requires gradient when the
    /// tensor is flagged `requires_grad` and this tape records gradients.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        let requires_grad = t.requires_grad() && self.grad_enabled;
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a)?, self.dims(b)?);
        if da != db {
            return Err(TensorError::shape(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(da)
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.push(name, Tensor::matrix(r, c, data), op, &[x])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(name, Tensor::matrix(r, c, data), op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(TensorError::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        self.push("matmul", Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x n` bias row to every row of `x`. The only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let (br, bc) = self.dims(bias)?;
        if br != 1 || bc != c {
            return Err(TensorError::shape("add_bias", self.value(x).shape(), self.value(bias).shape()));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        self.push("add_bias", Tensor::matrix(r, c, data), Op::AddBias(x, bias), &[x, bias])
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_bias(xw, bias)
    }

    /// `a * x + b` with constant scalars.
    pub fn scale_shift(&mut self, x: Var, a: f64, b: f64) -> Result<Var> {
        self.map("scale_shift", x, |v| a * v + b, Op::ScaleShift(x, a))
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Result<Var> {
        self.scale_shift(x, a, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale_shift(x, -1.0, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map("softplus", x, |v| v.max(0.0) + (-v.abs()).exp().ln_1p(), Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map("log", x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map("square", x, |v| v * v, Op::Square(x))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let rows = self.dims(first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != rows {
                return Err(TensorError::shape("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..rows {
                data[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push("concat_cols", Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start+len` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if len == 0 || start + len > c {
            return Err(TensorError::shape("slice_cols", self.value(x).shape(), &[start, len]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push("slice_cols", Tensor::matrix(r, len, data), Op::SliceCols(x, start), &[x])
    }

    /// Rows `start..start+len` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if len == 0 || start + len > r {
            return Err(TensorError::shape("slice_rows", self.value(x).shape(), &[start, len]));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", Tensor::matrix(len, c, data), Op::SliceRows(x, start), &[x])
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let cols = self.dims(first)?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if c != cols {
                return Err(TensorError::shape("concat_rows", self.value(first).shape(), self.value(p).shape()));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        self.push("concat_rows", Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims(table)?;
        if indices.is_empty() {
            return Err(TensorError::Contract("lookup with no indices".into()));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Contract(format!("lookup index {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            "lookup",
            Tensor::matrix(indices.len(), c, data),
            Op::Lookup(table, indices.to_vec()),
            &[table],
        )
    }

    /// Row-wise `softmax(x / tau)`, max-subtracted.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(TensorError::Contract(format!("softmax temperature must be positive, got {tau}")));
        }
        let (r, c) = self.dims(x)?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row, tau);
        }
        self.push("softmax", Tensor::matrix(r, c, data), Op::Softmax(x, tau), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("log_softmax", Tensor::matrix(r, c, data), Op::LogSoftmax(x), &[x])
    }

    /// Per-row `-log softmax(logits)[target]`, `r x 1`; rows with `None`
    /// targets contribute exactly zero.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.dims(logits)?;
        if targets.len() != r {
            return Err(TensorError::shape("masked_cross_entropy", self.value(logits).shape(), &[targets.len()]));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut out = vec![0.0; r];
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let lse = log_sum_exp(row);
            if let Some(t) = targets[i] {
                if t >= c {
                    return Err(TensorError::Contract(format!("target {t} out of range for {c} classes")));
                }
                out[i] = lse - row[t];
            }
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        self.push(
            "masked_cross_entropy",
            Tensor::matrix(r, 1, out),
            Op::CrossEntropy(logits, targets.to_vec(), probs),
            &[logits],
        )
    }

    /// Per-row `x[i, idx[i]]`, `r x 1`; `None` rows give zero.
    pub fn pick(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if idx.len() != r {
            return Err(TensorError::shape("pick", self.value(x).shape(), &[idx.len()]));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; r];
        for (i, j) in idx.iter().enumerate() {
            if let Some(j) = *j {
                if j >= c {
                    return Err(TensorError::Contract(format!("pick index {j} out of range for {c} columns")));
                }
                out[i] = src[i * c + j];
            }
        }
        self.push("pick", Tensor::matrix(r, 1, out), Op::Pick(x, idx.to_vec()), &[x])
    }

    /// `r x 1` row sums.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let data = self.value(x).data().chunks(c).map(|row| row.iter().sum()).collect();
        self.push("sum_rows", Tensor::matrix(r, 1, data), Op::SumRows(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Multiplies row `i` of `x` by `s[i]`, where `s` is `r x 1`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if self.dims(s)? != (r, 1) {
            return Err(TensorError::shape("scale_rows", self.value(x).shape(), self.value(s).shape()));
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (row, f) in data.chunks_mut(c).zip(sv) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        self.push("scale_rows", Tensor::matrix(r, c, data), Op::ScaleRows(x, s), &[x, s])
    }

    /// Row `i` comes from `on` where `mask[i]`, otherwise from `off`.
    pub fn select_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        let (r, c) = self.same_shape("select_rows", on, off)?;
        if mask.len() != r {
            return Err(TensorError::shape("select_rows", self.value(on).shape(), &[mask.len()]));
        }
        let (a, b) = (self.value(on).data(), self.value(off).data());
        let mut data = Vec::with_capacity(r * c);
        for (i, &m) in mask.iter().enumerate() {
            let src = if m { a } else { b };
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push("select_rows", Tensor::matrix(r, c, data), Op::SelectRows(mask.to_vec(), on, off), &[on, off])
    }

    /// Row-wise inner products, `r x 1`.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum_rows(p)
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Every leaf that requires gradient receives `d loss / d leaf`; leaves
    /// the loss does not depend on get zeros. Contributions from multiple
    /// uses of a value add up.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Contract("backward on a value not from this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.get().numel()]);
            }
        }
        // Interior nodes had their buffers taken during the sweep; only
        // leaves remain populated.
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = node.value.get();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let n = self.dims(*b)?.1;
                if self.requires_grad(*a) {
                    let av = self.value(*b).data();
                    self.with_grad(grads, *a, |dst| gemm(m, n, k, g, false, av, true, 1.0, dst));
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    self.with_grad(grads, *b, |dst| gemm(k, m, n, av, true, g, false, 1.0, dst));
                }
            }
            Op::Add(a, b) => {
                self.add_into(grads, *a, g.iter().copied());
                self.add_into(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, g.iter().copied());
                self.add_into(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.add_into(grads, *a, g.iter().zip(bv).map(|(g, y)| g * y));
                self.add_into(grads, *b, g.iter().zip(av).map(|(g, x)| g * x));
            }
            Op::AddBias(x, b) => {
                self.add_into(grads, *x, g.iter().copied());
                if self.requires_grad(*b) {
                    let c = self.dims(*b)?.1;
                    self.with_grad(grads, *b, |dst| {
                        for row in g.chunks(c) {
                            dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    });
                }
            }
            Op::ScaleShift(x, a) => self.add_into(grads, *x, g.iter().map(|v| a * v)),
            Op::Sigmoid(x) => self.add_into(grads, *x, g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y))),
            Op::Tanh(x) => self.add_into(grads, *x, g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y))),
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.add_into(grads, *x, g.iter().zip(xv).map(|(g, v)| g * sigmoid(*v)));
            }
            Op::Exp(x) => self.add_into(grads, *x, g.iter().zip(out.data()).map(|(g, y)| g * y)),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.add_into(grads, *x, g.iter().zip(xv).map(|(g, v)| g / v));
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.add_into(grads, *x, g.iter().zip(xv).map(|(g, v)| 2.0 * g * v));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = out.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p)?.1;
                    if self.requires_grad(p) {
                        self.with_grad(grads, p, |dst| {
                            for i in 0..rows {
                                let src = &g[i * total + offset..i * total + offset + w];
                                dst[i * w..(i + 1) * w].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                if self.requires_grad(*x) {
                    let (r, c) = self.dims(*x)?;
                    let len = out.cols();
                    self.with_grad(grads, *x, |dst| {
                        for i in 0..r {
                            dst[i * c + start..i * c + start + len]
                                .iter_mut()
                                .zip(&g[i * len..(i + 1) * len])
                                .for_each(|(d, v)| *d += v);
                        }
                    });
                }
            }
            Op::SliceRows(x, start) => {
                if self.requires_grad(*x) {
                    let c = self.dims(*x)?.1;
                    self.with_grad(grads, *x, |dst| {
                        dst[start * c..start * c + g.len()]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(d, v)| *d += v);
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.add_into(grads, p, g[offset..offset + n].iter().copied());
                    offset += n;
                }
            }
            Op::Lookup(table, idx) => {
                if self.requires_grad(*table) {
                    let c = self.dims(*table)?.1;
                    self.with_grad(grads, *table, |dst| {
                        for (row, &i) in idx.iter().enumerate() {
                            dst[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(&g[row * c..(row + 1) * c])
                                .for_each(|(d, v)| *d += v);
                        }
                    });
                }
            }
            Op::Softmax(x, tau) => {
                if self.requires_grad(*x) {
                    let c = out.cols();
                    self.with_grad(grads, *x, |dst| {
                        for ((d, y), gr) in dst.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                            let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                d[j] += y[j] * (gr[j] - dot) / tau;
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax(x) => {
                if self.requires_grad(*x) {
                    let c = out.cols();
                    self.with_grad(grads, *x, |dst| {
                        for ((d, y), gr) in dst.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                            let total: f64 = gr.iter().sum();
                            for j in 0..c {
                                d[j] += gr[j] - y[j].exp() * total;
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy(x, targets, probs) => {
                if self.requires_grad(*x) {
                    let c = self.dims(*x)?.1;
                    self.with_grad(grads, *x, |dst| {
                        for (i, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            let row = &mut dst[i * c..(i + 1) * c];
                            for j in 0..c {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                row[j] += g[i] * (probs[i * c + j] - onehot);
                            }
                        }
                    });
                }
            }
            Op::Pick(x, idx) => {
                if self.requires_grad(*x) {
                    let c = self.dims(*x)?.1;
                    self.with_grad(grads, *x, |dst| {
                        for (i, j) in idx.iter().enumerate() {
                            if let Some(j) = *j {
                                dst[i * c + j] += g[i];
                            }
                        }
                    });
                }
            }
            Op::SumRows(x) => {
                if self.requires_grad(*x) {
                    let c = self.dims(*x)?.1;
                    self.with_grad(grads, *x, |dst| {
                        for (row, gv) in dst.chunks_mut(c).zip(g) {
                            row.iter_mut().for_each(|d| *d += gv);
                        }
                    });
                }
            }
            Op::SumAll(x) => {
                let gv = g[0];
                let n = self.value(*x).numel();
                self.add_into(grads, *x, std::iter::repeat_n(gv, n));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                let gv = g[0] / n as f64;
                self.add_into(grads, *x, std::iter::repeat_n(gv, n));
            }
            Op::ScaleRows(x, s) => {
                let c = self.dims(*x)?.1;
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                if self.requires_grad(*x) {
                    self.with_grad(grads, *x, |dst| {
                        for ((d, gr), f) in dst.chunks_mut(c).zip(g.chunks(c)).zip(sv) {
                            d.iter_mut().zip(gr).for_each(|(d, v)| *d += v * f);
                        }
                    });
                }
                if self.requires_grad(*s) {
                    self.with_grad(grads, *s, |dst| {
                        for ((d, gr), xr) in dst.iter_mut().zip(g.chunks(c)).zip(xv.chunks(c)) {
                            *d += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                }
            }
            Op::SelectRows(mask, on, off) => {
                let c = out.cols();
                for (target, keep) in [(*on, true), (*off, false)] {
                    if self.requires_grad(target) {
                        self.with_grad(grads, target, |dst| {
                            for (i, &m) in mask.iter().enumerate() {
                                if m == keep {
                                    dst[i * c..(i + 1) * c]
                                        .iter_mut()
                                        .zip(&g[i * c..(i + 1) * c])
                                        .for_each(|(d, v)| *d += v);
                                }
                            }
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn with_grad(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let n = self.value(v).numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl Iterator<Item = f64>) {
        if !self.requires_grad(v) {
            return;
        }
        self.with_grad(grads, v, |dst| dst.iter_mut().zip(contrib).for_each(|(d, c)| *d += c));
    }
}

/// Gradients of a scalar loss with respect to the tape's leaves.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` is not a leaf that requires gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
