//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse and accumulates vector-Jacobian products into
//! the inputs of each node. Nodes that depend on no `requires_grad` leaf are
//! skipped entirely.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        input: Var,
        kernel: Var,
        stride: usize,
    },
    Transpose(Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    /// Scalar whose gradient w.r.t. `input` was computed during the forward pass.
    Fused {
        input: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Variance floor used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; zeros when `var` is unreachable.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

/// `a[m×k] · b[k×n]`
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `acc[m×k] += g[m×n] · b[k×n]ᵀ`
fn gemm_a_bt_acc(acc: &mut [f64], g: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            acc[i * k + p] += dot;
        }
    }
}

/// `acc[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_at_b_acc(acc: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let acc_row = &mut acc[p * n..(p + 1) * n];
            for (o, &gv) in acc_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn shape_of(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Records a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape_of(a), self.shape_of(b)));
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        check_finite("matmul", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape("add", self.shape_of(a), self.shape_of(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        check_finite("add", &out)?;
        let shape = self.shape_of(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.shape_of(bias) != [n] {
            return Err(Error::shape("add_row", self.shape_of(a), self.shape_of(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        check_finite("add_row", &out)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRow(a, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape("mul", self.shape_of(a), self.shape_of(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        check_finite("mul", &out)?;
        let shape = self.shape_of(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * factor).collect();
        check_finite("scale", &out)?;
        let shape = self.shape_of(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale(a, factor), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape_of(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Relu(a), rg))
    }

    /// Row-wise softmax of `logits + mask`. Mask entries must be `0` or
    /// `-inf` and the mask must have the same shape as the logits.
    pub fn masked_softmax(&mut self, logits: Var, mask: &Tensor) -> Result<Var> {
        let (m, n) = self.value(logits).dims2()?;
        if mask.shape() != [m, n] {
            return Err(Error::shape("masked_softmax", self.shape_of(logits), mask.shape()));
        }
        if let Some(bad) = mask
            .data()
            .iter()
            .find(|&&v| v != 0.0 && v != f64::NEG_INFINITY)
        {
            return Err(Error::Invalid(format!(
                "attention mask entries must be 0 or -inf, found {bad}"
            )));
        }
        let x = self.value(logits).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mrow = &mask.data()[i * n..(i + 1) * n];
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &mv)| mv == 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow(i));
            }
            let orow = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if mrow[j] == 0.0 {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        check_finite("masked_softmax", &out)?;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Softmax(logits), rg))
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// affine transform.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, d) = self.value(x).dims2()?;
        if d < 2 {
            return Err(Error::Invalid(format!(
                "layer_norm needs at least 2 features, got {d}"
            )));
        }
        if self.shape_of(gain) != [d] || self.shape_of(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape_of(x), self.shape_of(gain)));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::matrix(m, d, out)?,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Temporal convolution of `x[t×c_in]` with `kernel[k×c_in×c_out]`.
    ///
    /// The input is zero-padded by `(k-1)/2` frames on each side, so output
    /// frame `i` is centered on input frame `stride·i`. Output length is
    /// `ceil(t / stride)`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (t, c_in) = self.value(x).dims2()?;
        let kshape = self.shape_of(kernel).to_vec();
        let [k, kc_in, c_out] = kshape[..] else {
            return Err(Error::shape("conv1d", self.shape_of(x), &kshape));
        };
        if k % 2 == 0 {
            return Err(Error::Unsupported(format!(
                "conv1d with even kernel size {k}"
            )));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv1d stride must be at least 1".into()));
        }
        if kc_in != c_in {
            return Err(Error::shape("conv1d", self.shape_of(x), &kshape));
        }
        let pad = (k - 1) / 2;
        let t_out = t.div_ceil(stride);
        let xs = self.value(x).data();
        let ks = self.value(kernel).data();
        let mut out = vec![0.0; t_out * c_out];
        for i in 0..t_out {
            let orow = &mut out[i * c_out..(i + 1) * c_out];
            for j in 0..k {
                let src = (stride * i + j) as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xrow = &xs[src as usize * c_in..(src as usize + 1) * c_in];
                for (c, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &ks[(j * c_in + c) * c_out..(j * c_in + c + 1) * c_out];
                    for (o, &kv) in orow.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            }
        }
        check_finite("conv1d", &out)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            Tensor::matrix(t_out, c_out, out)?,
            Op::Conv1d {
                input: x,
                kernel,
                stride,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), rg))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start >= end || end > n {
            return Err(Error::Invalid(format!(
                "column slice {start}..{end} out of range for width {n}"
            )));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(m, w, out)?, Op::SliceCols { input: a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Invalid("concat_cols of nothing".into()));
        };
        let (m, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape_of(first), self.shape_of(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().with_requires_grad(false).reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Invalid("weighted_sum of nothing".into()));
        };
        let shape = self.shape_of(first).to_vec();
        let mut out = vec![0.0; self.value(first).numel()];
        for &(v, w) in terms {
            if self.shape_of(v) != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, self.shape_of(v)));
            }
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        check_finite("weighted_sum", &out)?;
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::new(shape, out)?, Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Records a scalar `value` whose gradient w.r.t. `input` is `grad`.
    ///
    /// Used by losses that compute their own gradient in closed form
    /// alongside the forward value.
    pub fn fused_scalar(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::shape("fused_scalar", self.shape_of(input), &[grad.len()]));
        }
        check_finite("fused loss", &[value])?;
        check_finite("fused loss gradient", &grad)?;
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(value), Op::Fused { input, grad }, rg))
    }

    /// Runs reverse-mode accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            check_finite("backward", &g)?;
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[i].op, Op::Leaf) {
                    check_finite("backward", g)?;
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |var: Var, f: &mut dyn FnMut(&mut [f64])| {
            let target = &self.nodes[var.0];
            if !target.requires_grad {
                return;
            }
            let slot = grads[var.0].get_or_insert_with(|| vec![0.0; target.value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                acc(a, &mut |s| gemm_a_bt_acc(s, g, bv.data(), m, k, n));
                acc(b, &mut |s| gemm_at_b_acc(s, av.data(), g, m, k, n));
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    acc(v, &mut |s| s.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                }
            }
            &Op::AddRow(a, bias) => {
                acc(a, &mut |s| s.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                let n = self.value(bias).numel();
                acc(bias, &mut |s| {
                    for row in g.chunks_exact(n) {
                        s.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                });
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                acc(a, &mut |s| {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                });
                acc(b, &mut |s| {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                });
            }
            &Op::Scale(a, f) => {
                acc(a, &mut |s| s.iter_mut().zip(g).for_each(|(o, x)| *o += f * x));
            }
            &Op::Relu(a) => {
                let xv = self.value(a).data();
                acc(a, &mut |s| {
                    for ((o, x), &inp) in s.iter_mut().zip(g).zip(xv) {
                        if inp > 0.0 {
                            *o += x;
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.shape()[1];
                acc(a, &mut |s| {
                    for ((srow, grow), yrow) in s
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                acc(*input, &mut |s| {
                    for (i, &is) in inv_std.iter().enumerate() {
                        let grow = &g[i * d..(i + 1) * d];
                        let hrow = &xhat[i * d..(i + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let df = d as f64;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            s[i * d + j] += is / df * (df * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |s| {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for grow in g.chunks_exact(d) {
                        s.iter_mut().zip(grow).for_each(|(o, x)| *o += x);
                    }
                });
            }
            &Op::Conv1d {
                input,
                kernel,
                stride,
            } => {
                let xv = self.value(input);
                let kv = self.value(kernel);
                let (t, c_in) = (xv.shape()[0], xv.shape()[1]);
                let (k, c_out) = (kv.shape()[0], kv.shape()[2]);
                let pad = (k - 1) / 2;
                let t_out = node.value.shape()[0];
                let taps = |i: usize, j: usize| -> Option<usize> {
                    let src = (stride * i + j) as isize - pad as isize;
                    (src >= 0 && src < t as isize).then_some(src as usize)
                };
                acc(input, &mut |s| {
                    for i in 0..t_out {
                        let grow = &g[i * c_out..(i + 1) * c_out];
                        for j in 0..k {
                            let Some(src) = taps(i, j) else { continue };
                            for c in 0..c_in {
                                let krow =
                                    &kv.data()[(j * c_in + c) * c_out..(j * c_in + c + 1) * c_out];
                                let dot: f64 = grow.iter().zip(krow).map(|(a, b)| a * b).sum();
                                s[src * c_in + c] += dot;
                            }
                        }
                    }
                });
                acc(kernel, &mut |s| {
                    for i in 0..t_out {
                        let grow = &g[i * c_out..(i + 1) * c_out];
                        for j in 0..k {
                            let Some(src) = taps(i, j) else { continue };
                            for c in 0..c_in {
                                let xval = xv.data()[src * c_in + c];
                                if xval == 0.0 {
                                    continue;
                                }
                                let srow = &mut s[(j * c_in + c) * c_out..(j * c_in + c + 1) * c_out];
                                srow.iter_mut().zip(grow).for_each(|(o, x)| *o += xval * x);
                            }
                        }
                    }
                });
            }
            &Op::Transpose(a) => {
                // node is n×m, input m×n
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                acc(a, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            &Op::SliceCols { input, start } => {
                let n = self.value(input).shape()[1];
                let w = node.value.shape()[1];
                acc(input, &mut |s| {
                    for (i, grow) in g.chunks_exact(w).enumerate() {
                        s[i * n + start..i * n + start + w]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    acc(p, &mut |s| {
                        for (i, srow) in s.chunks_exact_mut(w).enumerate() {
                            srow.iter_mut()
                                .zip(&g[i * n + offset..i * n + offset + w])
                                .for_each(|(o, x)| *o += x);
                        }
                    });
                    offset += w;
                }
            }
            &Op::Reshape(a) => {
                acc(a, &mut |s| s.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::Embedding { table, ids } => {
                let d = node.value.shape()[1];
                acc(*table, &mut |s| {
                    for (pos, &id) in ids.iter().enumerate() {
                        s[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[pos * d..(pos + 1) * d])
                            .for_each(|(o, x)| *o += x);
                    }
                });
            }
            &Op::Sum(a) => {
                let up = g[0];
                acc(a, &mut |s| s.iter_mut().for_each(|o| *o += up));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, &mut |s| s.iter_mut().zip(g).for_each(|(o, x)| *o += w * x));
                }
            }
            Op::Fused { input, grad } => {
                let up = g[0];
                acc(*input, &mut |s| {
                    s.iter_mut().zip(grad).for_each(|(o, x)| *o += up * x)
                });
            }
        }
    }
}
