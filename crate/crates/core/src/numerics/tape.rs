//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] lives for one loss evaluation: leaves are copied in, every op
//! appends a node holding its forward value, and [`Tape::backward`] walks the
//! nodes in reverse. Nothing persists between evaluations.

use crate::error::{RaplError, Result};
use crate::numerics::kernels::{
    in_support, masked_log_softmax_row, masked_logsumexp_row, masked_softmax_row,
};
use crate::numerics::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulCols(Var, Var),
    BatchNorm { x: Var, inv_std: Vec<f64> },
    Relu(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Softmax(Var, Option<Vec<bool>>),
    LogSoftmax(Var, Option<Vec<bool>>),
    LogSumExp(Var, Option<Vec<bool>>),
    GatherCols(Var, Vec<usize>),
    L2Normalize { x: Var, eps: f64, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Contract(Var, Vec<f64>),
    WeightedSum(Vec<(Var, f64)>),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    SpatialMean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when no gradient reached `v`.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(RaplError::Dimension(format!("{what} expects a 2-D tensor, got {s:?}"))),
    }
}

fn check_support(support: &Option<Vec<bool>>, numel: usize) -> Result<()> {
    match support {
        Some(s) if s.len() != numel => Err(RaplError::Dimension(format!(
            "support mask of length {} for {} entries",
            s.len(),
            numel
        ))),
        _ => Ok(()),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(RaplError::NonFinite(name.to_string()));
        }
        let needs_grad = match &op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddBias(a, b)
            | Op::MulCols(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Reshape(x)
            | Op::SelectRows(x, _)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _)
            | Op::LogSumExp(x, _)
            | Op::GatherCols(x, _)
            | Op::L2Normalize { x, .. }
            | Op::BatchNorm { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Contract(x, _)
            | Op::SpatialMean(x) => self.needs(*x),
            Op::ConcatRows(xs) => xs.iter().any(|x| self.needs(*x)),
            Op::WeightedSum(terms) => terms.iter().any(|(x, _)| self.needs(*x)),
            Op::Conv2d { x, w, b, .. } => self.needs(*x) || self.needs(*w) || self.needs(*b),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(RaplError::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that tracks gradients iff the tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let needs = t.requires_grad();
        self.push_leaf(t.clone(), needs)
    }

    /// Leaf that always tracks gradients.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.push_leaf(t.clone(), true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push_leaf(t.clone(), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(RaplError::Dimension(format!(
                "matmul inner extents {k} and {k2} differ"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "transpose")?;
        let out = transpose_raw(self.value(x).data(), r, c);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), "transpose")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(RaplError::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, Op::Sub(a, b), "sub")
    }

    /// `x[n×m] + b[m]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = dims2(self.value(x), "add_bias")?;
        if self.value(b).numel() != m {
            return Err(RaplError::Dimension(format!(
                "bias of {} values for {m} columns",
                self.value(b).numel()
            )));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(m) {
            row.iter_mut().zip(bias).for_each(|(v, c)| *v += c);
        }
        self.push(Tensor::new(vec![n, m], data)?, Op::AddBias(x, b), "add_bias")
    }

    /// Multiplies column `j` of an `[N, M]` matrix by `g[j]`.
    pub fn mul_cols(&mut self, x: Var, g: Var) -> Result<Var> {
        let (n, m) = dims2(self.value(x), "mul_cols")?;
        if self.value(g).numel() != m {
            return Err(RaplError::Dimension(format!(
                "column scale of {} values for {m} columns",
                self.value(g).numel()
            )));
        }
        let gain = self.value(g).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(m) {
            row.iter_mut().zip(gain).for_each(|(v, c)| *v *= c);
        }
        self.push(Tensor::new(vec![n, m], data)?, Op::MulCols(x, g), "mul_cols")
    }

    /// Standardizes each column of an `[N, M]` matrix with its batch mean and
    /// biased variance. No affine part; compose with `mul_cols` and `add_bias`.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, m) = dims2(self.value(x), "batch_norm")?;
        if n == 0 {
            return Err(RaplError::Dimension("batch_norm of an empty batch".into()));
        }
        let (mean, var) = column_moments(self.value(x).data(), n, m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(m) {
            for j in 0..m {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        self.push(
            Tensor::new(vec![n, m], data)?,
            Op::BatchNorm { x, inv_std },
            "batch_norm",
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect())?;
        self.push(t, Op::Scale(x, c), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.max(0.0)).collect())?;
        self.push(t, Op::Relu(x), "relu")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|x| self.value(*x)).collect();
        let t = Tensor::concat_rows(&parts)?;
        self.push(t, Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x).select_rows(indices)?;
        self.push(t, Op::SelectRows(x, indices.to_vec()), "select_rows")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax_rows(x, None)
    }

    /// Row softmax over the entries flagged in `support` (row-major, same
    /// length as `x`); everything else is exactly 0.
    pub fn masked_softmax_rows(&mut self, x: Var, support: Option<Vec<bool>>) -> Result<Var> {
        let (n, m) = dims2(self.value(x), "softmax_rows")?;
        check_support(&support, n * m)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let s = support.as_ref().map(|s| &s[i * m..(i + 1) * m]);
            if !masked_softmax_row(&src[i * m..(i + 1) * m], s, &mut out[i * m..(i + 1) * m]) {
                return Err(RaplError::InvalidArgument(format!("row {i} has an empty support")));
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Softmax(x, support), "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.masked_log_softmax_rows(x, None)
    }

    pub fn masked_log_softmax_rows(&mut self, x: Var, support: Option<Vec<bool>>) -> Result<Var> {
        let (n, m) = dims2(self.value(x), "log_softmax_rows")?;
        check_support(&support, n * m)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let s = support.as_ref().map(|s| &s[i * m..(i + 1) * m]);
            if !masked_log_softmax_row(&src[i * m..(i + 1) * m], s, &mut out[i * m..(i + 1) * m])
            {
                return Err(RaplError::InvalidArgument(format!("row {i} has an empty support")));
            }
        }
        self.push(
            Tensor::new(vec![n, m], out)?,
            Op::LogSoftmax(x, support),
            "log_softmax_rows",
        )
    }

    /// Per-row `log Σ exp` over the support; shape `[n]`.
    pub fn logsumexp_rows(&mut self, x: Var, support: Option<Vec<bool>>) -> Result<Var> {
        let (n, m) = dims2(self.value(x), "logsumexp_rows")?;
        check_support(&support, n * m)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let s = support.as_ref().map(|s| &s[i * m..(i + 1) * m]);
            let lse = masked_logsumexp_row(&src[i * m..(i + 1) * m], s).ok_or_else(|| {
                RaplError::InvalidArgument(format!("row {i} has an empty support"))
            })?;
            out.push(lse);
        }
        self.push(Tensor::new(vec![n], out)?, Op::LogSumExp(x, support), "logsumexp_rows")
    }

    /// `out[i] = x[i, cols[i]]`; shape `[n]`.
    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (n, m) = dims2(self.value(x), "gather_cols")?;
        if cols.len() != n || cols.iter().any(|&c| c >= m) {
            return Err(RaplError::Dimension(format!(
                "gather of {} indices from {n}x{m}",
                cols.len()
            )));
        }
        let src = self.value(x).data();
        let out = cols.iter().enumerate().map(|(i, &c)| src[i * m + c]).collect();
        self.push(Tensor::new(vec![n], out)?, Op::GatherCols(x, cols.to_vec()), "gather_cols")
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, d) = dims2(self.value(x), "l2_normalize_rows")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * d];
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / denom;
            }
            norms.push(norm);
        }
        self.push(
            Tensor::new(vec![n, d], out)?,
            Op::L2Normalize { x, eps, norms },
            "l2_normalize_rows",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(RaplError::InvalidArgument("mean of an empty tensor".into()));
        }
        let s = v.sum() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// `Σ_i weights[i]·x[i]`, used to reduce a tensor output to a scalar.
    pub fn contract(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let v = self.value(x);
        if weights.len() != v.numel() {
            return Err(RaplError::Dimension(format!(
                "{} weights for {} values",
                weights.len(),
                v.numel()
            )));
        }
        let s = v.data().iter().zip(&weights).map(|(a, w)| a * w).sum();
        self.push(Tensor::scalar(s), Op::Contract(x, weights), "contract")
    }

    /// `Σ c_i·x_i` over same-shaped operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| RaplError::InvalidArgument("weighted sum of nothing".into()))?;
        let shape = self.value(first).shape().to_vec();
        let mut acc = vec![0.0; self.value(first).numel()];
        for &(x, c) in terms {
            let v = self.value(x);
            if v.shape() != shape.as_slice() {
                return Err(RaplError::Dimension("weighted_sum operands differ in shape".into()));
            }
            acc.iter_mut().zip(v.data()).for_each(|(a, b)| *a += c * b);
        }
        self.push(Tensor::new(shape, acc)?, Op::WeightedSum(terms.to_vec()), "weighted_sum")
    }

    /// 2-D convolution, `x[N×C×H×W]`, `w[O×C×kh×kw]`, `b[O]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        if self.value(b).numel() != g.o {
            return Err(RaplError::Dimension(format!(
                "conv bias of {} values for {} filters",
                self.value(b).numel(),
                g.o
            )));
        }
        let out = g.forward(self.value(x).data(), self.value(w).data(), self.value(b).data());
        let t = Tensor::new(vec![g.n, g.o, g.ho, g.wo], out)?;
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            "conv2d",
        )
    }

    /// Average over the two trailing spatial axes: `[N×C×H×W] → [N×C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, hw) = match self.value(x).shape() {
            [n, c, h, w] => (*n, *c, h * w),
            s => {
                return Err(RaplError::Dimension(format!(
                    "spatial_mean expects N×C×H×W, got {s:?}"
                )))
            }
        };
        let src = self.value(x).data();
        let out = src
            .chunks(hw)
            .map(|cell| cell.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Tensor::new(vec![n, c], out)?, Op::SpatialMean(x), "spatial_mean")
    }

    /// Propagates d`output`/d(node) for a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(RaplError::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            if !g.iter().all(|v| v.is_finite()) {
                return Err(RaplError::NonFinite("backward".into()));
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a), "matmul")?;
                let n = self.value(*b).shape()[1];
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = dims2(self.value(*x), "transpose")?;
                acc(*x, transpose_raw(g, c, r));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::AddBias(x, b) => {
                let m = self.value(*b).numel();
                acc(*x, g.to_vec());
                let mut db = vec![0.0; m];
                for row in g.chunks(m) {
                    db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                acc(*b, db);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::MulCols(x, gain) => {
                let m = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                let xv = self.value(*x).data();
                acc(
                    *x,
                    g.chunks(m).flat_map(|row| row.iter().zip(gv).map(|(a, b)| a * b)).collect(),
                );
                let mut dg = vec![0.0; m];
                for (grow, xrow) in g.chunks(m).zip(xv.chunks(m)) {
                    for j in 0..m {
                        dg[j] += grow[j] * xrow[j];
                    }
                }
                acc(*gain, dg);
            }
            Op::BatchNorm { x, inv_std } => {
                let m = inv_std.len();
                let y = node.value.data();
                let n = y.len() / m;
                let mut sum_g = vec![0.0; m];
                let mut sum_gy = vec![0.0; m];
                for (grow, yrow) in g.chunks(m).zip(y.chunks(m)) {
                    for j in 0..m {
                        sum_g[j] += grow[j];
                        sum_gy[j] += grow[j] * yrow[j];
                    }
                }
                let nf = n as f64;
                let mut dx = vec![0.0; y.len()];
                for (i, d) in dx.iter_mut().enumerate() {
                    let j = i % m;
                    *d = inv_std[j] / nf * (nf * g[i] - sum_g[j] - y[i] * sum_gy[j]);
                }
                acc(*x, dx);
            }
            Op::Relu(x) => {
                let src = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(src)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let len = self.value(*x).numel();
                    acc(*x, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SelectRows(x, idx) => {
                let src = self.value(*x);
                let w = src.row_len();
                let mut dx = vec![0.0; src.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    dx[i * w..(i + 1) * w]
                        .iter_mut()
                        .zip(&g[k * w..(k + 1) * w])
                        .for_each(|(a, b)| *a += b);
                }
                acc(*x, dx);
            }
            Op::Softmax(x, support) => {
                let (n, m) = dims2(&node.value, "softmax_rows")?;
                let y = node.value.data();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let r = i * m..(i + 1) * m;
                    let s = support.as_ref().map(|s| &s[r.clone()]);
                    let dot: f64 = y[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        if in_support(s, j) {
                            dx[i * m + j] = y[i * m + j] * (g[i * m + j] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmax(x, support) => {
                let (n, m) = dims2(&node.value, "log_softmax_rows")?;
                let l = node.value.data();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let s = support.as_ref().map(|s| &s[i * m..(i + 1) * m]);
                    let gsum: f64 = (0..m)
                        .filter(|&j| in_support(s, j))
                        .map(|j| g[i * m + j])
                        .sum();
                    for j in 0..m {
                        if in_support(s, j) {
                            dx[i * m + j] = g[i * m + j] - l[i * m + j].exp() * gsum;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LogSumExp(x, support) => {
                let (n, m) = dims2(self.value(*x), "logsumexp_rows")?;
                let src = self.value(*x).data();
                let lse = node.value.data();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let s = support.as_ref().map(|s| &s[i * m..(i + 1) * m]);
                    for j in 0..m {
                        if in_support(s, j) {
                            dx[i * m + j] = g[i] * (src[i * m + j] - lse[i]).exp();
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::GatherCols(x, cols) => {
                let m = self.value(*x).shape()[1];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (i, &c) in cols.iter().enumerate() {
                    dx[i * m + c] += g[i];
                }
                acc(*x, dx);
            }
            Op::L2Normalize { x, eps, norms } => {
                let d = self.value(*x).shape()[1];
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (i, &norm) in norms.iter().enumerate() {
                    let r = i * d..(i + 1) * d;
                    if norm > *eps {
                        let dot: f64 = y[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in r {
                            dx[j] = (g[j] - y[j] * dot) / norm;
                        }
                    } else {
                        for j in r {
                            dx[j] = g[j] / eps;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::Contract(x, w) => acc(*x, w.iter().map(|v| v * g[0]).collect()),
            Op::WeightedSum(terms) => {
                for &(x, c) in terms {
                    acc(x, g.iter().map(|v| v * c).collect());
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let geom = ConvGeom::new(
                    self.value(*x).shape(),
                    self.value(*w).shape(),
                    *stride,
                    *pad,
                )?;
                let (dx, dw, db) = geom.backward(self.value(*x).data(), self.value(*w).data(), g);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::SpatialMean(x) => {
                let src = self.value(*x);
                let s = src.shape();
                let hw = s[2] * s[3];
                let mut dx = vec![0.0; src.numel()];
                for (cell, gv) in dx.chunks_mut(hw).zip(g) {
                    cell.fill(gv / hw as f64);
                }
                acc(*x, dx);
            }
        }
        Ok(())
    }
}

/// Per-column mean and biased variance of an `[n, m]` row-major matrix.
pub fn column_moments(x: &[f64], n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; m];
    for row in x.chunks(m) {
        mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    let mut var = vec![0.0; m];
    for row in x.chunks(m) {
        for j in 0..m {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|a| *a /= n as f64);
    (mean, var)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c, h, wd], &[o, c2, kh, kw]) = (x, w) else {
            return Err(RaplError::Dimension(format!(
                "conv2d expects 4-D input and weight, got {x:?} and {w:?}"
            )));
        };
        if c != c2 {
            return Err(RaplError::Dimension(format!(
                "conv2d input has {c} channels, weight expects {c2}"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(RaplError::Dimension("conv2d kernel larger than padded input".into()));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    /// Input coordinate for an output position and kernel offset, if inside.
    #[inline]
    fn src(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn forward(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.o * self.ho * self.wo];
        for n in 0..self.n {
            for o in 0..self.o {
                for oy in 0..self.ho {
                    for ox in 0..self.wo {
                        let mut s = b[o];
                        for c in 0..self.c {
                            for ky in 0..self.kh {
                                let Some(iy) = self.src(oy, ky, self.h) else { continue };
                                for kx in 0..self.kw {
                                    let Some(ix) = self.src(ox, kx, self.w) else { continue };
                                    s += x[((n * self.c + c) * self.h + iy) * self.w + ix]
                                        * w[((o * self.c + c) * self.kh + ky) * self.kw + kx];
                                }
                            }
                        }
                        out[((n * self.o + o) * self.ho + oy) * self.wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn backward(&self, x: &[f64], w: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; self.o];
        for n in 0..self.n {
            for o in 0..self.o {
                for oy in 0..self.ho {
                    for ox in 0..self.wo {
                        let gv = g[((n * self.o + o) * self.ho + oy) * self.wo + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        db[o] += gv;
                        for c in 0..self.c {
                            for ky in 0..self.kh {
                                let Some(iy) = self.src(oy, ky, self.h) else { continue };
                                for kx in 0..self.kw {
                                    let Some(ix) = self.src(ox, kx, self.w) else { continue };
                                    let xi = ((n * self.c + c) * self.h + iy) * self.w + ix;
                                    let wi = ((o * self.c + c) * self.kh + ky) * self.kw + kx;
                                    dx[xi] += gv * w[wi];
                                    dw[wi] += gv * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        (dx, dw, db)
    }
}
