use super::kernels::{self, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{Tensor, MASK_BIG};
use crate::error::{Error, Result};

const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
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
    MatMulT(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    LayerNorm(Var, Vec<f64>),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Concat(Vec<Var>),
    LogSumExp(Var),
    BceLogits(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A tape of tensor operations. Nodes are appended in evaluation order, which is
/// a topological order by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected rank 2, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    // ---- linear algebra ----

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t")?;
        let (n, k2) = self.dims2(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMulT(a, b),
            rg,
        ))
    }

    /// `x[m,k] · w[k,n] + bias[n]`
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims2(x, "linear")?;
        let (k2, n) = self.dims2(w, "linear")?;
        if k != k2 {
            return Err(Error::shape("linear", format!("input [{m},{k}], weight [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = bias {
            if self.shape(b) != [n] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?}, expected [{n}]", self.shape(b)),
                ));
            }
            let bd = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bd);
            }
        }
        matmul_acc(self.value(x).data(), self.value(w).data(), m, k, n, &mut out);
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::Linear(x, w, bias),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            Op::Transpose(a),
            rg,
        ))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    /// `a[m,n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&1);
        if self.shape(row) != [n] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let r = self.value(row).data().to_vec();
        let t = self.value(a);
        let mut data = t.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, rv) in chunk.iter_mut().zip(&r) {
                *d += rv;
            }
        }
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Layer normalization over the last dimension, without affine parameters.
    pub fn layernorm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().unwrap_or(&1);
        let rows = t.len() / n.max(1);
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::LayerNorm(a, inv_std), rg)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            kernels::softmax_row(row);
        }
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Row-wise softmax of `logits + mask`. `mask` is a constant with entries in
    /// `{0, -MASK_BIG}`, shaped like `logits` or like one row of it. A row whose
    /// mask is entirely `-MASK_BIG` is treated as unmasked.
    pub fn masked_softmax(&mut self, logits: Var, mask: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        let n = *t.shape().last().unwrap_or(&1);
        let broadcast = mask.shape() == [n];
        if !broadcast && mask.shape() != t.shape() {
            return Err(Error::shape(
                "masked_softmax",
                format!("logits {:?}, mask {:?}", t.shape(), mask.shape()),
            ));
        }
        let mut data = t.data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            let m = if broadcast {
                mask.data()
            } else {
                &mask.data()[r * n..(r + 1) * n]
            };
            if m.iter().any(|&v| v > -MASK_BIG * 0.5) {
                for (x, mv) in row.iter_mut().zip(m) {
                    *x += mv;
                }
            }
            kernels::softmax_row(row);
        }
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::Softmax(logits), rg))
    }

    // ---- reductions and indexing ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sum over the last dimension: `[m,n] -> [m]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "sum_rows")?;
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| r.iter().sum())
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![m],
                data,
            },
            Op::SumRows(a),
            rg,
        ))
    }

    /// Flat gather into a 1-D tensor.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.len()) {
            return Err(Error::shape("gather", format!("index {bad} >= {}", t.len())));
        }
        let data = idx.iter().map(|&i| t.data()[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![idx.len()],
                data,
            },
            Op::Gather(a, idx.to_vec()),
            rg,
        ))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape("select_rows", format!("row {bad} >= {m}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![rows.len(), n],
                data,
            },
            Op::SelectRows(a, rows.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {n}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![m, len],
                data,
            },
            Op::SliceCols(a, start),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no parts"))?;
        let (m, _) = self.dims2(*first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(Error::shape("concat_cols", format!("row count {pm} vs {m}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor {
                shape: vec![m, total],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Flatten and concatenate into one 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        let rg = self.rg(parts);
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg)
    }

    /// `log Σ exp(a)` over all entries.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let s = kernels::logsumexp(self.value(a).data());
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::LogSumExp(a), rg)
    }

    /// Elementwise binary cross-entropy of logits against constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} targets", t.len(), targets.len()),
            ));
        }
        let data = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| kernels::softplus(x) - x * y)
            .collect();
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::BceLogits(logits, targets.to_vec()), rg))
    }

    /// Weighted mean over rows of `-log softmax(logits[q])[targets[q]]`:
    /// `Σ_q w_q·CE_q / Σ_q w_q`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = t.dims2()?;
        if targets.len() != rows || weights.len() != rows || targets.iter().any(|&c| c >= cols) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows}x{cols} logits vs {} targets / {} weights", targets.len(), weights.len()),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("cross_entropy weights sum to zero".into()));
        }
        let loss = (0..rows)
            .map(|q| weights[q] * (kernels::logsumexp(t.row(q)) - t.at2(q, targets[q])))
            .sum::<f64>()
            / total;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, targets.to_vec(), weights.iter().map(|w| w / total).collect()),
            rg,
        ))
    }

    // ---- backward ----

    /// Reverse-mode pass from a scalar `loss`. Populates gradients on every node
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.requires_grad(loss) {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;

        macro_rules! with_slot {
            ($v:expr, |$acc:ident| $body:block) => {
                if let Some($acc) = grad_slot(nodes, grads, $v) $body
            };
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(&nodes[a.0].value);
                let n = nodes[b.0].value.shape()[1];
                with_slot!(*a, |ga| { matmul_bt_acc(g, val(*b), m, n, k, ga) });
                with_slot!(*b, |gb| { matmul_at_acc(val(*a), g, m, k, n, gb) });
            }
            Op::MatMulT(a, b) => {
                // out[m,n] = a[m,k] b[n,k]^T
                let (m, k) = dims(&nodes[a.0].value);
                let n = nodes[b.0].value.shape()[0];
                with_slot!(*a, |ga| { matmul_acc(g, val(*b), m, n, k, ga) });
                with_slot!(*b, |gb| { matmul_at_acc(g, val(*a), m, n, k, gb) });
            }
            Op::Linear(x, w, b) => {
                let (m, k) = dims(&nodes[x.0].value);
                let n = nodes[w.0].value.shape()[1];
                with_slot!(*x, |gx| { matmul_bt_acc(g, val(*w), m, n, k, gx) });
                with_slot!(*w, |gw| { matmul_at_acc(val(*x), g, m, k, n, gw) });
                if let Some(b) = b {
                    with_slot!(*b, |gb| {
                        for row in g.chunks(n) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                with_slot!(*a, |ga| { axpy(ga, g, 1.0) });
                with_slot!(*b, |gb| { axpy(gb, g, 1.0) });
            }
            Op::Sub(a, b) => {
                with_slot!(*a, |ga| { axpy(ga, g, 1.0) });
                with_slot!(*b, |gb| { axpy(gb, g, -1.0) });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                with_slot!(*a, |ga| {
                    for ((acc, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *acc += gi * y;
                    }
                });
                with_slot!(*b, |gb| {
                    for ((acc, gi), x) in gb.iter_mut().zip(g).zip(av) {
                        *acc += gi * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                with_slot!(*a, |ga| {
                    for ((acc, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *acc += gi / y;
                    }
                });
                with_slot!(*b, |gb| {
                    for (((acc, gi), y), o) in gb.iter_mut().zip(g).zip(bv).zip(out) {
                        *acc -= gi * o / y;
                    }
                });
            }
            Op::AddRow(a, row) => {
                with_slot!(*a, |ga| { axpy(ga, g, 1.0) });
                with_slot!(*row, |gr| {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        for (acc, v) in gr.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                with_slot!(*a, |ga| { axpy(ga, g, *s) });
            }
            Op::Shift(a) | Op::Reshape(a) => {
                with_slot!(*a, |ga| { axpy(ga, g, 1.0) });
            }
            Op::Relu(a) => {
                let av = val(*a);
                with_slot!(*a, |ga| {
                    for ((acc, gi), x) in ga.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *acc += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                with_slot!(*a, |ga| {
                    for ((acc, gi), y) in ga.iter_mut().zip(g).zip(out) {
                        *acc += gi * y * (1.0 - y);
                    }
                });
            }
            Op::Exp(a) => {
                with_slot!(*a, |ga| {
                    for ((acc, gi), y) in ga.iter_mut().zip(g).zip(out) {
                        *acc += gi * y;
                    }
                });
            }
            Op::Log(a) => {
                let av = val(*a);
                with_slot!(*a, |ga| {
                    for ((acc, gi), x) in ga.iter_mut().zip(g).zip(av) {
                        *acc += gi / x;
                    }
                });
            }
            Op::Sqrt(a) => {
                with_slot!(*a, |ga| {
                    for ((acc, gi), y) in ga.iter_mut().zip(g).zip(out) {
                        *acc += gi * 0.5 / y;
                    }
                });
            }
            Op::LayerNorm(a, inv_std) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                with_slot!(*a, |ga| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &out[r * n..(r + 1) * n];
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            ga[r * n + j] += inv * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                with_slot!(*a, |ga| {
                    for ((gr, yr), accr) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            accr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                with_slot!(*a, |ga| {
                    for acc in ga.iter_mut() {
                        *acc += g[0];
                    }
                });
            }
            Op::Mean(a) => {
                with_slot!(*a, |ga| {
                    let s = g[0] / ga.len() as f64;
                    for acc in ga.iter_mut() {
                        *acc += s;
                    }
                });
            }
            Op::SumRows(a) => {
                with_slot!(*a, |ga| {
                    let n = ga.len() / g.len();
                    for (chunk, gi) in ga.chunks_mut(n).zip(g) {
                        for acc in chunk {
                            *acc += gi;
                        }
                    }
                });
            }
            Op::Gather(a, idx) => {
                with_slot!(*a, |ga| {
                    for (&j, gi) in idx.iter().zip(g) {
                        ga[j] += gi;
                    }
                });
            }
            Op::SelectRows(a, rows) => {
                with_slot!(*a, |ga| {
                    let n = *node.value.shape().last().unwrap_or(&1);
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            ga[r * n + j] += g[k * n + j];
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = dims(&nodes[a.0].value);
                with_slot!(*a, |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (m, n) = dims(&nodes[a.0].value);
                let len = node.value.shape()[1];
                with_slot!(*a, |ga| {
                    for r in 0..m {
                        for c in 0..len {
                            ga[r * n + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    with_slot!(p, |gp| {
                        for r in 0..m {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    with_slot!(p, |gp| { axpy(gp, &g[offset..offset + len], 1.0) });
                    offset += len;
                }
            }
            Op::LogSumExp(a) => {
                let av = val(*a);
                let lse = out[0];
                with_slot!(*a, |ga| {
                    for (acc, x) in ga.iter_mut().zip(av) {
                        *acc += g[0] * (x - lse).exp();
                    }
                });
            }
            Op::BceLogits(a, targets) => {
                let av = val(*a);
                with_slot!(*a, |ga| {
                    for (((acc, gi), x), y) in ga.iter_mut().zip(g).zip(av).zip(targets) {
                        *acc += gi * (kernels::sigmoid(*x) - y);
                    }
                });
            }
            Op::CrossEntropy(a, targets, weights) => {
                let av = val(*a);
                let cols = nodes[a.0].value.shape()[1];
                with_slot!(*a, |ga| {
                    for (q, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let mut p = av[q * cols..(q + 1) * cols].to_vec();
                        kernels::softmax_row(&mut p);
                        p[t] -= 1.0;
                        for (acc, pi) in ga[q * cols..(q + 1) * cols].iter_mut().zip(&p) {
                            *acc += g[0] * w * pi;
                        }
                    }
                });
            }
        }
    }
}

fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn axpy(acc: &mut [f64], g: &[f64], s: f64) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += s * v;
    }
}
