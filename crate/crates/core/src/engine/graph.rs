//! Tape of tensor operations with reverse-mode gradients.

use super::tensor::gemm;
use super::{EngineError, ParamId, ParamStore, Result, Tensor};
use crate::special::{digamma, ln_1m_exp, ln_gamma, sigmoid, softplus, trigamma};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise map with its pointwise derivative.
    Unary(NodeId, Tensor),
    /// Elementwise same-shape map with both pointwise partials.
    Binary(NodeId, NodeId, Tensor, Tensor),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    SumAll(NodeId),
    SumCols(NodeId),
    Reshape(NodeId),
    GroupSumRows(NodeId, usize),
    StickBreakLog(NodeId, NodeId),
    BatchNorm {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics captured by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> EngineError {
    EngineError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(EngineError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        self.push("param", store.value(id).clone(), Op::Param(id), true)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        if vb.rows() != k {
            return Err(mismatch("matmul", va, vb));
        }
        let mut out = vec![0.0; m * n];
        gemm(va.data(), false, vb.data(), false, m, k, n, &mut out, false);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), needs)
    }

    /// `x·W + bias`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, bias)
    }

    /// `x [R×C] + row [1×C]` broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.rows() != 1 || vr.cols() != vx.cols() {
            return Err(mismatch("add_row", vx, vr));
        }
        let c = vx.cols();
        let mut out = vx.clone().reshaped(vec![vx.rows(), c])?;
        for r in out.data_mut().chunks_mut(c.max(1)) {
            for (o, b) in r.iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(row);
        self.push("add_row", out, Op::AddRow(x, row), needs)
    }

    /// `x [R×C] ⊙ row [1×C]` broadcast over rows.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.rows() != 1 || vr.cols() != vx.cols() {
            return Err(mismatch("mul_row", vx, vr));
        }
        let c = vx.cols();
        let mut out = vx.clone().reshaped(vec![vx.rows(), c])?;
        for r in out.data_mut().chunks_mut(c.max(1)) {
            for (o, b) in r.iter_mut().zip(vr.data()) {
                *o *= b;
            }
        }
        let needs = self.needs(x) || self.needs(row);
        self.push("mul_row", out, Op::MulRow(x, row), needs)
    }

    /// `x [R×C] ⊙ col [R×1]` broadcast over columns.
    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let (vx, vc) = (self.value(x), self.value(col));
        if vc.len() != vx.rows() {
            return Err(mismatch("mul_col", vx, vc));
        }
        let c = vx.cols();
        let mut out = vx.clone().reshaped(vec![vx.rows(), c])?;
        for (r, &s) in out.data_mut().chunks_mut(c.max(1)).zip(vc.data()) {
            r.iter_mut().for_each(|o| *o *= s);
        }
        let needs = self.needs(x) || self.needs(col);
        self.push("mul_col", out, Op::MulCol(x, col), needs)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op, va, vb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= y;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push("sub", out, Op::Sub(a, b), needs)
    }

    /// Elementwise binary map; `f` returns `(value, ∂/∂a, ∂/∂b)`.
    pub fn binary(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> (f64, f64, f64),
    ) -> Result<NodeId> {
        self.same_shape(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = va.len();
        let (mut out, mut da, mut db) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for (&x, &y) in va.data().iter().zip(vb.data()) {
            let (v, dx, dy) = f(x, y);
            out.push(v);
            da.push(dx);
            db.push(dy);
        }
        let shape = va.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        let op = Op::Binary(a, b, Tensor::new(shape.clone(), da)?, Tensor::new(shape.clone(), db)?);
        self.push(op_name, Tensor::new(shape, out)?, op, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| (x * y, y, x))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| (x / y, 1.0 / y, -x / (y * y)))
    }

    /// Elementwise unary map; `f` returns `(value, derivative)`.
    pub fn unary(&mut self, op_name: &'static str, x: NodeId, f: impl Fn(f64) -> (f64, f64)) -> Result<NodeId> {
        let vx = self.value(x);
        let n = vx.len();
        let (mut out, mut d) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for &v in vx.data() {
            let (y, dy) = f(v);
            out.push(y);
            d.push(dy);
        }
        let shape = vx.shape().to_vec();
        let needs = self.needs(x);
        let op = Op::Unary(x, Tensor::new(shape.clone(), d)?);
        self.push(op_name, Tensor::new(shape, out)?, op, needs)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("exp", x, |v| {
            let e = v.exp();
            (e, e)
        })
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("ln", x, |v| (v.ln(), 1.0 / v))
    }

    pub fn expm1(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("expm1", x, |v| (v.exp_m1(), v.exp()))
    }

    /// log(1 − e^x) for x < 0.
    pub fn ln_1m_exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("ln_1m_exp", x, |v| {
            let y = ln_1m_exp(v);
            (y, -(v - y).exp())
        })
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("softplus", x, |v| (softplus(v), sigmoid(v)))
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("recip", x, |v| (1.0 / v, -1.0 / (v * v)))
    }

    pub fn ln_gamma(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("ln_gamma", x, |v| (ln_gamma(v), digamma(v)))
    }

    pub fn digamma(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("digamma", x, |v| (digamma(v), trigamma(v)))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary("clamp", x, |v| {
            if v < lo {
                (lo, 0.0)
            } else if v > hi {
                (hi, 0.0)
            } else {
                (v, 1.0)
            }
        })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary("add_scalar", x, |v| (v + c, 1.0))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * s);
        let needs = self.needs(x);
        self.push("scale", out, Op::Scale(x, s), needs)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.scale(x, -1.0)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let c = vx.cols();
        let mut out = vx.clone().reshaped(vec![vx.rows(), c])?;
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let needs = self.needs(x);
        self.push("softmax_rows", out, Op::SoftmaxRows(x), needs)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let c = vx.cols();
        let mut out = vx.clone().reshaped(vec![vx.rows(), c])?;
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let needs = self.needs(x);
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(x), needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), needs)
    }

    /// Row sums: `[R×C] → [R×1]`.
    pub fn sum_cols(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let c = vx.cols();
        let sums: Vec<f64> = if c == 0 {
            vec![0.0; vx.rows()]
        } else {
            vx.data().chunks(c).map(|r| r.iter().sum()).collect()
        };
        let out = Tensor::matrix(vx.rows(), 1, sums)?;
        let needs = self.needs(x);
        self.push("sum_cols", out, Op::SumCols(x), needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        self.push("reshape", out, Op::Reshape(x), needs)
    }

    /// Sums consecutive groups of `k` rows: `[(B·k)×C] → [B×C]`.
    pub fn group_sum_rows(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if k == 0 || !vx.rows().is_multiple_of(k) {
            return Err(EngineError::ShapeMismatch {
                op: "group_sum_rows",
                left: vx.shape().to_vec(),
                right: vec![k],
            });
        }
        let (b, c) = (vx.rows() / k, vx.cols());
        let mut out = vec![0.0; b * c];
        for (r, row) in vx.data().chunks(c.max(1)).enumerate().take(vx.rows()) {
            let dst = &mut out[(r / k) * c..(r / k + 1) * c];
            dst.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let needs = self.needs(x);
        self.push(
            "group_sum_rows",
            Tensor::matrix(b, c, out)?,
            Op::GroupSumRows(x, k),
            needs,
        )
    }

    /// Log stick weights from log ν and log(1−ν), both `[B×(K−1)]`, giving `[B×K]`:
    /// log π_k = log ν_k + Σ_{l<k} log(1−ν_l), with the residual as the last column.
    pub fn stick_break_log(&mut self, ln_nu: NodeId, ln_1m_nu: NodeId) -> Result<NodeId> {
        self.same_shape("stick_break_log", ln_nu, ln_1m_nu)?;
        let (vn, vm) = (self.value(ln_nu), self.value(ln_1m_nu));
        let (b, km1) = (vn.rows(), vn.cols());
        let k = km1 + 1;
        let mut out = vec![0.0; b * k];
        for r in 0..b {
            let mut acc = 0.0;
            for j in 0..km1 {
                out[r * k + j] = vn.data()[r * km1 + j] + acc;
                acc += vm.data()[r * km1 + j];
            }
            out[r * k + km1] = acc;
        }
        let needs = self.needs(ln_nu) || self.needs(ln_1m_nu);
        self.push(
            "stick_break_log",
            Tensor::matrix(b, k, out)?,
            Op::StickBreakLog(ln_nu, ln_1m_nu),
            needs,
        )
    }

    /// Training-mode batch normalization over rows of `x [B×F]`.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let vx = self.value(x);
        let (b, f) = (vx.rows(), vx.cols());
        for p in [scale, shift] {
            let vp = self.value(p);
            if vp.len() != f {
                return Err(mismatch("batch_norm", vx, vp));
            }
        }
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for row in vx.data().chunks(f.max(1)).take(b) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        for row in vx.data().chunks(f.max(1)).take(b) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= b as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; b * f];
        let mut out = vec![0.0; b * f];
        let (vs, vsh) = (self.value(scale).data(), self.value(shift).data());
        for r in 0..b {
            for j in 0..f {
                let h = (vx.data()[r * f + j] - mean[j]) * inv_std[j];
                xhat[r * f + j] = h;
                out[r * f + j] = h * vs[j] + vsh[j];
            }
        }
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        let op = Op::BatchNorm {
            x,
            scale,
            shift,
            xhat: Tensor::matrix(b, f, xhat)?,
            inv_std,
        };
        let id = self.push("batch_norm", Tensor::matrix(b, f, out)?, op, needs)?;
        Ok((id, BatchStats { mean, var }))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(EngineError::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(out.shape(), 1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((NodeId(i), p)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut send = |id: NodeId, t: Tensor| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => {
                    let shape = self.nodes[id.0].value.shape().to_vec();
                    *slot = Some(t.reshaped(shape).expect("gradient size matches value"));
                }
            }
        };
        let like = |id: NodeId, data: Vec<f64>| {
            Tensor::new(self.nodes[id.0].value.shape().to_vec(), data).expect("gradient size matches value")
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(g.data(), false, vb.data(), true, m, n, k, &mut da, false);
                    send(*a, like(*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(va.data(), true, g.data(), false, k, m, n, &mut db, false);
                    send(*b, like(*b, db));
                }
            }
            Op::AddRow(x, row) => {
                send(*x, g.clone());
                if self.needs(*row) {
                    let c = g.cols();
                    let mut d = vec![0.0; c];
                    for r in g.data().chunks(c.max(1)) {
                        d.iter_mut().zip(r).for_each(|(o, v)| *o += v);
                    }
                    send(*row, like(*row, d));
                }
            }
            Op::MulRow(x, row) => {
                let (vx, vr) = (self.value(*x), self.value(*row));
                let c = g.cols();
                if self.needs(*x) {
                    let mut d = g.data().to_vec();
                    for r in d.chunks_mut(c.max(1)) {
                        r.iter_mut().zip(vr.data()).for_each(|(o, s)| *o *= s);
                    }
                    send(*x, like(*x, d));
                }
                if self.needs(*row) {
                    let mut d = vec![0.0; c];
                    for (gr, xr) in g.data().chunks(c.max(1)).zip(vx.data().chunks(c.max(1))) {
                        for ((o, gv), xv) in d.iter_mut().zip(gr).zip(xr) {
                            *o += gv * xv;
                        }
                    }
                    send(*row, like(*row, d));
                }
            }
            Op::MulCol(x, col) => {
                let (vx, vc) = (self.value(*x), self.value(*col));
                let c = g.cols();
                if self.needs(*x) {
                    let mut d = g.data().to_vec();
                    for (r, &s) in d.chunks_mut(c.max(1)).zip(vc.data()) {
                        r.iter_mut().for_each(|o| *o *= s);
                    }
                    send(*x, like(*x, d));
                }
                if self.needs(*col) {
                    let d: Vec<f64> = g
                        .data()
                        .chunks(c.max(1))
                        .zip(vx.data().chunks(c.max(1)))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    send(*col, like(*col, d));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                if self.needs(*b) {
                    send(*b, g.map(|v| -v));
                }
            }
            Op::Unary(x, d) => {
                let data = g.data().iter().zip(d.data()).map(|(a, b)| a * b).collect();
                send(*x, like(*x, data));
            }
            Op::Binary(a, b, da, db) => {
                if self.needs(*a) {
                    let data = g.data().iter().zip(da.data()).map(|(x, y)| x * y).collect();
                    send(*a, like(*a, data));
                }
                if self.needs(*b) {
                    let data = g.data().iter().zip(db.data()).map(|(x, y)| x * y).collect();
                    send(*b, like(*b, data));
                }
            }
            Op::Scale(x, s) => send(*x, g.map(|v| v * s)),
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(c.max(1))
                    .zip(y.data().chunks(c.max(1)))
                    .zip(g.data().chunks(c.max(1)))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                send(*x, like(*x, d));
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(c.max(1))
                    .zip(y.data().chunks(c.max(1)))
                    .zip(g.data().chunks(c.max(1)))
                {
                    let total: f64 = gr.iter().sum();
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                send(*x, like(*x, d));
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                send(*x, like(*x, vec![g.item(); n]));
            }
            Op::SumCols(x) => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut d = Vec::with_capacity(vx.len());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv, c));
                }
                send(*x, like(*x, d));
            }
            Op::Reshape(x) => send(*x, g.clone()),
            Op::GroupSumRows(x, k) => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut d = Vec::with_capacity(vx.len());
                for r in 0..vx.rows() {
                    d.extend_from_slice(&g.data()[(r / k) * c..(r / k + 1) * c]);
                }
                send(*x, like(*x, d));
            }
            Op::StickBreakLog(ln_nu, ln_1m) => {
                let (b, k) = (g.rows(), g.cols());
                let km1 = k - 1;
                let mut dn = vec![0.0; b * km1];
                let mut dm = vec![0.0; b * km1];
                for r in 0..b {
                    let gr = &g.data()[r * k..(r + 1) * k];
                    let mut suffix = gr[km1];
                    for j in (0..km1).rev() {
                        dn[r * km1 + j] = gr[j];
                        dm[r * km1 + j] = suffix;
                        suffix += gr[j];
                    }
                }
                send(*ln_nu, like(*ln_nu, dn));
                send(*ln_1m, like(*ln_1m, dm));
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let (b, f) = (xhat.rows(), xhat.cols());
                let vs = self.value(*scale).data();
                let mut dscale = vec![0.0; f];
                let mut dshift = vec![0.0; f];
                let mut sum_dxhat = vec![0.0; f];
                let mut sum_dxhat_xhat = vec![0.0; f];
                for r in 0..b {
                    for j in 0..f {
                        let gv = g.data()[r * f + j];
                        let h = xhat.data()[r * f + j];
                        dscale[j] += gv * h;
                        dshift[j] += gv;
                        let dh = gv * vs[j];
                        sum_dxhat[j] += dh;
                        sum_dxhat_xhat[j] += dh * h;
                    }
                }
                if self.needs(*x) {
                    let bn = b as f64;
                    let mut dx = vec![0.0; b * f];
                    for r in 0..b {
                        for j in 0..f {
                            let dh = g.data()[r * f + j] * vs[j];
                            let h = xhat.data()[r * f + j];
                            dx[r * f + j] = inv_std[j] / bn * (bn * dh - sum_dxhat[j] - h * sum_dxhat_xhat[j]);
                        }
                    }
                    send(*x, like(*x, dx));
                }
                send(*scale, like(*scale, dscale));
                send(*shift, like(*shift, dshift));
            }
        }
    }
}

/// Gradients from one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(NodeId, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Adds every parameter leaf's gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node.0] {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
    }
}
