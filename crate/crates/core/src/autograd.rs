//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar node with respect to every node that transitively depends on a
//! differentiable leaf. Leaves created with [`Graph::constant`] never receive
//! gradients, so frozen sub-networks cost nothing on the backward pass.

use crate::tensor::Matrix;

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
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Transpose(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Matrix, inv_std: Vec<f64> },
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    MeanRows(usize),
    SumAll(usize),
    Embed(usize, Vec<usize>),
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Matrix },
    BceWithLogits { logit: usize, target: f64 },
    SqDist(usize, usize),
    L2NormalizeRows { x: usize, norms: Vec<f64> },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction. Entries equal to `-inf` get
/// probability zero.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::MatMul(a.0, b.0), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::MatMulT(a.0, b.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::Add(a.0, b.0), rg)
    }

    /// Adds the `1 × c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "add_row expects a row vector");
        assert_eq!(bias.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(bias.data()) {
                *v += b;
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::AddRow(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::Mul(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Scale(a.0, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::AddScalar(a.0), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Transpose(a.0), rg)
    }

    /// `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Relu(a.0), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Gelu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Sigmoid(a.0), rg)
    }

    /// Row-wise softmax. `-inf` entries act as masks.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Softmax(a.0), rg)
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (both `1 × c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        assert_eq!(g.len(), cols, "layer_norm gamma width");
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        self.push(out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::SliceCols(a.0, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_rows(start, len);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::SliceRows(a.0, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Matrix::concat_cols(&mats);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.push(value, Op::ConcatCols(ids), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Matrix::concat_rows(&mats);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.push(value, Op::ConcatRows(ids), rg)
    }

    /// Column means, `r × c → 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        let rg = self.rg(&[a.0]);
        self.push(value, Op::MeanRows(a.0), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a.0]);
        self.push(value, Op::SumAll(a.0), rg)
    }

    /// Gathers rows of `table` by index (embedding lookup).
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        let rg = self.rg(&[table.0]);
        self.push(value, Op::Embed(table.0, ids.to_vec()), rg)
    }

    /// Summed negative log-likelihood of `targets[r]` under `softmax(logits[r])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "one target per logit row");
        let probs = softmax_rows(l);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = l.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse =
                max + row.iter().map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() }).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let rg = self.rg(&[logits.0]);
        self.push(Matrix::scalar(loss), Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs }, rg)
    }

    /// Numerically stable binary cross-entropy on a `1 × 1` logit.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Var {
        let x = self.value(logit).item();
        let loss = x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
        let rg = self.rg(&[logit.0]);
        self.push(Matrix::scalar(loss), Op::BceWithLogits { logit: logit.0, target }, rg)
    }

    /// Squared Euclidean distance between two same-shape nodes, as `1 × 1`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let d: f64 = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(&[a.0, b.0]);
        self.push(Matrix::scalar(d), Op::SqDist(a.0, b.0), rg)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            for v in value.row_mut(r) {
                *v /= n;
            }
        }
        let rg = self.rg(&[a.0]);
        self.push(value, Op::L2NormalizeRows { x: a.0, norms }, rg)
    }

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward expects a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, contribution: Matrix| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => existing.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[*a].requires_grad {
                    acc(*a, g.matmul_t(val(*b)));
                }
                if self.nodes[*b].requires_grad {
                    acc(*b, val(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.nodes[*a].requires_grad {
                    acc(*a, g.matmul(val(*b)));
                }
                if self.nodes[*b].requires_grad {
                    acc(*b, g.t_matmul(val(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.sum_rows());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::Gelu(a) => acc(*a, g.zip_map(val(*a), |gv, x| gv * gelu_grad(x))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))),
            Op::Softmax(a) => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - s);
                    }
                }
                acc(*a, out);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = val(*gamma).data();
                let (rows, cols) = xhat.shape();
                if self.nodes[*gamma].requires_grad {
                    acc(*gamma, g.zip_map(xhat, |a, b| a * b).sum_rows());
                }
                if self.nodes[*beta].requires_grad {
                    acc(*beta, g.sum_rows());
                }
                if self.nodes[*x].requires_grad {
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let dxhat: Vec<f64> = (0..cols).map(|c| gr[c] * gam[c]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dxhat.iter().zip(hr).map(|(d, h)| d * h).sum::<f64>() / cols as f64;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxhat[c] - m1 - hr[c] * m2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let mut out = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    out.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, out);
            }
            Op::SliceRows(a, start) => {
                let src = val(*a);
                let mut out = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    out.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*a, out);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, g.slice_cols(offset, w));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = val(p).rows();
                    acc(p, g.slice_rows(offset, h));
                    offset += h;
                }
            }
            Op::MeanRows(a) => {
                let rows = val(*a).rows();
                let mut out = Matrix::zeros(rows, g.cols());
                let inv = 1.0 / rows as f64;
                for r in 0..rows {
                    for (o, gv) in out.row_mut(r).iter_mut().zip(g.data()) {
                        *o = gv * inv;
                    }
                }
                acc(*a, out);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::Embed(table, ids) => {
                let t = val(*table);
                let mut out = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, gv) in out.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                acc(*table, out);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let gs = g.item();
                let mut out = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    out.set(r, t, out.get(r, t) - 1.0);
                }
                acc(*logits, out.scale(gs));
            }
            Op::BceWithLogits { logit, target } => {
                let x = val(*logit).item();
                acc(*logit, Matrix::scalar(g.item() * (sigmoid(x) - target)));
            }
            Op::SqDist(a, b) => {
                let diff = val(*a).zip_map(val(*b), |x, y| x - y);
                let s = 2.0 * g.item();
                acc(*a, diff.scale(s));
                acc(*b, diff.scale(-s));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let d: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[c] - yr[c] * d) / norms[r];
                    }
                }
                acc(*x, out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Matrix) -> f64, x: &Matrix) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    fn check(build: impl Fn(&mut Graph, Var) -> Var, x: Matrix) {
        let eval = |m: &Matrix| {
            let mut g = Graph::new();
            let v = g.param(m.clone());
            let out = build(&mut g, v);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let numeric = numeric_grad(eval, &x);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let denom = a.abs().max(n.abs()).max(1e-3);
            assert!((a - n).abs() / denom < 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn layer_norm_softmax_chain_gradient() {
        let w = sample(4, 3, 9);
        check(
            |g, x| {
                let gamma = g.constant(Matrix::from_vec(1, 4, vec![1.0, 0.5, -0.3, 2.0]));
                let beta = g.constant(Matrix::from_vec(1, 4, vec![0.1, 0.0, 0.2, -0.1]));
                let wv = g.constant(w.clone());
                let n = g.layer_norm(x, gamma, beta, 1e-5);
                let h = g.gelu(n);
                let p = g.matmul(h, wv);
                let q = g.matmul_t(h, x);
                let p = g.add(p, q);
                let s = g.softmax(p);
                let t = g.transpose(s);
                let m = g.mean_rows(t);
                let m = g.relu(m);
                let m = g.add_scalar(m, 0.1);
                let sq = g.mul(m, m);
                g.sum_all(sq)
            },
            sample(3, 4, 1),
        );
    }

    #[test]
    fn cross_entropy_and_bce_gradients() {
        check(|g, x| g.cross_entropy(x, &[2, 0, 1]), sample(3, 4, 2));
        check(
            |g, x| {
                let s = g.slice_cols(x, 1, 1);
                let r = g.slice_rows(s, 0, 1);
                g.bce_with_logits(r, 1.0)
            },
            sample(2, 3, 3),
        );
    }

    #[test]
    fn embed_concat_normalize_gradients() {
        check(
            |g, x| {
                let e = g.embed(x, &[1, 1, 0]);
                let c = g.concat_cols(&[e, e]);
                let rr = g.concat_rows(&[c, c]);
                let n = g.l2_normalize_rows(rr);
                let sig = g.sigmoid(n);
                let other = g.constant(Matrix::filled(6, 6, 0.3));
                g.sq_dist(sig, other)
            },
            sample(2, 3, 4),
        );
    }

    #[test]
    fn softmax_handles_masked_and_huge_scores() {
        let m = Matrix::from_rows(&[vec![1e4, -1e4, f64::NEG_INFINITY], vec![0.0, 0.0, 0.0]]);
        let p = softmax_rows(&m);
        assert!(p.is_finite());
        assert_eq!(p.get(0, 2), 0.0);
        assert!((p.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Matrix::filled(2, 2, 1.0));
        let p = g.param(Matrix::filled(2, 2, 2.0));
        let m = g.matmul(c, p);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }
}
