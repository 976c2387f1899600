//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! as leaves (memoized per [`ParamId`]), constants as leaves that never
//! receive gradient. [`Graph::backward`] walks the tape once in reverse.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, rstd: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    VCat(Vec<Var>),
    HCat(Vec<Var>),
    Transpose(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Pick { x: Var, idx: Vec<(usize, usize)> },
    LogSumExpRows(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Which entries of a score matrix take part in a row softmax.
#[derive(Debug, Clone, Default)]
pub struct SoftmaxMask<'a> {
    /// Per-column validity; `None` means every column is valid.
    pub keys: Option<&'a [bool]>,
    /// Row `i` only sees columns `0..=i`.
    pub causal: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: BTreeMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Graph {
    /// Graph that records gradients for trainable parameters.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, params: BTreeMap::new(), dropout_rng: None }
    }

    /// Forward-only graph; nothing receives gradient.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    /// Enables dropout driven by `rng`. Without this, dropout is the identity.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradient, for differentiating with respect to inputs.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds the `1 x m` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), bv.cols(), "add_row width mismatch");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(value, Op::AddRow(a, bias), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    /// `ln(1 + e^x)`
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(value, Op::Softplus(a), ng)
    }

    /// Row-wise softmax. Masked-out entries get probability zero; a row with
    /// no valid entry is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: &SoftmaxMask<'_>) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let valid = |c: usize| {
                mask.keys.map_or(true, |k| k[c]) && (!mask.causal || c <= r)
            };
            let row = x.row(r);
            let max = (0..x.cols())
                .filter(|&c| valid(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let out = value.row_mut(r);
            let mut total = 0.0;
            for c in 0..out.len() {
                if valid(c) {
                    out[c] = (row[c] - max).exp();
                    total += out[c];
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
            crate::audit::record_distribution(out);
        }
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..x.rows() {
            let lse = crate::tensor::log_sum_exp(x.row(r));
            for v in value.row_mut(r) {
                *v -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    /// Row-wise layer normalization with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Matrix::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        let mut value = Matrix::zeros(n, d);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                value.set(r, c, h * g[c] + b[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng)
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let value = Matrix::new(ids.len(), t.cols(), data);
        let ng = self.ng(table);
        self.push(value, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_rows(start, len);
        let ng = self.ng(x);
        self.push(value, Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_cols(start, len);
        let ng = self.ng(x);
        self.push(value, Op::SliceCols { x, start }, ng)
    }

    /// Stacks matrices vertically.
    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "vcat width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::new(rows, cols, data), Op::VCat(parts.to_vec()), ng)
    }

    /// Joins matrices side by side.
    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "hcat height mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::HCat(parts.to_vec()), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(value, Op::Transpose(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::SumAll(x), ng)
    }

    /// Collapses rows: `n x m -> 1 x m`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = vec![0.0; v.cols()];
        for r in 0..v.rows() {
            for (o, a) in out.iter_mut().zip(v.row(r)) {
                *o += a;
            }
        }
        let ng = self.ng(x);
        self.push(Matrix::row_vector(out), Op::SumRows(x), ng)
    }

    /// Collapses columns: `n x m -> n x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let ng = self.ng(x);
        self.push(Matrix::col_vector(out), Op::SumCols(x), ng)
    }

    /// Gathers single entries into a column vector.
    pub fn pick(&mut self, x: Var, idx: &[(usize, usize)]) -> Var {
        let v = self.value(x);
        let out = idx.iter().map(|&(r, c)| v.get(r, c)).collect();
        let ng = self.ng(x);
        self.push(Matrix::col_vector(out), Op::Pick { x, idx: idx.to_vec() }, ng)
    }

    /// `n x m -> n x 1`, each entry `log(sum(exp(row)))`.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = (0..v.rows()).map(|r| crate::tensor::log_sum_exp(v.row(r))).collect();
        let ng = self.ng(x);
        self.push(Matrix::col_vector(out), Op::LogSumExpRows(x), ng)
    }

    /// Inverted dropout; identity unless the graph was built with a dropout RNG.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let (r, c) = self.nodes[x.0].value.shape();
        let keep = 1.0 - rate;
        let mask = (0..r * c).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = self.constant(Matrix::new(r, c, mask));
        self.mul(x, m)
    }

    /// Runs reverse accumulation from the scalar `loss`, seeded with `seed`.
    pub fn backward(&self, loss: Var, seed: f64) -> Backprop {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(seed));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Backprop { grads, params: self.params.clone() }
    }

    fn backprop_node(&self, node: &Node, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let send = |v: Var, g: Matrix, grads: &mut [Option<Matrix>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    send(*a, dy.matmul_t(self.value(*b)), grads);
                }
                if self.ng(*b) {
                    send(*b, self.value(*a).t_matmul(dy), grads);
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    send(*a, dy.matmul(self.value(*b)), grads);
                }
                if self.ng(*b) {
                    send(*b, dy.t_matmul(self.value(*a)), grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, dy.clone(), grads);
                send(*b, dy.clone(), grads);
            }
            Op::AddRow(a, bias) => {
                send(*a, dy.clone(), grads);
                if self.ng(*bias) {
                    let mut db = vec![0.0; dy.cols()];
                    for r in 0..dy.rows() {
                        for (o, g) in db.iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                    send(*bias, Matrix::row_vector(db), grads);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    send(*a, dy.zip_map(self.value(*b), |g, y| g * y), grads);
                }
                if self.ng(*b) {
                    send(*b, dy.zip_map(self.value(*a), |g, x| g * x), grads);
                }
            }
            Op::Scale(a, s) => send(*a, dy.map(|g| g * s), grads),
            Op::Gelu(a) => {
                let d = self.value(*a).map(|x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
                });
                send(*a, dy.zip_map(&d, |g, s| g * s), grads);
            }
            Op::Softplus(a) => {
                send(*a, dy.zip_map(self.value(*a), |g, x| g * sigmoid(x)), grads);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = crate::tensor::dot(y.row(r), dy.row(r));
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = y.get(r, c) * (dy.get(r, c) - inner);
                    }
                }
                send(*a, dx, grads);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let total: f64 = dy.row(r).iter().sum();
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = dy.get(r, c) - y.get(r, c).exp() * total;
                    }
                }
                send(*a, dx, grads);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (n, d) = xhat.shape();
                let g = self.value(*gain).data();
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            dg[c] += dy.get(r, c) * xhat.get(r, c);
                            db[c] += dy.get(r, c);
                        }
                    }
                    send(*gain, Matrix::row_vector(dg), grads);
                    send(*bias, Matrix::row_vector(db), grads);
                }
                if self.ng(*x) {
                    let mut dx = Matrix::zeros(n, d);
                    for r in 0..n {
                        let dxhat: Vec<f64> = (0..d).map(|c| dy.get(r, c) * g[c]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = (0..d).map(|c| dxhat[c] * xhat.get(r, c)).sum::<f64>() / d as f64;
                        for c in 0..d {
                            dx.set(r, c, rstd[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx));
                        }
                    }
                    send(*x, dx, grads);
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, g) in dt.row_mut(id).iter_mut().zip(dy.row(i)) {
                        *o += g;
                    }
                }
                send(*table, dt, grads);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..dy.rows() {
                    dx.row_mut(start + r).copy_from_slice(dy.row(r));
                }
                send(*x, dx, grads);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..dy.rows() {
                    dx.row_mut(r)[*start..start + dy.cols()].copy_from_slice(dy.row(r));
                }
                send(*x, dx, grads);
            }
            Op::VCat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.ng(p) {
                        send(p, dy.slice_rows(offset, rows), grads);
                    }
                    offset += rows;
                }
            }
            Op::HCat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.ng(p) {
                        send(p, dy.slice_cols(offset, cols), grads);
                    }
                    offset += cols;
                }
            }
            Op::Transpose(x) => send(*x, dy.transpose(), grads),
            Op::SumAll(x) => {
                let (r, c) = self.value(*x).shape();
                send(*x, Matrix::filled(r, c, dy.item()), grads);
            }
            Op::SumRows(x) => {
                let (r, c) = self.value(*x).shape();
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i).copy_from_slice(dy.row(0));
                }
                send(*x, dx, grads);
            }
            Op::SumCols(x) => {
                let (r, c) = self.value(*x).shape();
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    let g = dy.get(i, 0);
                    dx.row_mut(i).iter_mut().for_each(|v| *v = g);
                }
                send(*x, dx, grads);
            }
            Op::Pick { x, idx } => {
                let (r, c) = self.value(*x).shape();
                let mut dx = Matrix::zeros(r, c);
                for (k, &(i, j)) in idx.iter().enumerate() {
                    dx.set(i, j, dx.get(i, j) + dy.get(k, 0));
                }
                send(*x, dx, grads);
            }
            Op::LogSumExpRows(x) => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let lse = node.value.get(r, 0);
                    let g = dy.get(r, 0);
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = g * (xv.get(r, c) - lse).exp();
                    }
                }
                send(*x, dx, grads);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of one backward pass.
pub struct Backprop {
    grads: Vec<Option<Matrix>>,
    params: BTreeMap<ParamId, Var>,
}

impl Backprop {
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter gradient into `out`.
    pub fn accumulate_into(&self, out: &mut Gradients) {
        for (&id, &v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                out.accumulate(id, g);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
