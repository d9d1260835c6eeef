use std::collections::HashMap;
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Sqrt(Var),
    Recip(Var),
    RowSum(Var),
    Sum(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Softmax(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherCols(Var, Rc<[usize]>),
    MaxRows(Var, Vec<usize>),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.sum_sq()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    /// Adds `other` into `self`, creating entries where `self` has none.
    pub fn accumulate(&mut self, other: Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(other.grads) {
            if let Some(g) = g {
                match slot {
                    Some(s) => s.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
    }
}

/// Reverse-mode tape over dense matrices.
///
/// Parameters are read by reference from a [`ParamStore`]; parameters marked
/// frozen enter the tape as constants and never receive gradient.
pub struct Graph<'a> {
    store: &'a ParamStore,
    trainable: Option<Rc<[bool]>>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'a> Graph<'a> {
    /// All parameters of `store` receive gradients.
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, trainable: None, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    /// Only parameters with `trainable[id] == true` receive gradients.
    pub fn with_trainable(store: &'a ParamStore, trainable: Rc<[bool]>) -> Self {
        assert_eq!(trainable.len(), store.len(), "trainable mask length mismatch");
        Self { store, trainable: Some(trainable), nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let requires_grad = self.trainable.as_ref().is_none_or(|m| m[id.0]);
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `1×c` row to every row of `a` (`r×c`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..av.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row `i` of `a` (`r×c`) by `col[i]` (`r×1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.cols(), 1, "mul_col expects a column vector");
        assert_eq!(av.rows(), cv.rows(), "mul_col height mismatch");
        let mut out = av.clone();
        for r in 0..av.rows() {
            let s = cv.data()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(out, Op::Sqrt(a), rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / x);
        let rg = self.rg(a);
        self.push(out, Op::Recip(a), rg)
    }

    /// `r×c → r×1`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(av.rows(), 1, data);
        let rg = self.rg(a);
        self.push(out, Op::RowSum(a), rg)
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Row-wise layer normalization with affine `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (rows, cols) = xv.shape();
        assert_eq!(g.shape(), (1, cols), "layer_norm gain shape");
        assert_eq!(b.shape(), (1, cols), "layer_norm bias shape");
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Row-wise softmax. Entries with `mask[r * cols + c] == false` get zero
    /// probability; every row must keep at least one unmasked entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        if let Some(m) = mask {
            assert_eq!(m.len(), rows * cols, "softmax mask shape mismatch");
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = av.row(r);
            let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
            assert!((0..cols).any(keep), "softmax row {r} is fully masked");
            let max = (0..cols).filter(|&c| keep(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..cols {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    out.set(r, c, e);
                    total += e;
                }
            }
            for o in out.row_mut(r) {
                *o /= total;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// `out[:, j] = a[:, idx[j]]`; indices may repeat.
    pub fn gather_cols(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows(), idx.len());
        for r in 0..av.rows() {
            let src = av.row(r);
            for (o, &i) in out.row_mut(r).iter_mut().zip(idx.iter()) {
                *o = src[i];
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::GatherCols(a, idx), rg)
    }

    /// Column-wise maximum over rows, `r×c → 1×c`. Ties go to the first row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        assert!(rows > 0, "max_rows on empty tensor");
        let mut arg = vec![0usize; cols];
        let mut out = av.row(0).to_vec();
        for r in 1..rows {
            for c in 0..cols {
                let v = av.get(r, c);
                if v > out[c] {
                    out[c] = v;
                    arg[c] = r;
                }
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::row_vector(out), Op::MaxRows(a, arg), rg)
    }

    /// Reverse sweep from scalar `loss`; returns gradients of every
    /// parameter that influenced it.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients { grads: vec![None; self.store.len()] };
        if !self.rg(loss) {
            return out;
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let send = |v: Var, d: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match &mut out.grads[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        send(*a, g.matmul_t(self.value(*b)), &mut grads);
                    }
                    if self.rg(*b) {
                        send(*b, self.value(*a).t_matmul(&g), &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    if self.rg(*a) {
                        send(*a, g.matmul(self.value(*b)), &mut grads);
                    }
                    if self.rg(*b) {
                        send(*b, g.t_matmul(self.value(*a)), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        send(*b, g.clone(), &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        send(*b, g.scale(-1.0), &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        send(*a, g.zip_map(self.value(*b), |x, y| x * y), &mut grads);
                    }
                    if self.rg(*b) {
                        send(*b, g.zip_map(self.value(*a), |x, y| x * y), &mut grads);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let mut d = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in d.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        send(*row, d, &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (self.value(*a), self.value(*col));
                    if self.rg(*col) {
                        let data = (0..g.rows())
                            .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                            .collect();
                        send(*col, Tensor::from_vec(g.rows(), 1, data), &mut grads);
                    }
                    if self.rg(*a) {
                        let mut d = g;
                        for r in 0..d.rows() {
                            let s = cv.data()[r];
                            for v in d.row_mut(r) {
                                *v *= s;
                            }
                        }
                        send(*a, d, &mut grads);
                    }
                }
                Op::Scale(a, s) => send(*a, g.scale(*s), &mut grads),
                Op::AddScalar(a) => send(*a, g, &mut grads),
                Op::Silu(a) => {
                    let d = g.zip_map(self.value(*a), |gv, x| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        gv * s * (1.0 + x * (1.0 - s))
                    });
                    send(*a, d, &mut grads);
                }
                Op::Sqrt(a) => {
                    let y = self.value(Var(i));
                    send(*a, g.zip_map(y, |gv, yv| gv * 0.5 / yv), &mut grads);
                }
                Op::Recip(a) => {
                    let y = self.value(Var(i));
                    send(*a, g.zip_map(y, |gv, yv| -gv * yv * yv), &mut grads);
                }
                Op::RowSum(a) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let gv = g.data()[r];
                        for v in d.row_mut(r) {
                            *v = gv;
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    send(*a, Tensor::filled(rows, cols, g.item()), &mut grads);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gam = self.value(*gamma);
                    let (rows, cols) = xhat.shape();
                    if self.rg(*gamma) || self.rg(*beta) {
                        let mut dg = Tensor::zeros(1, cols);
                        let mut db = Tensor::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                let gv = g.get(r, c);
                                dg.data_mut()[c] += gv * xhat.get(r, c);
                                db.data_mut()[c] += gv;
                            }
                        }
                        if self.rg(*gamma) {
                            send(*gamma, dg, &mut grads);
                        }
                        if self.rg(*beta) {
                            send(*beta, db, &mut grads);
                        }
                    }
                    if self.rg(*x) {
                        let n = cols as f64;
                        let mut dx = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            let dxhat: Vec<f64> = (0..cols).map(|c| g.get(r, c) * gam.data()[c]).collect();
                            let s1: f64 = dxhat.iter().sum();
                            let s2: f64 = dxhat.iter().enumerate().map(|(c, d)| d * xhat.get(r, c)).sum();
                            for c in 0..cols {
                                let v = inv_std[r] / n * (n * dxhat[c] - s1 - xhat.get(r, c) * s2);
                                dx.set(r, c, v);
                            }
                        }
                        send(*x, dx, &mut grads);
                    }
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(i));
                    let (rows, cols) = y.shape();
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Tensor::zeros(rows, cols);
                    let len = g.cols();
                    for r in 0..rows {
                        d.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                    }
                    send(*a, d, &mut grads);
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Tensor::zeros(rows, cols);
                    d.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    send(*a, d, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.rg(p) {
                            send(p, g.slice_cols(off, w), &mut grads);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        if self.rg(p) {
                            send(p, g.slice_rows(off, h), &mut grads);
                        }
                        off += h;
                    }
                }
                Op::GatherCols(a, idx) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let grow = g.row(r).to_vec();
                        let drow = d.row_mut(r);
                        for (gv, &j) in grow.iter().zip(idx.iter()) {
                            drow[j] += gv;
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::MaxRows(a, arg) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Tensor::zeros(rows, cols);
                    for (c, &r) in arg.iter().enumerate() {
                        d.set(r, c, g.data()[c]);
                    }
                    send(*a, d, &mut grads);
                }
            }
        }
        out
    }
}
