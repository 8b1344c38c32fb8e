//! Reverse-mode differentiation over an arena of nodes.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably while the forward pass is
//! built. [`Graph::backward`] returns a [`Gradients`] value that the caller
//! folds back into the store once the graph has been dropped, which keeps
//! parameter mutation out of the forward/backward borrow.
//!
//! Graph operations assert on shape mismatches: a mismatch there is a wiring
//! bug in the model, not a data error.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, mean_var, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        id
    }

    /// Replaces a parameter's value (shape may change) and clears its gradient.
    pub fn replace(&mut self, id: ParamId, value: Tensor) {
        let p = &mut self.params[id.0];
        p.grad = Tensor::zeros(value.shape());
        p.value = value;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.0.iter().enumerate() {
            let (Some(g), Some(p)) = (g, self.params.get_mut(i)) else {
                continue;
            };
            if p.grad.shape() != p.value.shape() {
                p.grad = Tensor::zeros(p.value.shape());
            }
            p.grad
                .add_assign(g)
                .expect("gradient shape matches its parameter");
        }
    }

    /// Snapshot of every parameter value, in id order.
    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore_values(&mut self, values: Vec<Tensor>) {
        assert_eq!(values.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(values) {
            p.grad = Tensor::zeros(v.shape());
            p.value = v;
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a[m x n] + b[1 x n]` broadcast over rows.
    AddRow(Var, Var),
    /// `a[m x n] * c[m x 1]` broadcast over columns.
    MulCol(Var, Var),
    Affine(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Sum(Var),
    SumRows(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (_, Some(t)) => t,
            (Op::Param(id), None) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(Op::MatMul(a, b), out)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), out)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        self.value(a)
            .zip_map(self.value(b), f)
            .unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        let r = self.value(row);
        assert_eq!(r.len(), n, "add_row: bias length {} vs {n} columns", r.len());
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(Op::AddRow(a, row), as_matrix(out, m, n))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (m, n) = self.shape(a);
        let c = self.value(col);
        assert_eq!(c.len(), m, "mul_col: scale length {} vs {m} rows", c.len());
        let mut out = self.value(a).clone();
        for i in 0..m {
            let s = c.data()[i];
            out.row_mut(i).iter_mut().for_each(|o| *o *= s);
        }
        self.push(Op::MulCol(a, col), as_matrix(out, m, n))
    }

    /// `a * scale + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| x * scale + shift);
        self.push(Op::Affine(a, scale), out)
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), m, "concat_cols: row count mismatch");
                data.extend_from_slice(t.row(i));
            }
        }
        let out = Tensor::matrix(m, n, data).expect("sized above");
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let n = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), n, "concat_rows: column count mismatch");
            data.extend_from_slice(t.data());
            m += t.rows();
        }
        let out = Tensor::matrix(m, n, data).expect("sized above");
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= m, "slice_rows {start}+{len} > {m}");
        let t = self.value(a);
        let data = t.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::matrix(len, n, data).expect("sized above");
        self.push(Op::SliceRows(a, start), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= n, "slice_cols {start}+{len} > {n}");
        let t = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(m, len, data).expect("sized above");
        self.push(Op::SliceCols(a, start), out)
    }

    /// Gathers rows by index (rows may repeat).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let (m, n) = self.shape(a);
        let t = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < m, "select_rows: row {r} out of {m}");
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::matrix(rows.len(), n, data).expect("sized above");
        self.push(Op::SelectRows(a, rows.to_vec()), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        self.push(Op::Softmax(a), out)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let out = self
            .value(x)
            .layer_norm(self.value(gain).data(), self.value(bias).data(), eps)
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(Op::LayerNorm { x, gain, bias, eps }, out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out)
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|x| x.powf(p));
        self.push(Op::Pow(a, p), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    /// Row sums as an `[m x 1]` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        let out = Tensor::matrix(data.len(), 1, data).expect("sized above");
        self.push(Op::SumRows(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), out)
    }

    /// Affine map `x W + b` for `x[m x in]`, `W[in x out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let y = self.matmul(x, weight);
        match bias {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Reverse pass from a scalar node. Gradients of parameter leaves are
    /// returned; intermediate gradients are discarded.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(&shape, 1.0));
        let mut out = Gradients(vec![None; self.store.len()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.0[id.0] = Some(g),
                op => self.backprop(op, node.value.as_ref().expect("computed node"), &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn backprop(&self, op: &Op, y: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Constant | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = G B^T, dB = A^T G
                let bt = bv.transpose();
                let mut da = vec![0.0; m * k];
                matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                let at = av.transpose();
                let mut db = vec![0.0; k * n];
                matmul_into(at.data(), g.data(), &mut db, k, m, n);
                accumulate(grads, *a, as_matrix_vec(da, m, k));
                accumulate(grads, *b, as_matrix_vec(db, k, n));
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(*b), |g, b| g * b).expect("same shape");
                let db = g.zip_map(self.value(*a), |g, a| g * a).expect("same shape");
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::AddRow(a, row) => {
                let n = g.cols();
                let mut db = vec![0.0; n];
                for i in 0..g.rows() {
                    for (d, v) in db.iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                accumulate(grads, *a, g.clone());
                let shape = self.value(*row).shape().to_vec();
                accumulate(grads, *row, Tensor::new(shape, db).expect("bias shape"));
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                let mut da = g.clone();
                let mut dc = vec![0.0; cv.len()];
                for (i, dci) in dc.iter_mut().enumerate() {
                    let s = cv.data()[i];
                    da.row_mut(i).iter_mut().for_each(|v| *v *= s);
                    *dci = g.row(i).iter().zip(av.row(i)).map(|(g, a)| g * a).sum();
                }
                accumulate(grads, *a, da);
                let shape = cv.shape().to_vec();
                accumulate(grads, *col, Tensor::new(shape, dc).expect("col shape"));
            }
            Op::Affine(a, scale) => accumulate(grads, *a, g.map(|v| v * scale)),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (m, w) = self.shape(p);
                    let mut data = Vec::with_capacity(m * w);
                    for i in 0..m {
                        data.extend_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    offset += w;
                    accumulate(grads, p, as_matrix_vec(data, m, w));
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let m = self.shape(p).0;
                    let data = g.data()[offset * n..(offset + m) * n].to_vec();
                    offset += m;
                    accumulate(grads, p, as_matrix_vec(data, m, n));
                }
            }
            Op::SliceRows(a, start) => {
                let (m, n) = self.shape(*a);
                let mut da = Tensor::zeros(&[m, n]);
                let len = g.rows();
                da.data_mut()[start * n..(start + len) * n].copy_from_slice(g.data());
                accumulate(grads, *a, da);
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.shape(*a);
                let mut da = Tensor::zeros(&[m, n]);
                let w = g.cols();
                for i in 0..m {
                    da.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, da);
            }
            Op::SelectRows(a, rows) => {
                let (m, n) = self.shape(*a);
                let mut da = Tensor::zeros(&[m, n]);
                for (k, &r) in rows.iter().enumerate() {
                    for (d, v) in da.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Softmax(a) => {
                let mut da = g.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let dot: f64 = g.row(i).iter().zip(yr).map(|(g, y)| g * y).sum();
                    for (d, &yv) in da.row_mut(i).iter_mut().zip(yr) {
                        *d = yv * (*d - dot);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let n = xv.cols();
                let nf = n as f64;
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..xv.rows() {
                    let row = xv.row(i);
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = g.row(i);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(g, w)| g * w).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(d, x)| d * x).sum();
                    for j in 0..n {
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = inv / nf * (nf * dxhat[j] - sum_d - xhat[j] * sum_dx);
                    }
                }
                accumulate(grads, *x, dx);
                let gshape = self.value(*gain).shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                accumulate(grads, *gain, Tensor::new(gshape, dgain).expect("gain shape"));
                accumulate(grads, *bias, Tensor::new(bshape, dbias).expect("bias shape"));
            }
            Op::Relu(a) => {
                let da = g
                    .zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })
                    .expect("same shape");
                accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = g.zip_map(y, |g, s| g * s * (1.0 - s)).expect("same shape");
                accumulate(grads, *a, da);
            }
            Op::Exp(a) => {
                let da = g.zip_map(y, |g, e| g * e).expect("same shape");
                accumulate(grads, *a, da);
            }
            Op::Log(a) => {
                let da = g.zip_map(self.value(*a), |g, x| g / x).expect("same shape");
                accumulate(grads, *a, da);
            }
            Op::Pow(a, p) => {
                let da = g
                    .zip_map(self.value(*a), |g, x| g * p * x.powf(p - 1.0))
                    .expect("same shape");
                accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let s = g.item();
                accumulate(grads, *a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::SumRows(a) => {
                let (m, n) = self.shape(*a);
                let mut da = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let s = g.data()[i];
                    da.row_mut(i).iter_mut().for_each(|v| *v = s);
                }
                accumulate(grads, *a, da);
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let s = g.item() / t.len() as f64;
                accumulate(grads, *a, Tensor::full(t.shape(), s));
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

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            // Shapes may differ only for rank-1 vs [1 x n] bias views.
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn as_matrix(t: Tensor, m: usize, n: usize) -> Tensor {
    t.reshape(&[m, n]).expect("element count preserved")
}

fn as_matrix_vec(data: Vec<f64>, m: usize, n: usize) -> Tensor {
    Tensor::matrix(m, n, data).expect("element count preserved")
}
