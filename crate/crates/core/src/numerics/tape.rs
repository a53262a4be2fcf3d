//! Reverse-mode differentiation over vector-valued nodes.
//!
//! A [`Tape`] evaluates eagerly: each method pushes a node holding its value.
//! Matrices live only in the [`ParamSet`] the tape borrows; affine maps and
//! embedding lookups read them in place and accumulate into [`Gradients`]
//! on [`Tape::backward`].

use super::tensor::{Gradients, ParamId, ParamSet};
use crate::error::{shape_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Affine {
        w: ParamId,
        x: Var,
        b: Option<ParamId>,
    },
    Embed {
        table: ParamId,
        row: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    /// `log sigmoid(sign * x)`
    LogSigmoid(Var, f64),
    LogSoftmax(Var),
    Pick(Var, usize),
    Dot(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    Combine(Vec<(Var, f64)>),
    /// Scalar with known partial derivatives w.r.t. scalar inputs.
    Custom(Vec<(Var, f64)>),
    /// Scalar with known gradients w.r.t. vector inputs.
    CustomVec(Vec<(Var, Vec<f64>)>),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without underflow for large negative `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `log(exp(a) + exp(b))`
pub fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_softmax_values(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(shape_err("log_softmax", "empty vector"));
    }
    let lse = log_sum_exp(v);
    Ok(v.iter().map(|x| x - lse).collect())
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn constant(&mut self, values: Vec<f64>) -> Var {
        self.push(values, Op::Leaf)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.constant(vec![0.0; n])
    }

    /// Flattened view of a parameter as a vector node.
    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.tensor(id).data().to_vec();
        self.push(value, Op::Param(id))
    }

    /// `W x (+ b)` with `W` of shape `[out, in]`.
    pub fn affine(&mut self, w: ParamId, x: Var, b: Option<ParamId>) -> Result<Var> {
        let wt = self.params.tensor(w);
        let (rows, cols) = (wt.rows(), wt.cols());
        let xv = &self.nodes[x.0].value;
        if wt.shape().len() != 2 || cols != xv.len() {
            return Err(shape_err(
                "affine",
                format!(
                    "{} has shape {:?}, input has length {}",
                    self.params.get(w).name,
                    wt.shape(),
                    xv.len()
                ),
            ));
        }
        let wd = wt.data();
        let mut y: Vec<f64> = (0..rows)
            .map(|r| wd[r * cols..(r + 1) * cols].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        if let Some(b) = b {
            let bd = self.params.tensor(b).data();
            if bd.len() != rows {
                return Err(shape_err(
                    "affine",
                    format!("bias length {} != output rows {rows}", bd.len()),
                ));
            }
            for (yi, bi) in y.iter_mut().zip(bd) {
                *yi += bi;
            }
        }
        Ok(self.push(y, Op::Affine { w, x, b }))
    }

    pub fn embed(&mut self, table: ParamId, row: usize) -> Result<Var> {
        let t = self.params.tensor(table);
        if row >= t.rows() {
            return Err(shape_err(
                "embed",
                format!(
                    "row {row} out of range for {} with {} rows",
                    self.params.get(table).name,
                    t.rows()
                ),
            ));
        }
        let value = t.row(row).to_vec();
        Ok(self.push(value, Op::Embed { table, row }))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "elementwise length mismatch");
        let value = va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect();
        self.push(value, op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Elementwise `log sigmoid(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::LogSigmoid(a, 1.0), log_sigmoid)
    }

    /// Elementwise `log(1 - sigmoid(x)) = log sigmoid(-x)`.
    pub fn log_one_minus_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::LogSigmoid(a, -1.0), |x| log_sigmoid(-x))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let value = log_softmax_values(&self.nodes[a.0].value)?;
        Ok(self.push(value, Op::LogSoftmax(a)))
    }

    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if index >= v.len() {
            return Err(shape_err(
                "pick",
                format!("index {index} out of range for length {}", v.len()),
            ));
        }
        let value = vec![v[index]];
        Ok(self.push(value, Op::Pick(a, index)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "dot length mismatch");
        let s = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        self.push(vec![s], Op::Dot(a, b))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let value = parts
            .iter()
            .flat_map(|p| self.nodes[p.0].value.iter().copied())
            .collect();
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[a.0].value[start..start + len].to_vec();
        self.push(value, Op::Slice(a, start))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    /// `sum_i c_i * v_i` over equal-length nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let n = terms.first().map_or(1, |(v, _)| self.dim(*v));
        let mut value = vec![0.0; n];
        for (v, c) in terms {
            let vv = &self.nodes[v.0].value;
            assert_eq!(vv.len(), n, "combine length mismatch");
            for (o, x) in value.iter_mut().zip(vv) {
                *o += c * x;
            }
        }
        self.push(value, Op::Combine(terms.to_vec()))
    }

    /// Scalar node with externally computed value and partial derivatives
    /// with respect to scalar inputs.
    pub fn custom_scalar(&mut self, value: f64, partials: Vec<(Var, f64)>) -> Var {
        self.push(vec![value], Op::Custom(partials))
    }

    /// Like [`Tape::custom_scalar`] with a full gradient per input node.
    pub fn custom_vector(&mut self, value: f64, partials: Vec<(Var, Vec<f64>)>) -> Var {
        for (v, p) in &partials {
            assert_eq!(self.dim(*v), p.len(), "custom gradient length mismatch");
        }
        self.push(vec![value], Op::CustomVec(partials))
    }

    /// Propagates `d root / d node` back through the tape and returns
    /// parameter gradients. `root` must be a scalar.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads = Gradients::zeros_like(self.params);
        self.backward_into(root, 1.0, &mut grads);
        grads
    }

    /// Adds `seed * d root / d params` into `grads`.
    pub fn backward_into(&self, root: Var, seed: f64, grads: &mut Gradients) {
        assert_eq!(self.dim(root), 1, "backward requires a scalar root");
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![seed]);

        fn acc(adj: &mut [Option<Vec<f64>>], target: Var, n: usize) -> &mut Vec<f64> {
            adj[target.0].get_or_insert_with(|| vec![0.0; n])
        }

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (o, x) in grads.get_mut(*id).iter_mut().zip(&g) {
                        *o += x;
                    }
                }
                Op::Affine { w, x, b } => {
                    let wt = self.params.tensor(*w);
                    let cols = wt.cols();
                    let wd = wt.data();
                    let xv = &self.nodes[x.0].value;
                    {
                        let gw = grads.get_mut(*w);
                        for (r, gr) in g.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            for (o, xi) in gw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                *o += gr * xi;
                            }
                        }
                    }
                    if let Some(b) = b {
                        for (o, gr) in grads.get_mut(*b).iter_mut().zip(&g) {
                            *o += gr;
                        }
                    }
                    let gx = acc(&mut adj, *x, cols);
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        for (o, wi) in gx.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                            *o += gr * wi;
                        }
                    }
                }
                Op::Embed { table, row } => {
                    let cols = self.params.tensor(*table).cols();
                    let gt = grads.get_mut(*table);
                    for (o, x) in gt[row * cols..(row + 1) * cols].iter_mut().zip(&g) {
                        *o += x;
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let n = g.len();
                    for (o, x) in acc(&mut adj, *a, n).iter_mut().zip(&g) {
                        *o += x;
                    }
                    for (o, x) in acc(&mut adj, *b, n).iter_mut().zip(&g) {
                        *o += sign * x;
                    }
                }
                Op::Mul(a, b) => {
                    let n = g.len();
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    for (o, x) in acc(&mut adj, *a, n).iter_mut().zip(&ga) {
                        *o += x;
                    }
                    for (o, x) in acc(&mut adj, *b, n).iter_mut().zip(&gb) {
                        *o += x;
                    }
                }
                Op::Scale(a, c) => {
                    for (o, x) in acc(&mut adj, *a, g.len()).iter_mut().zip(&g) {
                        *o += c * x;
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    for ((o, x), yi) in acc(&mut adj, *a, g.len()).iter_mut().zip(&g).zip(y) {
                        *o += x * (1.0 - yi * yi);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    for ((o, x), yi) in acc(&mut adj, *a, g.len()).iter_mut().zip(&g).zip(y) {
                        *o += x * yi * (1.0 - yi);
                    }
                }
                Op::LogSigmoid(a, sign) => {
                    // d/dx log sigmoid(s x) = s * sigmoid(-s x)
                    let xin = &self.nodes[a.0].value;
                    let partial: Vec<f64> = xin.iter().map(|x| sign * sigmoid(-sign * x)).collect();
                    for ((o, x), p) in acc(&mut adj, *a, g.len()).iter_mut().zip(&g).zip(&partial) {
                        *o += x * p;
                    }
                }
                Op::LogSoftmax(a) => {
                    let total: f64 = g.iter().sum();
                    let y = &node.value;
                    for ((o, x), yi) in acc(&mut adj, *a, g.len()).iter_mut().zip(&g).zip(y) {
                        *o += x - yi.exp() * total;
                    }
                }
                Op::Pick(a, idx) => {
                    let n = self.dim(*a);
                    acc(&mut adj, *a, n)[*idx] += g[0];
                }
                Op::Dot(a, b) => {
                    let n = self.dim(*a);
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = vb.iter().map(|y| g[0] * y).collect();
                    let gb: Vec<f64> = va.iter().map(|y| g[0] * y).collect();
                    for (o, x) in acc(&mut adj, *a, n).iter_mut().zip(&ga) {
                        *o += x;
                    }
                    for (o, x) in acc(&mut adj, *b, n).iter_mut().zip(&gb) {
                        *o += x;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.dim(*p);
                        for (o, x) in acc(&mut adj, *p, n).iter_mut().zip(&g[off..off + n]) {
                            *o += x;
                        }
                        off += n;
                    }
                }
                Op::Slice(a, start) => {
                    let n = self.dim(*a);
                    let ga = acc(&mut adj, *a, n);
                    for (o, x) in ga[*start..*start + g.len()].iter_mut().zip(&g) {
                        *o += x;
                    }
                }
                Op::Sum(a) => {
                    let n = self.dim(*a);
                    for o in acc(&mut adj, *a, n).iter_mut() {
                        *o += g[0];
                    }
                }
                Op::Combine(terms) => {
                    for (v, c) in terms {
                        for (o, x) in acc(&mut adj, *v, g.len()).iter_mut().zip(&g) {
                            *o += c * x;
                        }
                    }
                }
                Op::Custom(partials) => {
                    for (v, p) in partials {
                        if *p != 0.0 {
                            acc(&mut adj, *v, 1)[0] += g[0] * p;
                        }
                    }
                }
                Op::CustomVec(partials) => {
                    for (v, p) in partials {
                        for (o, x) in acc(&mut adj, *v, p.len()).iter_mut().zip(p) {
                            *o += g[0] * x;
                        }
                    }
                }
            }
        }
    }
}
