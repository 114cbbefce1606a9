use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Inputs to `exp` and `sigmoid` are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]`.
pub const LOGIT_CLAMP: f64 = 30.0;

/// A square matrix that the tape treats as a constant linear map on row space.
pub trait LinearOperator: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    /// `self · m`
    fn apply(&self, m: &Tensor) -> Tensor;
    /// `selfᵀ · m`
    fn apply_transpose(&self, m: &Tensor) -> Tensor;
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    Linear(Arc<dyn LinearOperator>, Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    RowSoftmax(Var),
    CausalSoftmax(Var),
    LowerTriMatMul(Var, Var),
    Sum(Var),
    SumSquares(Var),
    MeanRows(Var),
    HingePairs {
        pos: Var,
        neg: Var,
        weights: Vec<f64>,
        margin: f64,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    inputs: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn input(&self, var: Var) -> Option<&Tensor> {
        self.inputs.get(&var)
    }

    pub fn take_input(&mut self, var: Var) -> Option<Tensor> {
        self.inputs.remove(&var)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    /// Sum `other`'s parameter gradients into `self`; input gradients are tape-local and dropped.
    pub fn merge_params(&mut self, other: &Gradients) {
        for (id, g) in &other.params {
            accumulate(&mut self.params, *id, g);
        }
    }

    pub fn add_param(&mut self, id: ParamId, g: &Tensor) {
        accumulate(&mut self.params, id, g);
    }

    /// Multiply every parameter gradient by `alpha`.
    pub fn scale(&mut self, alpha: f64) {
        for g in self.params.values_mut() {
            for v in g.data_mut() {
                *v *= alpha;
            }
        }
    }
}

fn accumulate<K: Ord + Copy>(map: &mut BTreeMap<K, Tensor>, key: K, g: &Tensor) {
    match map.get_mut(&key) {
        Some(existing) => existing.add_assign(g),
        None => {
            map.insert(key, g.clone());
        }
    }
}

/// Records primitive applications during a forward pass so gradients can be replayed in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported back by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Param(id), store.value(id).clone())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.value(a).scale(alpha);
        self.push(Op::Scale(a, alpha), v)
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::Offset(a), v)
    }

    /// `1 - a` elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.offset(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(clamped_exp);
        self.push(Op::Exp(a), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMulNt(a, b), v))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let mut v = ta.clone();
        let c = ta.cols();
        for r in 0..ta.rows() {
            for (x, b) in v.data_mut()[r * c..(r + 1) * c].iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        Ok(self.push(Op::AddRow(a, bias), v))
    }

    /// `op · a` for a constant operator.
    pub fn linear(&mut self, op: &Arc<dyn LinearOperator>, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() != op.dim() {
            return Err(Error::shape("linear", &[op.dim(), op.dim()], ta.shape()));
        }
        let v = op.apply(ta);
        Ok(self.push(Op::Linear(Arc::clone(op), a), v))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::invalid(format!(
                "gather_rows: row {bad} out of range for {} rows",
                ta.rows()
            )));
        }
        let v = ta.gather_rows(indices);
        Ok(self.push(Op::Gather(a, indices.to_vec()), v))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(first).shape(),
                    t.shape(),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    /// Softmax along each row.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.cols() == 0 {
            return Err(Error::Empty("row_softmax"));
        }
        let mut v = ta.clone();
        let c = ta.cols();
        for r in 0..ta.rows() {
            softmax_in_place(&mut v.data_mut()[r * c..(r + 1) * c]);
        }
        Ok(self.push(Op::RowSoftmax(a), v))
    }

    /// Row `k` of a square matrix is softmaxed over columns `0..=k`; later columns become zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims();
        if r != c {
            return Err(Error::shape("causal_softmax", ta.shape(), &[r, r]));
        }
        if r == 0 {
            return Err(Error::Empty("causal_softmax"));
        }
        let mut v = ta.clone();
        for k in 0..r {
            let row = &mut v.data_mut()[k * c..(k + 1) * c];
            softmax_in_place(&mut row[..=k]);
            row[k + 1..].iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(self.push(Op::CausalSoftmax(a), v))
    }

    /// `out_k = Σ_{i ≤ k} w[k][i] · values_i`; entries of `w` above the diagonal are never read.
    pub fn lower_tri_matmul(&mut self, w: Var, values: Var) -> Result<Var> {
        let (tw, tv) = (self.value(w), self.value(values));
        let (k, k2) = tw.dims();
        if k != k2 || tv.rows() != k {
            return Err(Error::shape("lower_tri_matmul", tw.shape(), tv.shape()));
        }
        let d = tv.cols();
        let mut out = Tensor::zeros(k, d);
        for row in 0..k {
            let dst = &mut out.data_mut()[row * d..(row + 1) * d];
            for i in 0..=row {
                let wi = tw.get(row, i);
                for (o, x) in dst.iter_mut().zip(tv.row(i)) {
                    *o += wi * x;
                }
            }
        }
        Ok(self.push(Op::LowerTriMatMul(w, values), out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum_squares());
        self.push(Op::SumSquares(a), v)
    }

    /// Column means as a `1 × c` row; zero row when there are no rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(ta.row(i)) {
                *o += x;
            }
        }
        if r > 0 {
            out.iter_mut().for_each(|o| *o /= r as f64);
        }
        self.push(Op::MeanRows(a), Tensor::row_vector(out))
    }

    /// `Σ_p weights[p] · Σ_q max(0, margin − pos[p] + neg[q])` with the weights held constant.
    pub fn hinge_pairs(&mut self, pos: Var, neg: Var, weights: &[f64], margin: f64) -> Result<Var> {
        let (tp, tn) = (self.value(pos), self.value(neg));
        if tp.len() != weights.len() {
            return Err(Error::shape("hinge_pairs", tp.shape(), &[1, weights.len()]));
        }
        let mut total = 0.0;
        for (&p, &w) in tp.data().iter().zip(weights) {
            let inner: f64 = tn.data().iter().map(|&q| (margin - p + q).max(0.0)).sum();
            total += w * inner;
        }
        Ok(self.push(
            Op::HingePairs {
                pos,
                neg,
                weights: weights.to_vec(),
                margin,
            },
            Tensor::scalar(total),
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(Error::shape("backward", t.shape(), &[1, 1]));
        }
        self.backward_seeded(vec![(loss, Tensor::filled(t.rows(), t.cols(), 1.0))])
    }

    /// Reverse pass from `loss`, accumulating into the store's parameter gradients.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads);
        Ok(())
    }

    /// Reverse pass starting from arbitrary upstream gradients on several nodes.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (var, g) in seeds {
            if !self.value(var).same_shape(&g) {
                return Err(Error::shape("backward seed", self.value(var).shape(), g.shape()));
            }
            add_grad(&mut grads, var, g);
        }

        let mut out = Gradients::default();
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    out.inputs.insert(Var(idx), g);
                }
                Op::Constant => {}
                Op::Param(id) => accumulate(&mut out.params, *id, &g),
                Op::Add(a, b) => {
                    add_grad(&mut grads, *b, g.clone());
                    add_grad(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    add_grad(&mut grads, *b, g.scale(-1.0));
                    add_grad(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |g, y| g * y);
                    let gb = g.zip_map(self.value(*a), |g, x| g * x);
                    add_grad(&mut grads, *a, ga);
                    add_grad(&mut grads, *b, gb);
                }
                Op::Scale(a, alpha) => add_grad(&mut grads, *a, g.scale(*alpha)),
                Op::Offset(a) => add_grad(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let x = self.value(*a);
                    let mut ga = g.zip_map(&node.value, |g, y| g * y * (1.0 - y));
                    zero_outside_clamp(&mut ga, x);
                    add_grad(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |g, y| g * (1.0 - y * y));
                    add_grad(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let x = self.value(*a);
                    let mut ga = g.zip_map(&node.value, |g, y| g * y);
                    zero_outside_clamp(&mut ga, x);
                    add_grad(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b))?;
                    let gb = self.value(*a).matmul_tn(&g)?;
                    add_grad(&mut grads, *a, ga);
                    add_grad(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    // out = a·bᵀ: da = g·b, db = gᵀ·a
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.matmul_tn(self.value(*a))?;
                    add_grad(&mut grads, *a, ga);
                    add_grad(&mut grads, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (acc, x) in gb.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    add_grad(&mut grads, *bias, Tensor::row_vector(gb));
                    add_grad(&mut grads, *a, g);
                }
                Op::Linear(op, a) => add_grad(&mut grads, *a, op.apply_transpose(&g)),
                Op::Gather(a, indices) => {
                    let src = self.value(*a);
                    let mut ga = src.zeros_like();
                    for (r, &i) in indices.iter().enumerate() {
                        for (dst, x) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                            *dst += x;
                        }
                    }
                    add_grad(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let n = t.len();
                        let slice = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        add_grad(&mut grads, p, Tensor::new(t.shape().to_vec(), slice)?);
                    }
                }
                Op::RowSoftmax(a) => {
                    let c = g.cols();
                    let mut ga = g.zeros_like();
                    for r in 0..g.rows() {
                        let y = &node.value.data()[r * c..(r + 1) * c];
                        softmax_backward(y, g.row(r), ga.row_mut(r));
                    }
                    add_grad(&mut grads, *a, ga);
                }
                Op::CausalSoftmax(a) => {
                    let c = g.cols();
                    let mut ga = g.zeros_like();
                    for k in 0..g.rows() {
                        let y = &node.value.data()[k * c..k * c + k + 1];
                        softmax_backward(y, &g.row(k)[..=k], &mut ga.row_mut(k)[..=k]);
                    }
                    add_grad(&mut grads, *a, ga);
                }
                Op::LowerTriMatMul(w, values) => {
                    let (tw, tv) = (self.value(*w), self.value(*values));
                    let k = tw.rows();
                    let mut gw = tw.zeros_like();
                    let mut gv = tv.zeros_like();
                    for row in 0..k {
                        let grow = g.row(row);
                        for i in 0..=row {
                            let vi = tv.row(i);
                            let dot: f64 = grow.iter().zip(vi).map(|(a, b)| a * b).sum();
                            gw.data_mut()[row * k + i] = dot;
                            let wi = tw.get(row, i);
                            for (dst, x) in gv.row_mut(i).iter_mut().zip(grow) {
                                *dst += wi * x;
                            }
                        }
                    }
                    add_grad(&mut grads, *w, gw);
                    add_grad(&mut grads, *values, gv);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    let ga = self.value(*a).map(|_| s);
                    add_grad(&mut grads, *a, ga);
                }
                Op::SumSquares(a) => {
                    let s = g.data()[0];
                    let ga = self.value(*a).map(|x| 2.0 * s * x);
                    add_grad(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let src = self.value(*a);
                    let r = src.rows();
                    let mut ga = src.zeros_like();
                    if r > 0 {
                        let inv = 1.0 / r as f64;
                        for i in 0..r {
                            for (dst, x) in ga.row_mut(i).iter_mut().zip(g.data()) {
                                *dst = x * inv;
                            }
                        }
                    }
                    add_grad(&mut grads, *a, ga);
                }
                Op::HingePairs {
                    pos,
                    neg,
                    weights,
                    margin,
                } => {
                    let s = g.data()[0];
                    let (tp, tn) = (self.value(*pos), self.value(*neg));
                    let mut gp = tp.zeros_like();
                    let mut gn = tn.zeros_like();
                    for (pi, (&p, &w)) in tp.data().iter().zip(weights).enumerate() {
                        for (qi, &q) in tn.data().iter().enumerate() {
                            if margin - p + q > 0.0 {
                                gp.data_mut()[pi] -= s * w;
                                gn.data_mut()[qi] += s * w;
                            }
                        }
                    }
                    add_grad(&mut grads, *pos, gp);
                    add_grad(&mut grads, *neg, gn);
                }
            }
        }
        Ok(out)
    }
}

fn add_grad(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zero_outside_clamp(g: &mut Tensor, x: &Tensor) {
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv.abs() > LOGIT_CLAMP {
            *gv = 0.0;
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o = yi * (gi - dot);
    }
}

/// Logistic function with the input clamped to `±LOGIT_CLAMP`.
pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-x).exp())
}

pub fn clamped_exp(x: f64) -> f64 {
    x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp()
}

/// Numerically stable softmax of a single row.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("row_softmax"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}
