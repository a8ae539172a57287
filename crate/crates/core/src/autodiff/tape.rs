//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Nodes are appended in evaluation order, so the tape is its own topological
//! order and `backward` is a single reverse sweep. One tape is built per
//! filtering window and dropped after the optimiser step.

use std::collections::HashMap;

use super::params::{ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, S),
    Offset(Var),
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, S, S),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    LogSumExp(Var),
    GatherRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SquaredError(Var, Var),
    GaussianLogDensity(Var, Var, Var),
}

#[derive(Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
}

/// Result shape of an elementwise binary op; each dimension must agree or be 1.
fn broadcast(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::ShapeMismatch { op, lhs: a, rhs: b }),
    }
}

#[inline]
fn bidx(shape: (usize, usize), r: usize, c: usize) -> usize {
    let rr = if shape.0 == 1 { 0 } else { r };
    let cc = if shape.1 == 1 { 0 } else { c };
    rr * shape.1 + cc
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1×1` node.
    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value.item()
    }

    /// Input with no gradient path back into the store.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a store entry. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Op::Param, store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Constant copy of a node's current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = if sa == sb {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let data = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(sa.0, sa.1, data)?
        } else {
            let shape = broadcast(name, sa, sb)?;
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let mut data = Vec::with_capacity(shape.0 * shape.1);
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    data.push(f(va[bidx(sa, r, c)], vb[bidx(sb, r, c)]));
                }
            }
            Tensor::from_vec(shape.0, shape.1, data)?
        };
        Ok(self.push(op, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), t)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let t = self.value(a).map(|x| x * k);
        self.push(Op::Scale(a, k), t)
    }

    /// `a + k` for a constant `k`.
    pub fn offset(&mut self, a: Var, k: S) -> Var {
        let t = self.value(a).map(|x| x + k);
        self.push(Op::Offset(a), t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = matmul(self.value(a), self.value(b));
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `x·W + b` with `b` a `1×out` row broadcast over the rows of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.1 != sw.0 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        if sb != (1, sw.1) {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                lhs: (1, sw.1),
                rhs: sb,
            });
        }
        let mut out = matmul(self.value(x), self.value(w));
        let bias = self.value(b).data().to_vec();
        for r in 0..out.rows() {
            for (o, &bb) in out.data_mut()[r * sw.1..(r + 1) * sw.1].iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        Ok(self.push(Op::Linear(x, w, b), out))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), t)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.ln());
        self.push(Op::Log(a), t)
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let t = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(Op::Clamp(a, lo, hi), t)
    }

    /// Sum of every entry, as `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Column sums (reduces over rows), as `1×cols`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Tensor::zeros(1, v.cols());
        for r in 0..v.rows() {
            for (o, &x) in out.data_mut().iter_mut().zip(v.row_slice(r)) {
                *o += x;
            }
        }
        self.push(Op::SumRows(a), out)
    }

    /// Row sums (reduces over columns), as `rows×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows()).map(|r| v.row_slice(r).iter().copied().sum()).collect();
        let out = Tensor::from_vec(v.rows(), 1, data).expect("row sums");
        self.push(Op::SumCols(a), out)
    }

    /// Log-sum-exp over every entry, as `1×1`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let s = logsumexp(self.value(a).data());
        self.push(Op::LogSumExp(a), Tensor::scalar(s))
    }

    /// Rows of `a` picked by `idx`; indices are constants for differentiation.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for {} rows",
                v.rows()
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * v.cols());
        for &i in idx {
            data.extend_from_slice(v.row_slice(i));
        }
        let out = Tensor::from_vec(idx.len(), v.cols(), data)?;
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), out))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.cols()) {
            return Err(Error::invalid(format!(
                "column index {bad} out of range for {} columns",
                v.cols()
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * v.rows());
        for r in 0..v.rows() {
            let row = v.row_slice(r);
            data.extend(idx.iter().map(|&c| row[c]));
        }
        let out = Tensor::from_vec(v.rows(), idx.len(), data)?;
        Ok(self.push(Op::SelectCols(a, idx.to_vec()), out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => return Err(Error::invalid("concat of zero tensors")),
        };
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: (rows, cols),
                    rhs: s,
                });
            }
            cols += s.1;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// `Σ (a - b)²` over every entry, as `1×1`.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "squared_error",
                lhs: sa,
                rhs: sb,
            });
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Op::SquaredError(a, b), Tensor::scalar(s)))
    }

    /// Row-wise diagonal Gaussian log-density `Σ_c log N(x | mean, exp(log_std)²)`,
    /// as `rows×1`. Any of the three inputs may be a single row broadcast over
    /// the others.
    pub fn gaussian_log_density(&mut self, x: Var, mean: Var, log_std: Var) -> Result<Var> {
        let (sx, sm, ss) = (self.shape(x), self.shape(mean), self.shape(log_std));
        let rows = sx.0.max(sm.0).max(ss.0);
        let cols = sx.1;
        for s in [sx, sm, ss] {
            if s.1 != cols || (s.0 != rows && s.0 != 1) {
                return Err(Error::ShapeMismatch {
                    op: "gaussian_log_density",
                    lhs: sx,
                    rhs: s,
                });
            }
        }
        let (vx, vm, vs) = (
            self.value(x).data(),
            self.value(mean).data(),
            self.value(log_std).data(),
        );
        let half = S::of(0.5);
        let c0 = S::of(HALF_LN_2PI);
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = S::zero();
            for c in 0..cols {
                let ls = vs[bidx(ss, r, c)];
                let u = (vx[bidx(sx, r, c)] - vm[bidx(sm, r, c)]) * (-ls).exp();
                acc += -half * u * u - ls - c0;
            }
            data.push(acc);
        }
        let out = Tensor::from_vec(rows, 1, data)?;
        Ok(self.push(Op::GaussianLogDensity(x, mean, log_std), out))
    }

    /// Adjoints of every node with respect to a scalar `root`.
    pub fn gradients(&self, root: Var) -> Result<Adjoints<S>> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::NonScalarRoot(shape));
        }
        let mut adj: Vec<Option<Tensor<S>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::scalar(S::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Adjoints { adj })
    }

    /// Reverse sweep from `root`, adding parameter adjoints into `store`'s
    /// gradient slots.
    pub fn backward(&self, root: Var, store: &mut ParameterStore<S>) -> Result<()> {
        let adj = self.gradients(root)?;
        for (&id, &v) in &self.params {
            if let Some(g) = adj.get(v) {
                store.grad_mut(id).add_assign(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, adj: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc_broadcast(adj, *a, g, |_, gv| gv);
                self.acc_broadcast(adj, *b, g, |_, gv| gv);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(adj, *a, g, |_, gv| gv);
                self.acc_broadcast(adj, *b, g, |_, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_broadcast(adj, *a, g, |(r, c), gv| gv * vb[bidx(sb, r, c)]);
                self.acc_broadcast(adj, *b, g, |(r, c), gv| gv * va[bidx(sa, r, c)]);
            }
            Op::Div(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_broadcast(adj, *a, g, |(r, c), gv| gv / vb[bidx(sb, r, c)]);
                self.acc_broadcast(adj, *b, g, |(r, c), gv| {
                    let y = vb[bidx(sb, r, c)];
                    -gv * va[bidx(sa, r, c)] / (y * y)
                });
            }
            Op::Neg(a) => accumulate(adj, *a, g.map(|x| -x)),
            Op::Scale(a, k) => {
                let k = *k;
                accumulate(adj, *a, g.map(|x| x * k));
            }
            Op::Offset(a) => accumulate(adj, *a, g.clone()),
            Op::MatMul(a, b) => {
                accumulate(adj, *a, matmul_nt(g, self.value(*b)));
                accumulate(adj, *b, matmul_tn(self.value(*a), g));
            }
            Op::Linear(x, w, b) => {
                accumulate(adj, *x, matmul_nt(g, self.value(*w)));
                accumulate(adj, *w, matmul_tn(self.value(*x), g));
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in gb.data_mut().iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                accumulate(adj, *b, gb);
            }
            Op::Tanh(a) => {
                let d = zip_map(g, out, |gv, y| gv * (S::one() - y * y));
                accumulate(adj, *a, d);
            }
            Op::Exp(a) => accumulate(adj, *a, zip_map(g, out, |gv, y| gv * y)),
            Op::Log(a) => accumulate(adj, *a, zip_map(g, self.value(*a), |gv, x| gv / x)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = zip_map(g, self.value(*a), |gv, x| {
                    if x >= lo && x <= hi {
                        gv
                    } else {
                        S::zero()
                    }
                });
                accumulate(adj, *a, d);
            }
            Op::Sum(a) => {
                let s = self.shape(*a);
                accumulate(adj, *a, Tensor::filled(s.0, s.1, g.item()));
            }
            Op::SumRows(a) => {
                let s = self.shape(*a);
                let mut d = Tensor::zeros(s.0, s.1);
                for r in 0..s.0 {
                    d.data_mut()[r * s.1..(r + 1) * s.1].copy_from_slice(g.data());
                }
                accumulate(adj, *a, d);
            }
            Op::SumCols(a) => {
                let s = self.shape(*a);
                let mut d = Tensor::zeros(s.0, s.1);
                for r in 0..s.0 {
                    let gv = g.data()[r];
                    d.data_mut()[r * s.1..(r + 1) * s.1].iter_mut().for_each(|x| *x = gv);
                }
                accumulate(adj, *a, d);
            }
            Op::LogSumExp(a) => {
                let y = out.item();
                let gv = g.item();
                let d = if y == S::neg_infinity() {
                    let s = self.shape(*a);
                    Tensor::zeros(s.0, s.1)
                } else {
                    self.value(*a).map(|x| gv * (x - y).exp())
                };
                accumulate(adj, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let s = self.shape(*a);
                let mut d = Tensor::zeros(s.0, s.1);
                for (k, &i) in idx.iter().enumerate() {
                    let src = g.row_slice(k);
                    for (o, &v) in d.data_mut()[i * s.1..(i + 1) * s.1].iter_mut().zip(src) {
                        *o += v;
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::SelectCols(a, idx) => {
                let s = self.shape(*a);
                let mut d = Tensor::zeros(s.0, s.1);
                for r in 0..s.0 {
                    for (j, &c) in idx.iter().enumerate() {
                        let v = d.get(r, c) + g.get(r, j);
                        d.set(r, c, v);
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p);
                    let mut d = Tensor::zeros(s.0, s.1);
                    for r in 0..s.0 {
                        d.data_mut()[r * s.1..(r + 1) * s.1]
                            .copy_from_slice(&g.row_slice(r)[offset..offset + s.1]);
                    }
                    accumulate(adj, p, d);
                    offset += s.1;
                }
            }
            Op::SquaredError(a, b) => {
                let two_g = S::of(2.0) * g.item();
                let d = zip_map(self.value(*a), self.value(*b), |x, y| two_g * (x - y));
                accumulate(adj, *b, d.map(|v| -v));
                accumulate(adj, *a, d);
            }
            Op::GaussianLogDensity(x, m, ls) => {
                let (sx, sm, ss) = (self.shape(*x), self.shape(*m), self.shape(*ls));
                let (vx, vm, vs) = (
                    self.value(*x).data(),
                    self.value(*m).data(),
                    self.value(*ls).data(),
                );
                let (rows, cols) = (g.rows(), sx.1);
                let mut dx = Tensor::zeros(sx.0, sx.1);
                let mut dm = Tensor::zeros(sm.0, sm.1);
                let mut ds = Tensor::zeros(ss.0, ss.1);
                for r in 0..rows {
                    let gv = g.data()[r];
                    for c in 0..cols {
                        let inv = (-vs[bidx(ss, r, c)]).exp();
                        let u = (vx[bidx(sx, r, c)] - vm[bidx(sm, r, c)]) * inv;
                        dx.data_mut()[bidx(sx, r, c)] -= gv * u * inv;
                        dm.data_mut()[bidx(sm, r, c)] += gv * u * inv;
                        ds.data_mut()[bidx(ss, r, c)] += gv * (u * u - S::one());
                    }
                }
                accumulate(adj, *x, dx);
                accumulate(adj, *m, dm);
                accumulate(adj, *ls, ds);
            }
        }
    }

    /// Adds `f((r, c), g[r, c])` into the adjoint of `target`, summing over
    /// broadcast dimensions.
    fn acc_broadcast(
        &self,
        adj: &mut [Option<Tensor<S>>],
        target: Var,
        g: &Tensor<S>,
        f: impl Fn((usize, usize), S) -> S,
    ) {
        let st = self.shape(target);
        let mut d = Tensor::zeros(st.0, st.1);
        if st == g.shape() {
            let cols = st.1;
            for (k, (o, &gv)) in d.data_mut().iter_mut().zip(g.data()).enumerate() {
                *o = f((k / cols, k % cols), gv);
            }
        } else {
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    d.data_mut()[bidx(st, r, c)] += f((r, c), g.get(r, c));
                }
            }
        }
        accumulate(adj, target, d);
    }
}

fn accumulate<S: Scalar>(adj: &mut [Option<Tensor<S>>], v: Var, d: Tensor<S>) {
    match &mut adj[v.0] {
        Some(t) => t.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

/// `a·b`.
pub(crate) fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(n, m);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..n {
        let orow = &mut od[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == S::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a·bᵀ`.
fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, m) = (a.rows(), b.rows());
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let arow = a.row_slice(i);
        for j in 0..m {
            let s = arow.iter().zip(b.row_slice(j)).map(|(&x, &y)| x * y).sum();
            out.data_mut()[i * m + j] = s;
        }
    }
    out
}

/// `aᵀ·b`.
fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(k, m);
    let od = out.data_mut();
    for r in 0..n {
        let arow = a.row_slice(r);
        let brow = b.row_slice(r);
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            for (o, &bv) in od[p * m..(p + 1) * m].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Numerically stable `log Σ exp(v)`; `-inf` for an empty or all `-inf` input.
pub fn logsumexp<S: Scalar>(v: &[S]) -> S {
    let m = v.iter().copied().fold(S::neg_infinity(), S::max);
    if m == S::neg_infinity() {
        return m;
    }
    if m == S::infinity() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<S>().ln()
}

/// Node adjoints produced by [`Tape::gradients`].
#[derive(Debug)]
pub struct Adjoints<S> {
    adj: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Adjoints<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros of `shape` when `v` does not reach the root.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}
