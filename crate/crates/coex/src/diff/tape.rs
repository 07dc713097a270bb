//! The recorded operation graph for one forward pass.
//!
//! Construction order is topological by definition, so the backward pass is a
//! single reverse sweep that visits each node exactly once and accumulates
//! gradients additively into the caller's [`Grads`].

use ndarray::Axis;

use super::params::{Grads, ParamStore};
use super::{DiffError, Mat};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var(pub(crate) usize);

/// How network parameters enter a forward pass: trainable leaves receive
/// gradients, frozen ones are recorded as constants.
#[derive(Clone, Copy)]
pub enum Binding<'a> {
    Trainable(&'a ParamStore),
    Frozen(&'a ParamStore),
}

impl<'a> Binding<'a> {
    pub fn store(&self) -> &'a ParamStore {
        match self {
            Binding::Trainable(s) | Binding::Frozen(s) => s,
        }
    }
}

enum Op {
    Const,
    Param { slot: usize },
    MatMul { a: Var, b: Var },
    AddRowBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Neg { x: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var, c: f64 },
    Relu { x: Var },
    Tanh { x: Var },
    Exp { x: Var },
    Ln { x: Var },
    Sqrt { x: Var },
    Square { x: Var },
    Recip { x: Var },
    Softplus { x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    MaxConst { x: Var, c: f64 },
    SumAll { x: Var },
    MeanAll { x: Var },
    SumRows { x: Var },
    SumRowsCanonical { x: Var },
    SumCols { x: Var },
    BroadcastRow { x: Var, n: usize },
    ConcatCols { xs: Vec<Var> },
    ConcatRows { xs: Vec<Var> },
    SliceCols { x: Var, start: usize, len: usize },
    SoftmaxRows { x: Var },
    MinElem { a: Var, b: Var },
    MulScalar { x: Var, s: Var },
}

/// Records one forward computation over a single [`ParamStore`].
#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Mat>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.vals[v.0]
    }

    fn push(&mut self, op: Op, val: Mat) -> Var {
        self.ops.push(op);
        self.vals.push(val);
        Var(self.vals.len() - 1)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(Op::Const, m)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(super::scalar(v))
    }

    /// Bind a named parameter; trainable bindings receive gradients keyed by
    /// their store slot, frozen ones are constants.
    pub fn param(&mut self, binding: Binding<'_>, name: &str) -> Result<Var, DiffError> {
        let store = binding.store();
        let slot = store.slot(name)?;
        let val = store.value_at(slot).clone();
        match binding {
            Binding::Trainable(_) => Ok(self.push(Op::Param { slot }, val)),
            Binding::Frozen(_) => Ok(self.push(Op::Const, val)),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0].dot(&self.vals[b.0]);
        self.push(Op::MatMul { a, b }, v)
    }

    /// `x + b` with `b` a 1 x m row broadcast over the rows of `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let v = &self.vals[x.0] + &self.vals[b.0];
        self.push(Op::AddRowBias { x, b }, v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.vals[a.0] + &self.vals[b.0];
        self.push(Op::Add { a, b }, v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.vals[a.0] - &self.vals[b.0];
        self.push(Op::Sub { a, b }, v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.vals[a.0] * &self.vals[b.0];
        self.push(Op::Mul { a, b }, v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.vals[a.0] / &self.vals[b.0];
        self.push(Op::Div { a, b }, v)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(|t| -t);
        self.push(Op::Neg { x }, v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.vals[x.0].mapv(|t| c * t);
        self.push(Op::Scale { x, c }, v)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.vals[x.0].mapv(|t| t + c);
        self.push(Op::AddConst { x, c }, v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(|t| t.max(0.0));
        self.push(Op::Relu { x }, v)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(f64::tanh);
        self.push(Op::Tanh { x }, v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(f64::exp);
        self.push(Op::Exp { x }, v)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(f64::ln);
        self.push(Op::Ln { x }, v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(f64::sqrt);
        self.push(Op::Sqrt { x }, v)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(|t| t * t);
        self.push(Op::Square { x }, v)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(|t| 1.0 / t);
        self.push(Op::Recip { x }, v)
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(softplus_stable);
        self.push(Op::Softplus { x }, v)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.vals[x.0].mapv(|t| t.clamp(lo, hi));
        self.push(Op::Clamp { x, lo, hi }, v)
    }

    /// Elementwise `max(x, c)`; used as a variance floor.
    pub fn max_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.vals[x.0].mapv(|t| t.max(c));
        self.push(Op::MaxConst { x, c }, v)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = super::scalar(self.vals[x.0].sum());
        self.push(Op::SumAll { x }, v)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.vals[x.0].len() as f64;
        let v = super::scalar(self.vals[x.0].sum() / n);
        self.push(Op::MeanAll { x }, v)
    }

    /// Column sums: (n, m) -> (1, m).
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(Op::SumRows { x }, v)
    }

    /// Column sums accumulated in value order rather than row order, so the
    /// result is bit-identical under any permutation of the input rows. The
    /// gradient is the same as [`Tape::sum_rows`] (summation is symmetric).
    pub fn sum_rows_canonical(&mut self, x: Var) -> Var {
        let src = &self.vals[x.0];
        let mut out = Mat::zeros((1, src.ncols()));
        let mut col: Vec<f64> = Vec::with_capacity(src.nrows());
        for j in 0..src.ncols() {
            col.clear();
            col.extend(src.column(j).iter().copied());
            out[(0, j)] = canonical_sum(&mut col);
        }
        self.push(Op::SumRowsCanonical { x }, out)
    }

    /// Row sums: (n, m) -> (n, 1).
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumCols { x }, v)
    }

    /// Repeat a 1 x m row n times.
    pub fn broadcast_row(&mut self, x: Var, n: usize) -> Var {
        let src = &self.vals[x.0];
        let mut v = Mat::zeros((n, src.ncols()));
        for mut r in v.rows_mut() {
            r.assign(&src.row(0));
        }
        self.push(Op::BroadcastRow { x, n }, v)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let n = self.vals[xs[0].0].nrows();
        let total: usize = xs.iter().map(|v| self.vals[v.0].ncols()).sum();
        let mut out = Mat::zeros((n, total));
        let mut at = 0;
        for v in xs {
            let m = &self.vals[v.0];
            out.slice_mut(ndarray::s![.., at..at + m.ncols()]).assign(m);
            at += m.ncols();
        }
        self.push(Op::ConcatCols { xs: xs.to_vec() }, out)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let m = self.vals[xs[0].0].ncols();
        let total: usize = xs.iter().map(|v| self.vals[v.0].nrows()).sum();
        let mut out = Mat::zeros((total, m));
        let mut at = 0;
        for v in xs {
            let x = &self.vals[v.0];
            out.slice_mut(ndarray::s![at..at + x.nrows(), ..]).assign(x);
            at += x.nrows();
        }
        self.push(Op::ConcatRows { xs: xs.to_vec() }, out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.vals[x.0]
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(Op::SliceCols { x, start, len }, v)
    }

    /// Row-wise softmax with the usual max-shift for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = &self.vals[x.0];
        let mut v = src.clone();
        for mut r in v.rows_mut() {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            r.mapv_inplace(|t| (t - mx).exp());
            let s = r.sum();
            r.mapv_inplace(|t| t / s);
        }
        self.push(Op::SoftmaxRows { x }, v)
    }

    /// Elementwise minimum; gradient follows the smaller input (ties to `a`).
    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::Zip::from(&self.vals[a.0])
            .and(&self.vals[b.0])
            .map_collect(|&x, &y| x.min(y));
        self.push(Op::MinElem { a, b }, v)
    }

    /// Multiply every element of `x` by the 1 x 1 scalar variable `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let c = self.vals[s.0][(0, 0)];
        let v = self.vals[x.0].mapv(|t| c * t);
        self.push(Op::MulScalar { x, s }, v)
    }

    /// Reverse sweep from a recorded 1 x 1 loss; parameter gradients are
    /// accumulated additively into `grads` (no implicit zeroing).
    pub fn backward(&self, loss: Var, grads: &mut Grads) -> Result<(), DiffError> {
        if self.ops.is_empty() {
            return Err(DiffError::EmptyTape);
        }
        let shape = self.vals[loss.0].dim();
        if shape != (1, 1) {
            return Err(DiffError::NonScalarLoss {
                rows: shape.0,
                cols: shape.1,
            });
        }
        let mut adj: Vec<Option<Mat>> = vec![None; self.vals.len()];
        adj[loss.0] = Some(super::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(d) = adj[i].take() else { continue };
            match &self.ops[i] {
                Op::Const => {}
                Op::Param { slot } => grads.accumulate(*slot, &d),
                Op::MatMul { a, b } => {
                    let da = d.dot(&self.vals[b.0].t());
                    let db = self.vals[a.0].t().dot(&d);
                    acc(&mut adj, a.0, da);
                    acc(&mut adj, b.0, db);
                }
                Op::AddRowBias { x, b } => {
                    let db = d.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, b.0, db);
                    acc(&mut adj, x.0, d);
                }
                Op::Add { a, b } => {
                    acc(&mut adj, a.0, d.clone());
                    acc(&mut adj, b.0, d);
                }
                Op::Sub { a, b } => {
                    acc(&mut adj, a.0, d.clone());
                    acc(&mut adj, b.0, d.mapv(|t| -t));
                }
                Op::Mul { a, b } => {
                    acc(&mut adj, a.0, &d * &self.vals[b.0]);
                    acc(&mut adj, b.0, &d * &self.vals[a.0]);
                }
                Op::Div { a, b } => {
                    let bv = &self.vals[b.0];
                    acc(&mut adj, a.0, &d / bv);
                    let db = ndarray::Zip::from(&d)
                        .and(&self.vals[a.0])
                        .and(bv)
                        .map_collect(|&g, &av, &bv| -g * av / (bv * bv));
                    acc(&mut adj, b.0, db);
                }
                Op::Neg { x } => acc(&mut adj, x.0, d.mapv(|t| -t)),
                Op::Scale { x, c } => acc(&mut adj, x.0, d.mapv(|t| c * t)),
                Op::AddConst { x, .. } => acc(&mut adj, x.0, d),
                Op::Relu { x } => {
                    let dx = ndarray::Zip::from(&d)
                        .and(&self.vals[x.0])
                        .map_collect(|&g, &xv| if xv > 0.0 { g } else { 0.0 });
                    acc(&mut adj, x.0, dx);
                }
                Op::Tanh { x } => {
                    let dx = ndarray::Zip::from(&d)
                        .and(&self.vals[i])
                        .map_collect(|&g, &y| g * (1.0 - y * y));
                    acc(&mut adj, x.0, dx);
                }
                Op::Exp { x } => acc(&mut adj, x.0, &d * &self.vals[i]),
                Op::Ln { x } => acc(&mut adj, x.0, &d / &self.vals[x.0]),
                Op::Sqrt { x } => {
                    let dx = ndarray::Zip::from(&d)
                        .and(&self.vals[i])
                        .map_collect(|&g, &y| g / (2.0 * y));
                    acc(&mut adj, x.0, dx);
                }
                Op::Square { x } => {
                    let dx = ndarray::Zip::from(&d)
                        .and(&self.vals[x.0])
                        .map_collect(|&g, &xv| 2.0 * xv * g);
                    acc(&mut adj, x.0, dx);
                }
                Op::Recip { x } => {
                    let dx = ndarray::Zip::from(&d)
                        .and(&self.vals[i])
                        .map_collect(|&g, &y| -g * y * y);
                    acc(&mut adj, x.0, dx);
                }
                Op::Softplus { x } => {
                    let dx = ndarray::Zip::from(&d)
                        .and(&self.vals[x.0])
                        .map_collect(|&g, &xv| g * sigmoid(xv));
                    acc(&mut adj, x.0, dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let dx = ndarray::Zip::from(&d)
                        .and(&self.vals[x.0])
                        .map_collect(|&g, &xv| if xv >= *lo && xv <= *hi { g } else { 0.0 });
                    acc(&mut adj, x.0, dx);
                }
                Op::MaxConst { x, c } => {
                    let dx = ndarray::Zip::from(&d)
                        .and(&self.vals[x.0])
                        .map_collect(|&g, &xv| if xv >= *c { g } else { 0.0 });
                    acc(&mut adj, x.0, dx);
                }
                Op::SumAll { x } => {
                    let g = d[(0, 0)];
                    acc(&mut adj, x.0, Mat::from_elem(self.vals[x.0].dim(), g));
                }
                Op::MeanAll { x } => {
                    let n = self.vals[x.0].len() as f64;
                    let g = d[(0, 0)] / n;
                    acc(&mut adj, x.0, Mat::from_elem(self.vals[x.0].dim(), g));
                }
                Op::SumRows { x } | Op::SumRowsCanonical { x } => {
                    let (n, m) = self.vals[x.0].dim();
                    let mut dx = Mat::zeros((n, m));
                    for mut r in dx.rows_mut() {
                        r.assign(&d.row(0));
                    }
                    acc(&mut adj, x.0, dx);
                }
                Op::SumCols { x } => {
                    let (n, m) = self.vals[x.0].dim();
                    let mut dx = Mat::zeros((n, m));
                    for (j, mut r) in dx.rows_mut().into_iter().enumerate() {
                        r.fill(d[(j, 0)]);
                    }
                    acc(&mut adj, x.0, dx);
                }
                Op::BroadcastRow { x, .. } => {
                    let dx = d.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, x.0, dx);
                }
                Op::ConcatCols { xs } => {
                    let mut at = 0;
                    for v in xs {
                        let w = self.vals[v.0].ncols();
                        let dv = d.slice(ndarray::s![.., at..at + w]).to_owned();
                        acc(&mut adj, v.0, dv);
                        at += w;
                    }
                }
                Op::ConcatRows { xs } => {
                    let mut at = 0;
                    for v in xs {
                        let h = self.vals[v.0].nrows();
                        let dv = d.slice(ndarray::s![at..at + h, ..]).to_owned();
                        acc(&mut adj, v.0, dv);
                        at += h;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let mut dx = Mat::zeros(self.vals[x.0].dim());
                    dx.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&d);
                    acc(&mut adj, x.0, dx);
                }
                Op::SoftmaxRows { x } => {
                    let y = &self.vals[i];
                    let mut dx = Mat::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|c| d[(r, c)] * y[(r, c)]).sum();
                        for c in 0..y.ncols() {
                            dx[(r, c)] = y[(r, c)] * (d[(r, c)] - dot);
                        }
                    }
                    acc(&mut adj, x.0, dx);
                }
                Op::MinElem { a, b } => {
                    let av = &self.vals[a.0];
                    let bv = &self.vals[b.0];
                    let da = ndarray::Zip::from(&d)
                        .and(av)
                        .and(bv)
                        .map_collect(|&g, &x, &y| if x <= y { g } else { 0.0 });
                    let db = ndarray::Zip::from(&d)
                        .and(av)
                        .and(bv)
                        .map_collect(|&g, &x, &y| if y < x { g } else { 0.0 });
                    acc(&mut adj, a.0, da);
                    acc(&mut adj, b.0, db);
                }
                Op::MulScalar { x, s } => {
                    let c = self.vals[s.0][(0, 0)];
                    acc(&mut adj, x.0, d.mapv(|t| c * t));
                    let ds = (&d * &self.vals[x.0]).sum();
                    acc(&mut adj, s.0, super::scalar(ds));
                }
            }
        }
        Ok(())
    }
}

fn acc(adj: &mut [Option<Mat>], idx: usize, g: Mat) {
    match &mut adj[idx] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

/// Sum in a canonical (sorted) order so the result does not depend on the
/// original element order. Reorders `values` in place.
pub fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
