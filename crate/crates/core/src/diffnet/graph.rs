//! Eager reverse-mode tape over dense 2-d tensors.
//!
//! Every operation computes its value immediately and records how to
//! propagate gradients. Parameters enter the tape by reference through
//! [`Graph::bind`]; [`Graph::backward`] returns exact gradients for every
//! bound parameter.

use ndarray::{s, Array2, Axis, Zip};

use super::params::{GradSet, ParamSet};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Val<'a> {
    Own(Array2<f64>),
    Ref(&'a Array2<f64>),
}

impl Val<'_> {
    fn get(&self) -> &Array2<f64> {
        match self {
            Val::Own(a) => a,
            Val::Ref(a) => a,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    Sum(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
}

struct Node<'a> {
    value: Val<'a>,
    op: Op,
    needs_grad: bool,
}

/// Parameters of one [`ParamSet`] bound into a graph.
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn var(&self, name: &str) -> Var {
        self.try_var(name).unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.set.index_of(name).map(|i| self.vars[i])
    }

    pub fn set(&self) -> &'a ParamSet {
        self.set
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter of `bound` (zeros where unused).
    pub fn for_params(&self, bound: &Bound<'_>) -> GradSet {
        let mut out = ParamSet::new();
        for ((name, p), v) in bound.set.iter().zip(&bound.vars) {
            let g = self.wrt(*v).cloned().unwrap_or_else(|| Array2::zeros(p.raw_dim()));
            out.insert(name, g);
        }
        out
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Val::Own(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.nodes[v.0].value.get()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "not a scalar");
        a[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn constant(&mut self, a: Array2<f64>) -> Var {
        self.push(a, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, a: &'a Array2<f64>) -> Var {
        self.nodes.push(Node { value: Val::Ref(a), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    fn bind_with(&mut self, set: &'a ParamSet, needs_grad: bool) -> Bound<'a> {
        let vars = (0..set.len())
            .map(|i| {
                self.nodes.push(Node { value: Val::Ref(set.value_at(i)), op: Op::Leaf, needs_grad });
                Var(self.nodes.len() - 1)
            })
            .collect();
        Bound { set, vars }
    }

    /// Bind parameters as differentiable leaves.
    pub fn bind(&mut self, set: &'a ParamSet) -> Bound<'a> {
        self.bind_with(set, true)
    }

    /// Bind parameters as constants (no gradient flows into them).
    pub fn bind_frozen(&mut self, set: &'a ParamSet) -> Bound<'a> {
        self.bind_with(set, false)
    }

    /// Copy of `v` with gradient flow stopped.
    pub fn detach(&mut self, v: Var) -> Var {
        let a = self.value(v).clone();
        self.constant(a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul shape {:?} x {:?}", va.dim(), vb.dim());
        let out = va.dot(vb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape");
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `a (m x n) + b (1 x n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(vb.nrows() == 1 && vb.ncols() == va.ncols(), "add_row shape");
        let out = va + vb;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddRow(a, b), ng)
    }

    /// `a (m x n) * b (1 x n)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(vb.nrows() == 1 && vb.ncols() == va.ncols(), "mul_row shape");
        let out = va * vb;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MulRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        let ng = self.ng(a);
        self.push(out, Op::Ln(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    /// Elementwise clamp; gradient passes inside `[lo, hi]` only.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|x| x.max(lo).min(hi));
        let ng = self.ng(a);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "min shape");
        let mut out = self.value(a).clone();
        Zip::from(&mut out).and(self.value(b)).for_each(|x, &y| *x = x.min(y));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Min(a, b), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, `m x n -> m x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols rows differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows cols differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start, end), ng)
    }

    /// Rows of `a` gathered by index (indices may repeat).
    pub fn select_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.value(a).select(Axis(0), &idx);
        let ng = self.ng(a);
        self.push(out, Op::SelectRows(a, idx), ng)
    }

    /// `x W + b` with `W: in x out`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Exact gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf);
            let Some(g) = (if is_leaf { None } else { grads[i].take() }) else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let y = self.nodes[i].value.get();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.ng(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.ng(*b) {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.ng(*b) {
                    acc(*b, (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * y),
            Op::Ln(a) => acc(*a, g / self.value(*a)),
            Op::Square(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| *d *= 2.0 * x);
                acc(*a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x < *lo || x > *hi {
                        *d = 0.0;
                    }
                });
                acc(*a, d);
            }
            Op::Min(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = g.clone();
                let mut db = g.clone();
                Zip::from(&mut da).and(&mut db).and(va).and(vb).for_each(|da, db, &x, &y| {
                    if x <= y {
                        *db = 0.0;
                    } else {
                        *da = 0.0;
                    }
                });
                acc(*a, da);
                acc(*b, db);
            }
            Op::Sum(a) => acc(*a, Array2::from_elem(self.shape(*a), g[[0, 0]])),
            Op::SumRows(a) => {
                let (m, n) = self.shape(*a);
                acc(*a, g.broadcast((m, n)).expect("sum_rows broadcast").to_owned());
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.ng(*p) {
                        acc(*p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    if self.ng(*p) {
                        acc(*p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*end]).assign(g);
                acc(*a, d);
            }
            Op::SelectRows(a, idx) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (row, &r) in idx.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(row);
                }
                acc(*a, d);
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

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sum_of_parameters_has_unit_gradient() {
        let mut p = ParamSet::new();
        p.insert("a", array![[1.0, -2.0], [0.5, 3.0]]);
        p.insert("b", array![[7.0]]);
        let mut g = Graph::new();
        let bound = g.bind(&p);
        let sa = g.sum(bound.var("a"));
        let sb = g.sum(bound.var("b"));
        let loss = g.add(sa, sb);
        let grads = g.backward(loss).unwrap().for_params(&bound);
        assert!(grads.values().all(|t| t.iter().all(|&x| x == 1.0)));
    }

    #[test]
    fn linear_least_squares_closed_form() {
        // loss = 1/2 |W x - y|^2 in row form: x (1 x n) W (n x m)
        let mut p = ParamSet::new();
        let w = array![[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]];
        p.insert("w", w.clone());
        let x = array![[1.5, -0.5]];
        let y = array![[0.2, 0.4, -1.0]];
        let mut g = Graph::new();
        let bound = g.bind(&p);
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let pred = g.matmul(xv, bound.var("w"));
        let r = g.sub(pred, yv);
        let sq = g.square(r);
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grad = g.backward(loss).unwrap().for_params(&bound);
        let resid = x.dot(&w) - &y;
        let expected = x.t().dot(&resid);
        let got = grad.get("w").unwrap();
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Array2::zeros((2, 1)));
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss((2, 1)))));
    }

    #[test]
    fn frozen_binding_gets_no_gradient() {
        let mut p = ParamSet::new();
        p.insert("a", array![[2.0]]);
        let mut g = Graph::new();
        let bound = g.bind_frozen(&p);
        let sq = g.square(bound.var("a"));
        let grads = g.backward(sq).unwrap();
        assert!(grads.wrt(bound.var("a")).is_none());
        assert_eq!(grads.for_params(&bound).get("a").unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut p = ParamSet::new();
        p.insert("a", array![[3.0]]);
        let mut g = Graph::new();
        let b = g.bind(&p);
        let a = b.var("a");
        let prod = g.mul(a, a);
        let loss = g.add(prod, a);
        let grads = g.backward(loss).unwrap().for_params(&b);
        assert_eq!(grads.get("a").unwrap()[[0, 0]], 7.0);
    }
}
