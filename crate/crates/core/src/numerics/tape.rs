//! Record/replay reverse-mode differentiation.
//!
//! A [`Tape`] binds a [`ParamVector`], records vector-granularity ops
//! during the forward pass, and replays them backward to produce an exact
//! [`Gradient`] in the run's layout. Values are computed eagerly through
//! the kernels in [`super::kernels`], so a tape forward agrees bit-for-bit
//! with the tape-free inference path.
//!
//! Non-finite intermediates do not panic mid-build: the tape latches the
//! first offending node and [`Tape::backprop`] reports it.

use super::kernels;
use super::{Gradient, ParamVector};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Param { seg: usize },
    Const,
    MatVec { w: usize, x: usize },
    Row { m: usize, row: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// The additive part acts only on the forward value, so the op
    /// records just the multiplier for the reverse pass.
    Affine { a: usize, mul: T },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Exp { a: usize },
    LogSoftmax { a: usize },
    Stack { parts: Vec<usize> },
    Index { a: usize, idx: usize },
    LogAddExp { a: usize, b: usize },
    Sum { a: usize },
    DotConst { a: usize, weights: Vec<T> },
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Param { .. } => "param",
        Op::Const => "const",
        Op::MatVec { .. } => "matvec",
        Op::Row { .. } => "row",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Affine { .. } => "affine",
        Op::Tanh { .. } => "tanh",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Exp { .. } => "exp",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::Stack { .. } => "stack",
        Op::Index { .. } => "index",
        Op::LogAddExp { .. } => "logaddexp",
        Op::Sum { .. } => "sum",
        Op::DotConst { .. } => "dot_const",
    }
}

struct Node<T> {
    op: Op<T>,
    value: Vec<T>,
    /// Row count for matrix-shaped nodes (parameters); vectors use
    /// `rows == len`.
    rows: usize,
    cols: usize,
}

/// Computation trace bound to one parameter vector.
pub struct Tape<T: Real> {
    params: ParamVector<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    fault: Option<(usize, &'static str)>,
}

impl<T: Real> Tape<T> {
    pub fn new(params: &ParamVector<T>) -> Self {
        let n_segs = params.layout().segments().len();
        Tape {
            params: params.clone(),
            nodes: Vec::new(),
            param_vars: vec![None; n_segs],
            fault: None,
        }
    }

    pub fn params(&self) -> &ParamVector<T> {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Vec<T>, rows: usize, cols: usize) -> Var {
        if self.fault.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.fault = Some((self.nodes.len(), op_name(&op)));
        }
        self.nodes.push(Node { op, value, rows, cols });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a parameter segment; memoized so each segment has one node.
    pub fn param(&mut self, seg: usize) -> Var {
        if let Some(v) = self.param_vars[seg] {
            return v;
        }
        let s = self.params.layout().segment(seg).clone();
        let value = self.params.segment_values(seg).to_vec();
        let v = self.push(Op::Param { seg }, value, s.rows, s.cols);
        self.param_vars[seg] = Some(v);
        v
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Vec<T>) -> Var {
        let rows = value.len();
        self.push(Op::Const, value, rows, 1)
    }

    pub fn scalar_const(&mut self, value: T) -> Var {
        self.constant(vec![value])
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (rows, cols) = (self.nodes[w.0].rows, self.nodes[w.0].cols);
        debug_assert_eq!(self.nodes[x.0].value.len(), cols);
        let mut out = vec![T::zero(); rows];
        kernels::matvec(&self.nodes[w.0].value, rows, cols, &self.nodes[x.0].value, &mut out);
        self.push(Op::MatVec { w: w.0, x: x.0 }, out, rows, 1)
    }

    /// Gathers one row of a matrix-shaped node (embedding lookup).
    pub fn row(&mut self, m: Var, row: usize) -> Var {
        let cols = self.nodes[m.0].cols;
        let value = self.nodes[m.0].value[row * cols..(row + 1) * cols].to_vec();
        self.push(Op::Row { m: m.0, row }, value, cols, 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        debug_assert_eq!(self.nodes[b.0].value.len(), n);
        let mut out = vec![T::zero(); n];
        kernels::add(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out);
        self.push(Op::Add { a: a.0, b: b.0 }, out, n, 1)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let mut out = vec![T::zero(); n];
        kernels::sub(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out);
        self.push(Op::Sub { a: a.0, b: b.0 }, out, n, 1)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let mut out = vec![T::zero(); n];
        kernels::mul(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out);
        self.push(Op::Mul { a: a.0, b: b.0 }, out, n, 1)
    }

    /// `mul * a + add`, element-wise with scalar coefficients.
    pub fn affine(&mut self, a: Var, mul: T, add: T) -> Var {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&v| mul * v + add).collect();
        let n = value.len();
        self.push(Op::Affine { a: a.0, mul }, value, n, 1)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let mut out = vec![T::zero(); n];
        kernels::tanh(&self.nodes[a.0].value, &mut out);
        self.push(Op::Tanh { a: a.0 }, out, n, 1)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let mut out = vec![T::zero(); n];
        kernels::sigmoid(&self.nodes[a.0].value, &mut out);
        self.push(Op::Sigmoid { a: a.0 }, out, n, 1)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&v| v.exp()).collect();
        let n = value.len();
        self.push(Op::Exp { a: a.0 }, value, n, 1)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let mut out = vec![T::zero(); n];
        kernels::log_softmax(&self.nodes[a.0].value, &mut out);
        self.push(Op::LogSoftmax { a: a.0 }, out, n, 1)
    }

    /// Packs scalar vars into one vector var.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let value: Vec<T> = parts.iter().map(|p| self.scalar(*p)).collect();
        let n = value.len();
        self.push(Op::Stack { parts: parts.iter().map(|p| p.0).collect() }, value, n, 1)
    }

    /// Extracts element `idx` as a scalar var.
    pub fn index(&mut self, a: Var, idx: usize) -> Var {
        let value = vec![self.nodes[a.0].value[idx]];
        self.push(Op::Index { a: a.0, idx }, value, 1, 1)
    }

    /// Stable `log(exp(a) + exp(b))` on scalar vars.
    pub fn logaddexp(&mut self, a: Var, b: Var) -> Var {
        let value = vec![kernels::logaddexp(self.scalar(a), self.scalar(b))];
        self.push(Op::LogAddExp { a: a.0, b: b.0 }, value, 1, 1)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.iter().copied().sum();
        self.push(Op::Sum { a: a.0 }, vec![total], 1, 1)
    }

    /// Dot product against fixed (non-differentiated) weights.
    pub fn dot_const(&mut self, a: Var, weights: Vec<T>) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.len(), weights.len());
        let total = self.nodes[a.0].value.iter().zip(&weights).map(|(&v, &w)| v * w).sum();
        self.push(Op::DotConst { a: a.0, weights }, vec![total], 1, 1)
    }

    /// Reverse pass from a scalar loss; returns the exact gradient with
    /// respect to every bound parameter.
    pub fn backprop(&self, loss: Var) -> Result<Gradient<T>> {
        if let Some((node, op)) = self.fault {
            return Err(Error::NonFinite { node, op });
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::DimMismatch("backprop loss must be scalar".into()));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param { .. } | Op::Const => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::MatVec { w, x } => {
                    let (rows, cols) = (self.nodes[*w].rows, self.nodes[*w].cols);
                    let mut gw = take_or_zeros(&mut adj[*w], rows * cols);
                    let mut gx = take_or_zeros(&mut adj[*x], cols);
                    kernels::matvec_backward(
                        &self.nodes[*w].value,
                        rows,
                        cols,
                        &self.nodes[*x].value,
                        &g,
                        &mut gw,
                        &mut gx,
                    );
                    adj[*w] = Some(gw);
                    adj[*x] = Some(gx);
                }
                Op::Row { m, row } => {
                    let cols = self.nodes[*m].cols;
                    let total = self.nodes[*m].value.len();
                    let mut gm = take_or_zeros(&mut adj[*m], total);
                    for c in 0..cols {
                        gm[row * cols + c] = gm[row * cols + c] + g[c];
                    }
                    adj[*m] = Some(gm);
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj[*a], &g, |gi, _| gi);
                    accumulate(&mut adj[*b], &g, |gi, _| gi);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut adj[*a], &g, |gi, _| gi);
                    accumulate(&mut adj[*b], &g, |gi, _| -gi);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    accumulate_with(&mut adj[*a], &g, bv, |gi, o| gi * o);
                    accumulate_with(&mut adj[*b], &g, av, |gi, o| gi * o);
                }
                Op::Affine { a, mul } => {
                    let m = *mul;
                    accumulate(&mut adj[*a], &g, move |gi, _| gi * m);
                }
                Op::Tanh { a } => {
                    accumulate_with(&mut adj[*a], &g, &node.value, |gi, y| {
                        gi * (T::one() - y * y)
                    });
                }
                Op::Sigmoid { a } => {
                    accumulate_with(&mut adj[*a], &g, &node.value, |gi, y| {
                        gi * y * (T::one() - y)
                    });
                }
                Op::Exp { a } => {
                    accumulate_with(&mut adj[*a], &g, &node.value, |gi, y| gi * y);
                }
                Op::LogSoftmax { a } => {
                    let gsum: T = g.iter().copied().sum();
                    accumulate_with(&mut adj[*a], &g, &node.value, move |gi, y| {
                        gi - y.exp() * gsum
                    });
                }
                Op::Stack { parts } => {
                    for (k, p) in parts.iter().enumerate() {
                        let mut gp = take_or_zeros(&mut adj[*p], 1);
                        gp[0] = gp[0] + g[k];
                        adj[*p] = Some(gp);
                    }
                }
                Op::Index { a, idx } => {
                    let n = self.nodes[*a].value.len();
                    let mut ga = take_or_zeros(&mut adj[*a], n);
                    ga[*idx] = ga[*idx] + g[0];
                    adj[*a] = Some(ga);
                }
                Op::LogAddExp { a, b } => {
                    let y = node.value[0];
                    let av = self.nodes[*a].value[0];
                    let bv = self.nodes[*b].value[0];
                    let mut ga = take_or_zeros(&mut adj[*a], 1);
                    ga[0] = ga[0] + g[0] * (av - y).exp();
                    adj[*a] = Some(ga);
                    let mut gb = take_or_zeros(&mut adj[*b], 1);
                    gb[0] = gb[0] + g[0] * (bv - y).exp();
                    adj[*b] = Some(gb);
                }
                Op::Sum { a } => {
                    let n = self.nodes[*a].value.len();
                    let mut ga = take_or_zeros(&mut adj[*a], n);
                    for gi in ga.iter_mut() {
                        *gi = *gi + g[0];
                    }
                    adj[*a] = Some(ga);
                }
                Op::DotConst { a, weights } => {
                    let n = self.nodes[*a].value.len();
                    let mut ga = take_or_zeros(&mut adj[*a], n);
                    for (gi, &w) in ga.iter_mut().zip(weights) {
                        *gi = *gi + g[0] * w;
                    }
                    adj[*a] = Some(ga);
                }
            }
        }

        let layout = self.params.layout().clone();
        let mut values = vec![T::zero(); layout.total_len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { seg } = node.op {
                if let Some(g) = &adj[i] {
                    let s = layout.segment(seg);
                    values[s.offset..s.offset + s.len()].copy_from_slice(g);
                }
            }
        }
        Gradient::from_values(layout, values)
    }
}

fn take_or_zeros<T: Real>(slot: &mut Option<Vec<T>>, n: usize) -> Vec<T> {
    slot.take().unwrap_or_else(|| vec![T::zero(); n])
}

/// Adds `f(g[i], i)` into the adjoint slot.
fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: &[T], f: impl Fn(T, usize) -> T) {
    let mut acc = slot.take().unwrap_or_else(|| vec![T::zero(); g.len()]);
    for (i, &gi) in g.iter().enumerate() {
        acc[i] = acc[i] + f(gi, i);
    }
    *slot = Some(acc);
}

/// Adds `f(g[i], other[i])` into the adjoint slot.
fn accumulate_with<T: Real>(slot: &mut Option<Vec<T>>, g: &[T], other: &[T], f: impl Fn(T, T) -> T) {
    let mut acc = slot.take().unwrap_or_else(|| vec![T::zero(); g.len()]);
    for i in 0..g.len() {
        acc[i] = acc[i] + f(g[i], other[i]);
    }
    *slot = Some(acc);
}
