//! Append-only tape of vector-valued nodes with reverse-mode accumulation.
//!
//! Every node holds a dense `Vec<f64>`; scalars are length-1 nodes. Nodes are
//! appended in evaluation order, so the node index is a topological order and
//! `backward` is a single reverse sweep.

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use super::params::{Gradients, ParamId, ParameterStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param { id: ParamId, offset: usize },
    MatVec { w: ParamId, x: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Axpy { a: usize, alpha: f64, b: usize },
    Scale(usize, f64),
    ScaleBy { v: usize, s: usize },
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Dot(usize, usize),
    Sum(usize),
    SqNorm(usize),
    MaskedSoftmax { x: usize, mask: Rc<[bool]> },
    WeightedSum { w: usize, vs: Vec<usize> },
    Normalize { x: usize, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Records operations over parameters held in a [`ParameterStore`].
pub struct Tape<'p> {
    params: &'p ParameterStore,
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tape node. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape<'t>,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("value", &self.value()).finish()
    }
}

/// Result of a backward sweep: parameter gradients plus per-node adjoints.
pub struct Backward {
    pub params: Gradients,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Backward {
    /// Adjoint of an arbitrary node (zeros when the root does not depend on it).
    pub fn wrt(&self, v: Var<'_>) -> Vec<f64> {
        match &self.nodes[v.id] {
            Some(g) => g.clone(),
            None => vec![0.0; v.len()],
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterStore) -> Self {
        Tape { params, nodes: RefCell::new(Vec::with_capacity(1024)) }
    }

    pub fn params(&self) -> &'p ParameterStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<f64>, op: Op) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        nodes.len() - 1
    }

    fn var<'t>(&'t self, id: usize) -> Var<'t> {
        Var { tape: self, id }
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    fn unary<'t>(&'t self, x: usize, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = self.with_value(x, |v| v.iter().map(|&a| f(a)).collect());
        self.var(self.push(value, op))
    }

    fn binary<'t>(&'t self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'t> {
        let value = {
            let nodes = self.nodes.borrow();
            let (u, v) = (&nodes[a].value, &nodes[b].value);
            assert_eq!(u.len(), v.len(), "length mismatch in elementwise op");
            u.iter().zip(v).map(|(&x, &y)| f(x, y)).collect()
        };
        self.var(self.push(value, op))
    }

    /// A constant input; receives no parameter gradient.
    pub fn constant<'t>(&'t self, value: Vec<f64>) -> Var<'t> {
        self.var(self.push(value, Op::Leaf))
    }

    pub fn scalar<'t>(&'t self, value: f64) -> Var<'t> {
        self.constant(vec![value])
    }

    pub fn zeros<'t>(&'t self, len: usize) -> Var<'t> {
        self.constant(vec![0.0; len])
    }

    /// The whole parameter array as a flat vector.
    pub fn param<'t>(&'t self, id: ParamId) -> Var<'t> {
        let value = self.params.data(id).to_vec();
        self.var(self.push(value, Op::Param { id, offset: 0 }))
    }

    /// One row of a 2-D parameter.
    pub fn param_row<'t>(&'t self, id: ParamId, row: usize) -> Var<'t> {
        let p = self.params.get(id);
        let cols = p.cols();
        assert!(row < p.rows(), "row {row} out of range for {}", p.name);
        let offset = row * cols;
        let value = p.data[offset..offset + cols].to_vec();
        self.var(self.push(value, Op::Param { id, offset }))
    }

    /// `W x` for a parameter matrix of shape `[rows, cols]`.
    pub fn matvec<'t>(&'t self, w: ParamId, x: Var<'t>) -> Var<'t> {
        let p = self.params.get(w);
        let (rows, cols) = (p.rows(), p.cols());
        let value = self.with_value(x.id, |xv| {
            assert_eq!(xv.len(), cols, "matvec: {} expects {cols} inputs, got {}", p.name, xv.len());
            (0..rows)
                .map(|r| p.data[r * cols..(r + 1) * cols].iter().zip(xv).map(|(a, b)| a * b).sum())
                .collect()
        });
        self.var(self.push(value, Op::MatVec { w, x: x.id }))
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let value = {
            let nodes = self.nodes.borrow();
            parts.iter().flat_map(|v| nodes[v.id].value.iter().copied()).collect()
        };
        self.var(self.push(value, Op::Concat(parts.iter().map(|v| v.id).collect())))
    }

    /// `Σ_i w_i v_i` for a weight vector `w` and equally sized vectors `vs`.
    pub fn weighted_sum<'t>(&'t self, w: Var<'t>, vs: &[Var<'t>]) -> Var<'t> {
        assert!(!vs.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let wv = &nodes[w.id].value;
            assert_eq!(wv.len(), vs.len());
            let mut out = vec![0.0; nodes[vs[0].id].value.len()];
            for (wi, v) in wv.iter().zip(vs) {
                for (o, x) in out.iter_mut().zip(&nodes[v.id].value) {
                    *o += wi * x;
                }
            }
            out
        };
        self.var(self.push(value, Op::WeightedSum { w: w.id, vs: vs.iter().map(|v| v.id).collect() }))
    }

    /// Sum of scalars (or vectors) as a chain of additions.
    pub fn sum_all<'t>(&'t self, parts: &[Var<'t>]) -> Option<Var<'t>> {
        let mut it = parts.iter().copied();
        let first = it.next()?;
        Some(it.fold(first, |acc, v| acc + v))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Backward> {
        let nodes = self.nodes.borrow();
        let root_len = nodes[root.id].value.len();
        if root_len != 1 {
            return Err(Error::NonScalarRoot { len: root_len });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        let mut pgrads = self.params.zero_gradients();

        fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl Fn(usize) -> f64) {
            let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
            for (i, s) in slot.iter_mut().enumerate() {
                *s += f(i);
            }
        }

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param { id: pid, offset } => {
                    let dst = &mut pgrads.get_mut(*pid)[*offset..*offset + g.len()];
                    for (d, v) in dst.iter_mut().zip(&g) {
                        *d += v;
                    }
                }
                Op::MatVec { w, x } => {
                    let p = self.params.get(*w);
                    let cols = p.cols();
                    let xv = &nodes[*x].value;
                    let gw = pgrads.get_mut(*w);
                    for (r, gr) in g.iter().enumerate() {
                        if *gr != 0.0 {
                            for (dst, xc) in gw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                *dst += gr * xc;
                            }
                        }
                    }
                    acc(&mut grads, *x, cols, |c| {
                        g.iter().enumerate().map(|(r, gr)| gr * p.data[r * cols + c]).sum()
                    });
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.len(), |i| g[i]);
                    acc(&mut grads, *b, g.len(), |i| g[i]);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.len(), |i| g[i]);
                    acc(&mut grads, *b, g.len(), |i| -g[i]);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    acc(&mut grads, *a, g.len(), |i| g[i] * bv[i]);
                    acc(&mut grads, *b, g.len(), |i| g[i] * av[i]);
                }
                Op::Axpy { a, alpha, b } => {
                    acc(&mut grads, *a, g.len(), |i| g[i]);
                    acc(&mut grads, *b, g.len(), |i| alpha * g[i]);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.len(), |i| c * g[i]),
                Op::ScaleBy { v, s } => {
                    let vv = &nodes[*v].value;
                    let sv = nodes[*s].value[0];
                    acc(&mut grads, *v, g.len(), |i| sv * g[i]);
                    let ds: f64 = g.iter().zip(vv).map(|(a, b)| a * b).sum();
                    acc(&mut grads, *s, 1, |_| ds);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p].value.len();
                        acc(&mut grads, p, n, |i| g[off + i]);
                        off += n;
                    }
                }
                Op::Slice { x, start } => {
                    let n = nodes[*x].value.len();
                    let (s, e) = (*start, start + g.len());
                    acc(&mut grads, *x, n, |i| if i >= s && i < e { g[i - s] } else { 0.0 });
                }
                Op::Tanh(x) => acc(&mut grads, *x, g.len(), |i| g[i] * (1.0 - y[i] * y[i])),
                Op::Sigmoid(x) => acc(&mut grads, *x, g.len(), |i| g[i] * y[i] * (1.0 - y[i])),
                Op::Softplus(x) => {
                    let xv = &nodes[*x].value;
                    acc(&mut grads, *x, g.len(), |i| g[i] * sigmoid(xv[i]))
                }
                Op::Exp(x) => acc(&mut grads, *x, g.len(), |i| g[i] * y[i]),
                Op::Log(x) => {
                    let xv = &nodes[*x].value;
                    acc(&mut grads, *x, g.len(), |i| g[i] / xv[i])
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    acc(&mut grads, *a, av.len(), |i| g[0] * bv[i]);
                    acc(&mut grads, *b, bv.len(), |i| g[0] * av[i]);
                }
                Op::Sum(x) => {
                    let n = nodes[*x].value.len();
                    acc(&mut grads, *x, n, |_| g[0]);
                }
                Op::SqNorm(x) => {
                    let xv = &nodes[*x].value;
                    acc(&mut grads, *x, xv.len(), |i| 2.0 * g[0] * xv[i]);
                }
                Op::MaskedSoftmax { x, mask } => {
                    let inner: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    acc(&mut grads, *x, g.len(), |i| if mask[i] { y[i] * (g[i] - inner) } else { 0.0 });
                }
                Op::WeightedSum { w, vs } => {
                    let wv = &nodes[*w].value;
                    let dw: Vec<f64> = vs
                        .iter()
                        .map(|&v| nodes[v].value.iter().zip(&g).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(&mut grads, *w, wv.len(), |i| dw[i]);
                    for (k, &v) in vs.iter().enumerate() {
                        acc(&mut grads, v, g.len(), |i| wv[k] * g[i]);
                    }
                }
                Op::Normalize { x, eps } => {
                    let xv = &nodes[*x].value;
                    let n = xv.len() as f64;
                    let mean = xv.iter().sum::<f64>() / n;
                    let var = xv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gm = g.iter().sum::<f64>() / n;
                    let gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    acc(&mut grads, *x, g.len(), |i| inv * (g[i] - gm - y[i] * gy));
                }
            }
            grads[id] = Some(g);
        }
        Ok(Backward { params: pgrads, nodes: grads })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape<'t> {
        self.tape
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.with_value(self.id, <[f64]>::to_vec)
    }

    /// Value of a length-1 node.
    pub fn scalar(&self) -> f64 {
        self.tape.with_value(self.id, |v| {
            assert_eq!(v.len(), 1, "scalar() on a vector node");
            v[0]
        })
    }

    pub fn len(&self) -> usize {
        self.tape.with_value(self.id, <[f64]>::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.tape.with_value(self.id, |v| v.iter().all(|x| x.is_finite()))
    }

    /// `self + alpha * other`.
    pub fn axpy(self, alpha: f64, other: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, other.id, |a, b| a + alpha * b, Op::Axpy { a: self.id, alpha, b: other.id })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| c * a, Op::Scale(self.id, c))
    }

    /// Vector times a scalar node.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        let sv = s.scalar();
        self.tape.unary(self.id, |a| sv * a, Op::ScaleBy { v: self.id, s: s.id })
    }

    pub fn slice(self, start: usize, len: usize) -> Var<'t> {
        let value = self.tape.with_value(self.id, |v| v[start..start + len].to_vec());
        self.tape.var(self.tape.push(value, Op::Slice { x: self.id, start }))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, sigmoid, Op::Sigmoid(self.id))
    }

    /// `ln(1 + e^x)`, evaluated without overflow for large |x|.
    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(self.id, softplus, Op::Softplus(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, f64::ln, Op::Log(self.id))
    }

    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            assert_eq!(a.len(), b.len(), "dot length mismatch");
            vec![a.iter().zip(b).map(|(x, y)| x * y).sum()]
        };
        self.tape.var(self.tape.push(value, Op::Dot(self.id, other.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let value = self.tape.with_value(self.id, |v| vec![v.iter().sum()]);
        self.tape.var(self.tape.push(value, Op::Sum(self.id)))
    }

    pub fn sq_norm(self) -> Var<'t> {
        let value = self.tape.with_value(self.id, |v| vec![v.iter().map(|x| x * x).sum()]);
        self.tape.var(self.tape.push(value, Op::SqNorm(self.id)))
    }

    /// Softmax over the entries where `mask` is true; masked entries get
    /// exactly zero weight and their inputs never enter the arithmetic.
    pub fn masked_softmax(self, mask: &[bool]) -> Result<Var<'t>> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::FullyMasked);
        }
        let value = self.tape.with_value(self.id, |v| {
            assert_eq!(v.len(), mask.len());
            let max = v
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut out = vec![0.0; v.len()];
            let mut total = 0.0;
            for i in 0..v.len() {
                if mask[i] {
                    out[i] = (v[i] - max).exp();
                    total += out[i];
                }
            }
            for o in &mut out {
                *o /= total;
            }
            out
        });
        let mask: Rc<[bool]> = mask.into();
        Ok(self.tape.var(self.tape.push(value, Op::MaskedSoftmax { x: self.id, mask })))
    }

    pub fn softmax(self) -> Var<'t> {
        let mask = vec![true; self.len()];
        self.masked_softmax(&mask).expect("non-empty softmax")
    }

    /// Zero-mean, unit-variance rescaling over the entries of this vector.
    pub fn normalize(self, eps: f64) -> Var<'t> {
        let value = self.tape.with_value(self.id, |v| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            v.iter().map(|x| (x - mean) * inv).collect()
        });
        self.tape.var(self.tape.push(value, Op::Normalize { x: self.id, eps }))
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, |a, b| a + b, Op::Add(self.id, rhs.id))
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, |a, b| a - b, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, |a, b| a * b, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut ps = ParameterStore::new();
        let w = ps.add("w", &[1], vec![3.0]);
        let tape = Tape::new(&ps);
        let x = tape.param(w);
        let f = x * x;
        assert_eq!(f.scalar(), 9.0);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.params.get(w), &[6.0]);
    }

    #[test]
    fn softplus_at_zero() {
        let mut ps = ParameterStore::new();
        let w = ps.add("w", &[1], vec![0.0]);
        let tape = Tape::new(&ps);
        let f = tape.param(w).softplus();
        assert!((f.scalar() - std::f64::consts::LN_2).abs() < 1e-15);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.params.get(w), &[0.5]);
    }

    #[test]
    fn softplus_saturation() {
        let ps = ParameterStore::new();
        let tape = Tape::new(&ps);
        let lo = tape.constant(vec![-40.0, -800.0]).softplus().value();
        assert!(lo[0] > 0.0 && lo[0] < 1e-17);
        assert!(lo[1].is_finite() && lo[1] >= 0.0);
        let hi = tape.constant(vec![800.0]).softplus().scalar();
        assert_eq!(hi, 800.0);
    }

    #[test]
    fn non_scalar_root() {
        let ps = ParameterStore::new();
        let tape = Tape::new(&ps);
        let v = tape.constant(vec![1.0, 2.0]);
        assert!(matches!(tape.backward(v), Err(Error::NonScalarRoot { len: 2 })));
    }

    #[test]
    fn fully_masked_softmax_is_error() {
        let ps = ParameterStore::new();
        let tape = Tape::new(&ps);
        let v = tape.constant(vec![1.0, 2.0]);
        assert!(matches!(v.masked_softmax(&[false, false]), Err(Error::FullyMasked)));
    }

    #[test]
    fn masked_softmax_ignores_masked_values() {
        let ps = ParameterStore::new();
        let tape = Tape::new(&ps);
        let a = tape.constant(vec![0.0, f64::NAN, 3f64.ln()]).masked_softmax(&[true, false, true]).unwrap();
        let w = a.value();
        assert!((w[0] - 0.25).abs() < 1e-15 && w[1] == 0.0 && (w[2] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut ps = ParameterStore::new();
        let w = ps.add("w", &[2, 3], (0..6).map(|i| 0.1 * i as f64 - 0.2).collect());
        let run = || {
            let tape = Tape::new(&ps);
            let x = tape.constant(vec![0.3, -1.2, 0.7]);
            let f = tape.matvec(w, x).tanh().sq_norm();
            tape.backward(f).unwrap().params
        };
        assert_eq!(run(), run());
    }
}
