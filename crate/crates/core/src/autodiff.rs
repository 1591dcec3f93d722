//! Define-by-run reverse-mode automatic differentiation over scalars.
//!
//! Model and loss code is written once against the [`Graph`] trait and runs
//! either on plain `f64` values ([`Eval`]) or on a recording [`Tape`] whose
//! [`Tape::backward`] pass fills in leaf gradients.
//!
//! ```
//! use trendid::autodiff::{Graph, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(3.0);
//! let y = tape.mul(x, x);
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x), 6.0);
//! ```

use std::cell::RefCell;
use std::fmt;

use thiserror::Error;

/// Operation recorded for a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpTag {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Log,
    Exp,
    Tanh,
    Square,
    Softplus,
    Scale,
    Dot,
    Norm,
    Sum,
}

impl fmt::Display for OpTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpTag::Leaf => "leaf",
            OpTag::Const => "const",
            OpTag::Add => "add",
            OpTag::Sub => "sub",
            OpTag::Mul => "mul",
            OpTag::Div => "div",
            OpTag::Log => "log",
            OpTag::Exp => "exp",
            OpTag::Tanh => "tanh",
            OpTag::Square => "square",
            OpTag::Softplus => "softplus",
            OpTag::Scale => "scale",
            OpTag::Dot => "dot",
            OpTag::Norm => "norm",
            OpTag::Sum => "sum",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value {value} produced by `{op}` at node {node}")]
    NonFinite { op: OpTag, node: usize, value: f64 },
    #[error("non-finite gradient {value} reached leaf node {node}")]
    NonFiniteGradient { node: usize, value: f64 },
}

/// Scalar expression builder.
///
/// Implemented by [`Eval`] (immediate `f64` arithmetic) and [`Tape`]
/// (recorded for reverse-mode differentiation).
pub trait Graph {
    type Value: Copy;

    fn constant(&self, v: f64) -> Self::Value;
    /// A parameter scalar. On a tape, trainable parameters become leaves
    /// and frozen ones become constants.
    fn parameter(&self, v: f64, trainable: bool) -> Self::Value;
    fn value(&self, x: Self::Value) -> f64;

    fn add(&self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn sub(&self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn mul(&self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn div(&self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn log(&self, a: Self::Value) -> Self::Value;
    fn exp(&self, a: Self::Value) -> Self::Value;
    fn tanh(&self, a: Self::Value) -> Self::Value;
    fn square(&self, a: Self::Value) -> Self::Value;
    /// `log(1 + exp(a))`, evaluated without overflow.
    fn softplus(&self, a: Self::Value) -> Self::Value;
    /// Multiplication by a constant.
    fn scale(&self, a: Self::Value, c: f64) -> Self::Value;
    fn dot(&self, a: &[Self::Value], b: &[Self::Value]) -> Self::Value;
    /// Euclidean norm.
    fn norm(&self, a: &[Self::Value]) -> Self::Value;
    fn sum(&self, a: &[Self::Value]) -> Self::Value;

    fn add_const(&self, a: Self::Value, c: f64) -> Self::Value {
        let c = self.constant(c);
        self.add(a, c)
    }

    fn constants(&self, vs: &[f64]) -> Vec<Self::Value> {
        vs.iter().map(|&v| self.constant(v)).collect()
    }
}

pub(crate) fn softplus_f64(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn sigmoid_f64(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Immediate evaluation on `f64`; no gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eval;

impl Graph for Eval {
    type Value = f64;

    fn constant(&self, v: f64) -> f64 {
        v
    }
    fn parameter(&self, v: f64, _trainable: bool) -> f64 {
        v
    }
    fn value(&self, x: f64) -> f64 {
        x
    }
    fn add(&self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn div(&self, a: f64, b: f64) -> f64 {
        a / b
    }
    fn log(&self, a: f64) -> f64 {
        a.ln()
    }
    fn exp(&self, a: f64) -> f64 {
        a.exp()
    }
    fn tanh(&self, a: f64) -> f64 {
        a.tanh()
    }
    fn square(&self, a: f64) -> f64 {
        a * a
    }
    fn softplus(&self, a: f64) -> f64 {
        softplus_f64(a)
    }
    fn scale(&self, a: f64, c: f64) -> f64 {
        a * c
    }
    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
    fn norm(&self, a: &[f64]) -> f64 {
        a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
    fn sum(&self, a: &[f64]) -> f64 {
        a.iter().sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Const,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Log(u32),
    Exp(u32),
    Tanh(u32),
    Square(u32),
    Softplus(u32),
    Scale(u32, f64),
    // Operand ranges index into `TapeInner::operands`.
    Dot { start: u32, len: u32 },
    Norm { start: u32, len: u32 },
    Sum { start: u32, len: u32 },
}

impl Op {
    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::Const => OpTag::Const,
            Op::Add(..) => OpTag::Add,
            Op::Sub(..) => OpTag::Sub,
            Op::Mul(..) => OpTag::Mul,
            Op::Div(..) => OpTag::Div,
            Op::Log(_) => OpTag::Log,
            Op::Exp(_) => OpTag::Exp,
            Op::Tanh(_) => OpTag::Tanh,
            Op::Square(_) => OpTag::Square,
            Op::Softplus(_) => OpTag::Softplus,
            Op::Scale(..) => OpTag::Scale,
            Op::Dot { .. } => OpTag::Dot,
            Op::Norm { .. } => OpTag::Norm,
            Op::Sum { .. } => OpTag::Sum,
        }
    }
}

#[derive(Default)]
struct TapeInner {
    values: Vec<f64>,
    ops: Vec<Op>,
    operands: Vec<u32>,
    // Accumulated leaf gradients; indexed like `values`.
    grads: Vec<f64>,
}

/// Recording graph. Nodes are appended in evaluation order, so the node
/// list is already a topological order for the backward sweep.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        let tape = Self::default();
        {
            let mut inner = tape.inner.borrow_mut();
            inner.values.reserve(nodes);
            inner.ops.reserve(nodes);
        }
        tape
    }

    /// Drops every node but keeps the allocations.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.values.clear();
        inner.ops.clear();
        inner.operands.clear();
        inner.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, v: f64) -> Var {
        self.push(v, Op::Leaf)
    }

    pub fn op_tag(&self, x: Var) -> OpTag {
        self.inner.borrow().ops[x.index()].tag()
    }

    /// Accumulated gradient of `x` from all backward passes since the last
    /// [`Tape::zero_grad`]. Zero for non-leaves and before any pass.
    pub fn grad(&self, x: Var) -> f64 {
        self.inner.borrow().grads.get(x.index()).copied().unwrap_or(0.0)
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Propagates d(root)/d(node) backward and adds the result into the
    /// gradient slot of every leaf. Repeated calls accumulate.
    pub fn backward(&self, root: Var) -> Result<(), AutodiffError> {
        let mut inner = self.inner.borrow_mut();
        let n = root.index() + 1;
        for i in 0..n {
            let v = inner.values[i];
            if !v.is_finite() {
                return Err(AutodiffError::NonFinite {
                    op: inner.ops[i].tag(),
                    node: i,
                    value: v,
                });
            }
        }

        let mut adj = vec![0.0; n];
        adj[root.index()] = 1.0;
        let TapeInner {
            values,
            ops,
            operands,
            grads,
        } = &mut *inner;
        for i in (0..n).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match ops[i] {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] += g;
                }
                Op::Sub(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] -= g;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (values[a as usize], values[b as usize]);
                    adj[a as usize] += g * vb;
                    adj[b as usize] += g * va;
                }
                Op::Div(a, b) => {
                    let vb = values[b as usize];
                    adj[a as usize] += g / vb;
                    adj[b as usize] -= g * values[i] / vb;
                }
                Op::Log(a) => adj[a as usize] += g / values[a as usize],
                Op::Exp(a) => adj[a as usize] += g * values[i],
                Op::Tanh(a) => {
                    let t = values[i];
                    adj[a as usize] += g * (1.0 - t * t);
                }
                Op::Square(a) => adj[a as usize] += 2.0 * g * values[a as usize],
                Op::Softplus(a) => adj[a as usize] += g * sigmoid_f64(values[a as usize]),
                Op::Scale(a, c) => adj[a as usize] += g * c,
                Op::Dot { start, len } => {
                    let (s, l) = (start as usize, len as usize);
                    let (lhs, rhs) = operands[s..s + 2 * l].split_at(l);
                    for (&a, &b) in lhs.iter().zip(rhs) {
                        let (va, vb) = (values[a as usize], values[b as usize]);
                        adj[a as usize] += g * vb;
                        adj[b as usize] += g * va;
                    }
                }
                Op::Norm { start, len } => {
                    let nrm = values[i];
                    let (s, l) = (start as usize, len as usize);
                    // Subgradient zero at the origin.
                    if nrm > 0.0 {
                        for &a in &operands[s..s + l] {
                            adj[a as usize] += g * values[a as usize] / nrm;
                        }
                    }
                }
                Op::Sum { start, len } => {
                    let (s, l) = (start as usize, len as usize);
                    for &a in &operands[s..s + l] {
                        adj[a as usize] += g;
                    }
                }
            }
        }

        if grads.len() < values.len() {
            grads.resize(values.len(), 0.0);
        }
        for i in 0..n {
            if matches!(ops[i], Op::Leaf) {
                if !adj[i].is_finite() {
                    return Err(AutodiffError::NonFiniteGradient {
                        node: i,
                        value: adj[i],
                    });
                }
                grads[i] += adj[i];
            }
        }
        Ok(())
    }

    fn push(&self, v: f64, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.values.len();
        inner.values.push(v);
        inner.ops.push(op);
        Var(idx as u32)
    }

    fn push_range(&self, vars: &[&[Var]]) -> (u32, u32) {
        let mut inner = self.inner.borrow_mut();
        let start = inner.operands.len() as u32;
        for slice in vars {
            inner.operands.extend(slice.iter().map(|v| v.0));
        }
        (start, vars.first().map_or(0, |s| s.len()) as u32)
    }

    fn val(&self, x: Var) -> f64 {
        self.inner.borrow().values[x.index()]
    }
}

impl Graph for Tape {
    type Value = Var;

    fn constant(&self, v: f64) -> Var {
        self.push(v, Op::Const)
    }
    fn parameter(&self, v: f64, trainable: bool) -> Var {
        if trainable {
            self.push(v, Op::Leaf)
        } else {
            self.push(v, Op::Const)
        }
    }
    fn value(&self, x: Var) -> f64 {
        self.val(x)
    }
    fn add(&self, a: Var, b: Var) -> Var {
        self.push(self.val(a) + self.val(b), Op::Add(a.0, b.0))
    }
    fn sub(&self, a: Var, b: Var) -> Var {
        self.push(self.val(a) - self.val(b), Op::Sub(a.0, b.0))
    }
    fn mul(&self, a: Var, b: Var) -> Var {
        self.push(self.val(a) * self.val(b), Op::Mul(a.0, b.0))
    }
    fn div(&self, a: Var, b: Var) -> Var {
        self.push(self.val(a) / self.val(b), Op::Div(a.0, b.0))
    }
    fn log(&self, a: Var) -> Var {
        self.push(self.val(a).ln(), Op::Log(a.0))
    }
    fn exp(&self, a: Var) -> Var {
        self.push(self.val(a).exp(), Op::Exp(a.0))
    }
    fn tanh(&self, a: Var) -> Var {
        self.push(self.val(a).tanh(), Op::Tanh(a.0))
    }
    fn square(&self, a: Var) -> Var {
        let v = self.val(a);
        self.push(v * v, Op::Square(a.0))
    }
    fn softplus(&self, a: Var) -> Var {
        self.push(softplus_f64(self.val(a)), Op::Softplus(a.0))
    }
    fn scale(&self, a: Var, c: f64) -> Var {
        self.push(self.val(a) * c, Op::Scale(a.0, c))
    }
    fn dot(&self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "dot operands differ in length");
        let v = {
            let inner = self.inner.borrow();
            a.iter()
                .zip(b)
                .map(|(x, y)| inner.values[x.index()] * inner.values[y.index()])
                .sum()
        };
        let (start, len) = self.push_range(&[a, b]);
        self.push(v, Op::Dot { start, len })
    }
    fn norm(&self, a: &[Var]) -> Var {
        let v = {
            let inner = self.inner.borrow();
            a.iter()
                .map(|x| inner.values[x.index()].powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let (start, len) = self.push_range(&[a]);
        self.push(v, Op::Norm { start, len })
    }
    fn sum(&self, a: &[Var]) -> Var {
        let v = {
            let inner = self.inner.borrow();
            a.iter().map(|x| inner.values[x.index()]).sum()
        };
        let (start, len) = self.push_range(&[a]);
        self.push(v, Op::Sum { start, len })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(f: impl Fn(&Tape, Var) -> Var, x0: f64) -> f64 {
        let tape = Tape::new();
        let x = tape.leaf(x0);
        let y = f(&tape, x);
        tape.backward(y).unwrap();
        tape.grad(x)
    }

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn square_via_mul() {
        assert_eq!(grad_of(|t, x| t.mul(x, x), 3.0), 6.0);
    }

    #[test]
    fn log_at_one() {
        assert_eq!(grad_of(|t, x| t.log(x), 1.0), 1.0);
    }

    #[test]
    fn unary_ops_match_central_differences() {
        let cases: Vec<(&str, Box<dyn Fn(&Tape, Var) -> Var>, Box<dyn Fn(f64) -> f64>)> = vec![
            ("exp", Box::new(|t, x| t.exp(x)), Box::new(f64::exp)),
            ("tanh", Box::new(|t, x| t.tanh(x)), Box::new(f64::tanh)),
            ("square", Box::new(|t, x| t.square(x)), Box::new(|x| x * x)),
            ("softplus", Box::new(|t, x| t.softplus(x)), Box::new(softplus_f64)),
            ("scale", Box::new(|t, x| t.scale(x, -2.5)), Box::new(|x| -2.5 * x)),
            (
                "div",
                Box::new(|t, x| {
                    let c = t.constant(2.0);
                    t.div(c, x)
                }),
                Box::new(|x| 2.0 / x),
            ),
        ];
        for (name, tf, ff) in cases {
            for &x in &[-1.3, 0.4, 2.2] {
                let g = grad_of(&tf, x);
                let n = central(&ff, x);
                assert!((g - n).abs() < 1e-7 * n.abs().max(1.0), "{name} at {x}: {g} vs {n}");
            }
        }
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus_f64(800.0), 800.0);
        assert!(softplus_f64(-800.0) >= 0.0);
        assert!((grad_of(|t, x| t.softplus(x), 800.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nary_ops() {
        let tape = Tape::new();
        let a = [tape.leaf(1.0), tape.leaf(-2.0)];
        let b = [tape.leaf(3.0), tape.leaf(0.5)];
        let d = tape.dot(&a, &b);
        let n = tape.norm(&a);
        let s = tape.sum(&[d, n]);
        tape.backward(s).unwrap();
        assert_eq!(tape.value(d), 2.0);
        let nrm = 5f64.sqrt();
        assert!((tape.grad(a[0]) - (3.0 + 1.0 / nrm)).abs() < 1e-15);
        assert!((tape.grad(a[1]) - (0.5 - 2.0 / nrm)).abs() < 1e-15);
        assert_eq!(tape.grad(b[0]), 1.0);
        assert_eq!(tape.grad(b[1]), -2.0);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(2.0);
        let y = tape.mul(x, x);
        let z = tape.exp(y);
        tape.backward(z).unwrap();
        let once = tape.grad(x);
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x), 2.0 * once);
        tape.zero_grad();
        assert_eq!(tape.grad(x), 0.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(2.0);
        let c = tape.parameter(5.0, false);
        let y = tape.mul(x, c);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), 5.0);
        assert_eq!(tape.grad(c), 0.0);
        assert_eq!(tape.op_tag(c), OpTag::Const);
    }

    #[test]
    fn non_finite_value_names_the_op() {
        let tape = Tape::new();
        let x = tape.leaf(-1.0);
        let y = tape.log(x);
        match tape.backward(y) {
            Err(AutodiffError::NonFinite { op, node, .. }) => {
                assert_eq!(op, OpTag::Log);
                assert_eq!(node, y.index());
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn eval_and_tape_agree() {
        fn expr<G: Graph>(g: &G, x: G::Value) -> G::Value {
            let s = g.softplus(x);
            let t = g.tanh(x);
            let p = g.dot(&[s, t], &[t, x]);
            let q = g.norm(&[p, s]);
            g.add_const(q, 0.25)
        }
        let tape = Tape::new();
        let xv = tape.leaf(0.7);
        let tv = expr(&tape, xv);
        assert_eq!(tape.value(tv), expr(&Eval, 0.7));
    }
}
