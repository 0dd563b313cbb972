//! A small reverse-mode differentiation tape over real vectors.
//!
//! Nodes are appended in construction order, which is also a valid
//! topological order: every node only refers to nodes created before it.
//! Each node holds a vector value (length fixed at construction) and an
//! adjoint of the same length. Elementwise binary ops accept operands of
//! equal length, or a length-1 operand that is broadcast.
//!
//! ```
//! use std::collections::HashMap;
//! use stlseeker::diffgraph::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf("x", 1).unwrap();
//! let y = tape.leaf("y", 1).unwrap();
//! let p = tape.mul(x, y).unwrap();
//! tape.set_output(p);
//! let values = HashMap::from([("x".to_string(), vec![2.0]), ("y".to_string(), vec![3.0])]);
//! assert_eq!(tape.forward(&values).unwrap(), vec![6.0]);
//! let grads = tape.backward().unwrap();
//! assert_eq!(grads["x"], vec![3.0]);
//! ```

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Smallest magnitude accepted as a divisor or logarithm argument.
pub const DOMAIN_GUARD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("no value supplied for leaf `{0}`")]
    MissingLeaf(String),
    #[error("leaf `{0}` is already declared")]
    DuplicateLeaf(String),
    #[error("unknown leaf `{0}`")]
    UnknownLeaf(String),
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("domain violation in {op} at node {node}: argument {value}")]
    Domain {
        op: &'static str,
        node: usize,
        value: f64,
    },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("tape has no output node")]
    NoOutput,
    #[error("output is not scalar (length {0})")]
    NonScalarOutput(usize),
    #[error("backward called before forward")]
    NotEvaluated,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied elementwise function with its derivative.
#[derive(Clone, Copy)]
pub struct ElemFn {
    pub name: &'static str,
    pub f: fn(f64) -> f64,
    pub df: fn(f64) -> f64,
}

impl fmt::Debug for ElemFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ElemFn({})", self.name)
    }
}

pub const SIGMOID: ElemFn = ElemFn {
    name: "sigmoid",
    f: sigmoid,
    df: |x| {
        let s = sigmoid(x);
        s * (1.0 - s)
    },
};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Constant,
    Leaf(String),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Power(usize, f64),
    Sum(usize),
    SoftMin(usize, f64),
    SoftMax(usize, f64),
    Index(usize, usize),
    Concat(Vec<usize>),
    Map(usize, ElemFn),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Constant | Op::Leaf(_) => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Power(a, _)
            | Op::Sum(a)
            | Op::SoftMin(a, _)
            | Op::SoftMax(a, _)
            | Op::Index(a, _)
            | Op::Map(a, _) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExprNode {
    pub op: Op,
    pub value: Vec<f64>,
    pub adjoint: Vec<f64>,
}

impl ExprNode {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<ExprNode>,
    leaves: Vec<(String, usize)>,
    leaf_lookup: HashMap<String, usize>,
    output: Option<usize>,
    evaluated: bool,
}

fn broadcast_len(op: &'static str, a: usize, b: usize) -> Result<usize, DiffError> {
    if a == b || b == 1 {
        Ok(a)
    } else if a == 1 {
        Ok(b)
    } else {
        Err(DiffError::ShapeMismatch {
            op,
            left: a,
            right: b,
        })
    }
}

#[inline]
fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

/// Numerically stable soft-min: `-(1/k) ln sum exp(-k a_i)`.
/// Returns the value and the normalized weights (the gradient).
pub fn soft_min(a: &[f64], k: f64) -> (f64, Vec<f64>) {
    soft_max_neg(a, k, -1.0)
}

/// Numerically stable soft-max: `(1/k) ln sum exp(k a_i)`.
pub fn soft_max(a: &[f64], k: f64) -> (f64, Vec<f64>) {
    soft_max_neg(a, k, 1.0)
}

// sign = +1 for soft-max, -1 for soft-min. Infinite entries are handled so
// that an unbounded operand behaves like the exact extremum.
fn soft_max_neg(a: &[f64], k: f64, sign: f64) -> (f64, Vec<f64>) {
    let n = a.len();
    let mut weights = vec![0.0; n];
    // extremum in the "winning" direction
    let ext = a
        .iter()
        .map(|&x| sign * x)
        .fold(f64::NEG_INFINITY, f64::max);
    if ext == f64::INFINITY {
        // some operand is +inf in the winning direction
        return (sign * f64::INFINITY, weights);
    }
    if ext == f64::NEG_INFINITY {
        return (-sign * f64::INFINITY, weights);
    }
    let mut total = 0.0;
    for (w, &x) in weights.iter_mut().zip(a) {
        let s = sign * x;
        *w = if s.is_finite() {
            (k * (s - ext)).exp()
        } else {
            0.0
        };
        total += *w;
    }
    for w in &mut weights {
        *w /= total;
    }
    (sign * (ext + total.ln() / k), weights)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &ExprNode {
        &self.nodes[v.0]
    }

    pub fn nodes(&self) -> &[ExprNode] {
        &self.nodes
    }

    pub fn width(&self, v: Var) -> usize {
        self.nodes[v.0].len()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Leaf names and handles in declaration order.
    pub fn leaves(&self) -> impl Iterator<Item = (&str, Var)> {
        self.leaves.iter().map(|(n, i)| (n.as_str(), Var(*i)))
    }

    pub fn leaf_var(&self, name: &str) -> Option<Var> {
        self.leaf_lookup.get(name).map(|&i| Var(i))
    }

    pub fn output(&self) -> Option<Var> {
        self.output.map(Var)
    }

    pub fn set_output(&mut self, v: Var) {
        self.output = Some(v.0);
        self.evaluated = false;
    }

    fn push(&mut self, op: Op, len: usize) -> Var {
        self.evaluated = false;
        self.nodes.push(ExprNode {
            op,
            value: vec![0.0; len],
            adjoint: vec![0.0; len],
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, name: &str, len: usize) -> Result<Var, DiffError> {
        if self.leaf_lookup.contains_key(name) {
            return Err(DiffError::DuplicateLeaf(name.to_string()));
        }
        if len == 0 {
            return Err(DiffError::InvalidParameter(format!(
                "leaf `{name}` has zero length"
            )));
        }
        let v = self.push(Op::Leaf(name.to_string()), len);
        self.leaves.push((name.to_string(), v.0));
        self.leaf_lookup.insert(name.to_string(), v.0);
        Ok(v)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        let len = value.len();
        let v = self.push(Op::Constant, len);
        self.nodes[v.0].value = value;
        v
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(vec![value])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        make: fn(usize, usize) -> Op,
    ) -> Result<Var, DiffError> {
        let len = broadcast_len(name, self.width(a), self.width(b))?;
        Ok(self.push(make(a.0, b.0), len))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("div", a, b, Op::Div)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let len = self.width(a);
        self.push(Op::Neg(a.0), len)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let len = self.width(a);
        self.push(Op::Exp(a.0), len)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let len = self.width(a);
        self.push(Op::Log(a.0), len)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let len = self.width(a);
        self.push(Op::Tanh(a.0), len)
    }

    pub fn powf(&mut self, a: Var, exponent: f64) -> Var {
        let len = self.width(a);
        self.push(Op::Power(a.0, exponent), len)
    }

    pub fn map(&mut self, a: Var, f: ElemFn) -> Var {
        let len = self.width(a);
        self.push(Op::Map(a.0, f), len)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, SIGMOID)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a.0), 1)
    }

    pub fn soft_min(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        check_temperature(k)?;
        Ok(self.push(Op::SoftMin(a.0, k), 1))
    }

    pub fn soft_max(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        check_temperature(k)?;
        Ok(self.push(Op::SoftMax(a.0, k), 1))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var, DiffError> {
        let len = self.width(a);
        if i >= len {
            return Err(DiffError::IndexOutOfRange { index: i, len });
        }
        Ok(self.push(Op::Index(a.0, i), 1))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::InvalidParameter("empty concat".into()));
        }
        let len = parts.iter().map(|p| self.width(*p)).sum();
        Ok(self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), len))
    }

    /// `sum(a * b)`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Evaluates every node. Leaf values are looked up by name.
    pub fn forward(&mut self, leaf_values: &HashMap<String, Vec<f64>>) -> Result<Vec<f64>, DiffError> {
        for (name, idx) in &self.leaves {
            let value = leaf_values
                .get(name)
                .ok_or_else(|| DiffError::MissingLeaf(name.clone()))?;
            let node = &mut self.nodes[*idx];
            if value.len() != node.value.len() {
                return Err(DiffError::ShapeMismatch {
                    op: "leaf",
                    left: node.value.len(),
                    right: value.len(),
                });
            }
            node.value.copy_from_slice(value);
        }
        self.evaluate()
    }

    /// Evaluates with leaf values given positionally in declaration order.
    pub fn forward_ordered<S: AsRef<[f64]>>(&mut self, values: &[S]) -> Result<Vec<f64>, DiffError> {
        if values.len() != self.leaves.len() {
            return Err(DiffError::ShapeMismatch {
                op: "leaves",
                left: self.leaves.len(),
                right: values.len(),
            });
        }
        for ((_, idx), value) in self.leaves.iter().zip(values) {
            let value = value.as_ref();
            let node = &mut self.nodes[*idx];
            if value.len() != node.value.len() {
                return Err(DiffError::ShapeMismatch {
                    op: "leaf",
                    left: node.value.len(),
                    right: value.len(),
                });
            }
            node.value.copy_from_slice(value);
        }
        self.evaluate()
    }

    fn evaluate(&mut self) -> Result<Vec<f64>, DiffError> {
        let out = self.output.ok_or(DiffError::NoOutput)?;
        self.evaluated = false;
        for i in 0..self.nodes.len() {
            let mut value = std::mem::take(&mut self.nodes[i].value);
            let result = self.eval_node(i, &mut value);
            self.nodes[i].value = value;
            result?;
        }
        self.evaluated = true;
        Ok(self.nodes[out].value.clone())
    }

    fn eval_node(&self, i: usize, out: &mut [f64]) -> Result<(), DiffError> {
        let n = &self.nodes;
        match &n[i].op {
            Op::Constant | Op::Leaf(_) => {}
            Op::Add(a, b) => {
                let (a, b) = (&n[*a].value, &n[*b].value);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = at(a, j) + at(b, j);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (&n[*a].value, &n[*b].value);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = at(a, j) - at(b, j);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (&n[*a].value, &n[*b].value);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = at(a, j) * at(b, j);
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (&n[*a].value, &n[*b].value);
                for (j, o) in out.iter_mut().enumerate() {
                    let d = at(b, j);
                    if d.abs() < DOMAIN_GUARD {
                        return Err(DiffError::Domain {
                            op: "div",
                            node: i,
                            value: d,
                        });
                    }
                    *o = at(a, j) / d;
                }
            }
            Op::Neg(a) => {
                for (o, x) in out.iter_mut().zip(&n[*a].value) {
                    *o = -x;
                }
            }
            Op::Exp(a) => {
                for (o, x) in out.iter_mut().zip(&n[*a].value) {
                    *o = x.exp();
                }
            }
            Op::Log(a) => {
                for (o, &x) in out.iter_mut().zip(&n[*a].value) {
                    if x < DOMAIN_GUARD {
                        return Err(DiffError::Domain {
                            op: "log",
                            node: i,
                            value: x,
                        });
                    }
                    *o = x.ln();
                }
            }
            Op::Tanh(a) => {
                for (o, x) in out.iter_mut().zip(&n[*a].value) {
                    *o = x.tanh();
                }
            }
            Op::Power(a, p) => {
                let integral = p.fract() == 0.0;
                for (o, &x) in out.iter_mut().zip(&n[*a].value) {
                    if !integral && x < 0.0 || *p < 0.0 && x.abs() < DOMAIN_GUARD {
                        return Err(DiffError::Domain {
                            op: "power",
                            node: i,
                            value: x,
                        });
                    }
                    *o = if integral { x.powi(*p as i32) } else { x.powf(*p) };
                }
            }
            Op::Sum(a) => out[0] = n[*a].value.iter().sum(),
            Op::SoftMin(a, k) => out[0] = soft_min(&n[*a].value, *k).0,
            Op::SoftMax(a, k) => out[0] = soft_max(&n[*a].value, *k).0,
            Op::Index(a, j) => out[0] = n[*a].value[*j],
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let v = &n[*p].value;
                    out[off..off + v.len()].copy_from_slice(v);
                    off += v.len();
                }
            }
            Op::Map(a, f) => {
                for (o, &x) in out.iter_mut().zip(&n[*a].value) {
                    *o = (f.f)(x);
                }
            }
        }
        Ok(())
    }

    /// Reverse sweep from the scalar output. Returns the gradient for every leaf.
    pub fn backward(&mut self) -> Result<HashMap<String, Vec<f64>>, DiffError> {
        self.backward_sweep()?;
        Ok(self
            .leaves
            .iter()
            .map(|(name, idx)| (name.clone(), self.nodes[*idx].adjoint.clone()))
            .collect())
    }

    /// Like [`Tape::backward`] but leaves the adjoints on the tape for
    /// positional access through [`Tape::adjoint`].
    pub fn backward_sweep(&mut self) -> Result<(), DiffError> {
        if !self.evaluated {
            return Err(DiffError::NotEvaluated);
        }
        let out = self.output.ok_or(DiffError::NoOutput)?;
        let out_len = self.nodes[out].len();
        if out_len != 1 {
            return Err(DiffError::NonScalarOutput(out_len));
        }
        for node in &mut self.nodes {
            node.adjoint.iter_mut().for_each(|a| *a = 0.0);
        }
        self.nodes[out].adjoint[0] = 1.0;
        for i in (0..=out).rev() {
            if self.nodes[i].adjoint.iter().all(|a| *a == 0.0) {
                continue;
            }
            let adj = std::mem::take(&mut self.nodes[i].adjoint);
            self.propagate(i, &adj);
            self.nodes[i].adjoint = adj;
        }
        Ok(())
    }

    pub fn adjoint(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].adjoint
    }

    fn accumulate(&mut self, target: usize, j: usize, g: f64) {
        let adj = &mut self.nodes[target].adjoint;
        if adj.len() == 1 {
            adj[0] += g;
        } else {
            adj[j] += g;
        }
    }

    fn propagate(&mut self, i: usize, adj: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Constant | Op::Leaf(_) => {}
            Op::Add(a, b) => {
                for (j, &g) in adj.iter().enumerate() {
                    self.accumulate(a, j, g);
                    self.accumulate(b, j, g);
                }
            }
            Op::Sub(a, b) => {
                for (j, &g) in adj.iter().enumerate() {
                    self.accumulate(a, j, g);
                    self.accumulate(b, j, -g);
                }
            }
            Op::Mul(a, b) => {
                for (j, &g) in adj.iter().enumerate() {
                    let (va, vb) = (at(&self.nodes[a].value, j), at(&self.nodes[b].value, j));
                    self.accumulate(a, j, g * vb);
                    self.accumulate(b, j, g * va);
                }
            }
            Op::Div(a, b) => {
                for (j, &g) in adj.iter().enumerate() {
                    let (va, vb) = (at(&self.nodes[a].value, j), at(&self.nodes[b].value, j));
                    self.accumulate(a, j, g / vb);
                    self.accumulate(b, j, -g * va / (vb * vb));
                }
            }
            Op::Neg(a) => {
                for (j, &g) in adj.iter().enumerate() {
                    self.nodes[a].adjoint[j] -= g;
                }
            }
            Op::Exp(a) => {
                for (j, &g) in adj.iter().enumerate() {
                    let y = self.nodes[i].value[j];
                    self.nodes[a].adjoint[j] += g * y;
                }
            }
            Op::Log(a) => {
                for (j, &g) in adj.iter().enumerate() {
                    let x = self.nodes[a].value[j];
                    self.nodes[a].adjoint[j] += g / x;
                }
            }
            Op::Tanh(a) => {
                for (j, &g) in adj.iter().enumerate() {
                    let y = self.nodes[i].value[j];
                    self.nodes[a].adjoint[j] += g * (1.0 - y * y);
                }
            }
            Op::Power(a, p) => {
                for (j, &g) in adj.iter().enumerate() {
                    let x = self.nodes[a].value[j];
                    let d = if p == 0.0 {
                        0.0
                    } else if p.fract() == 0.0 {
                        p * x.powi(p as i32 - 1)
                    } else {
                        p * x.powf(p - 1.0)
                    };
                    self.nodes[a].adjoint[j] += g * d;
                }
            }
            Op::Sum(a) => {
                for x in self.nodes[a].adjoint.iter_mut() {
                    *x += adj[0];
                }
            }
            Op::SoftMin(a, k) | Op::SoftMax(a, k) => {
                let w = match op {
                    Op::SoftMin(..) => soft_min(&self.nodes[a].value, k).1,
                    _ => soft_max(&self.nodes[a].value, k).1,
                };
                for (x, wj) in self.nodes[a].adjoint.iter_mut().zip(w) {
                    *x += adj[0] * wj;
                }
            }
            Op::Index(a, j) => self.nodes[a].adjoint[j] += adj[0],
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p].len();
                    for (x, g) in self.nodes[p].adjoint.iter_mut().zip(&adj[off..off + len]) {
                        *x += g;
                    }
                    off += len;
                }
            }
            Op::Map(a, f) => {
                for (j, &g) in adj.iter().enumerate() {
                    let x = self.nodes[a].value[j];
                    self.nodes[a].adjoint[j] += g * (f.df)(x);
                }
            }
        }
    }

    /// Topological-order consistency check: every parent index precedes its child.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.parents().iter().all(|&p| p < i))
    }
}

fn check_temperature(k: f64) -> Result<(), DiffError> {
    if k > 0.0 && k.is_finite() {
        Ok(())
    } else {
        Err(DiffError::InvalidParameter(format!(
            "temperature must be positive and finite, got {k}"
        )))
    }
}

/// Compares the analytic gradient against central differences over every
/// leaf component. Returns the largest `|analytic - fd| / max(1, |analytic|)`.
pub fn grad_check(
    tape: &mut Tape,
    leaf_values: &HashMap<String, Vec<f64>>,
    step: f64,
) -> Result<f64, DiffError> {
    if !(step > 0.0) {
        return Err(DiffError::InvalidParameter(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    tape.forward(leaf_values)?;
    let analytic = tape.backward()?;
    let mut values = leaf_values.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = tape.leaves.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let len = values[&name].len();
        for j in 0..len {
            let orig = values[&name][j];
            values.get_mut(&name).unwrap()[j] = orig + step;
            let plus = tape.forward(&values)?[0];
            values.get_mut(&name).unwrap()[j] = orig - step;
            let minus = tape.forward(&values)?[0];
            values.get_mut(&name).unwrap()[j] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let a = analytic[&name][j];
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    // restore cached values at the original point
    tape.forward(leaf_values)?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vals(pairs: &[(&str, Vec<f64>)]) -> HashMap<String, Vec<f64>> {
        pairs.iter().map(|(n, v)| (n.to_string(), v.clone())).collect()
    }

    #[test]
    fn tanh_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf("x", 1).unwrap();
        let y = t.tanh(x);
        t.set_output(y);
        assert_eq!(t.forward(&vals(&[("x", vec![0.0])])).unwrap(), vec![0.0]);
        let g = t.backward().unwrap();
        assert_eq!(g["x"], vec![1.0]);
        assert_eq!(t.adjoint(y), &[1.0]);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.leaf("x", 1).unwrap();
        let y = t.leaf("y", 1).unwrap();
        let p = t.mul(x, y).unwrap();
        t.set_output(p);
        assert_eq!(t.forward(&vals(&[("x", vec![2.0]), ("y", vec![3.0])])).unwrap(), vec![6.0]);
        let g = t.backward().unwrap();
        assert_eq!(g["x"], vec![3.0]);
        assert_eq!(g["y"], vec![2.0]);
    }

    #[test]
    fn soft_min_closed_form_and_bound() {
        let mut t = Tape::new();
        let a = t.leaf("a", 3).unwrap();
        let s = t.soft_min(a, 10.0).unwrap();
        t.set_output(s);
        let v = t.forward(&vals(&[("a", vec![1.0, 2.0, 3.0])])).unwrap()[0];
        let closed = -(1.0 / 10.0) * ((-10.0f64).exp() + (-20.0f64).exp() + (-30.0f64).exp()).ln();
        assert!((v - closed).abs() < 1e-12);
        assert!(v <= 1.0);
        assert!(1.0 - v <= 3f64.ln() / 10.0);
    }

    #[test]
    fn soft_min_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Tape::new();
        let a = t.leaf("a", 5).unwrap();
        let s = t.soft_min(a, 10.0).unwrap();
        t.set_output(s);
        let point: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values = vals(&[("a", point.clone())]);
        t.forward(&values).unwrap();
        let analytic = t.backward().unwrap()["a"].clone();
        let h = 1e-5;
        for j in 0..5 {
            let mut p = point.clone();
            p[j] += h;
            let plus = soft_min(&p, 10.0).0;
            p[j] -= 2.0 * h;
            let minus = soft_min(&p, 10.0).0;
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic[j] - fd).abs() / analytic[j].abs().max(1e-12);
            assert!(rel < 1e-6, "component {j}: {} vs {fd}", analytic[j]);
        }
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf("x", 1).unwrap();
        let y = t.add(x, x).unwrap();
        t.set_output(y);
        t.forward(&vals(&[("x", vec![0.3])])).unwrap();
        assert_eq!(t.backward().unwrap()["x"], vec![2.0]);
    }

    #[test]
    fn linear_grad_check_exact() {
        let mut t = Tape::new();
        let w = t.leaf("w", 4).unwrap();
        let x = t.leaf("x", 4).unwrap();
        let d = t.dot(w, x).unwrap();
        t.set_output(d);
        let v = vals(&[("w", vec![0.5, -1.0, 2.0, 0.1]), ("x", vec![1.0, 3.0, -2.0, 4.0])]);
        assert!(grad_check(&mut t, &v, 1e-6).unwrap() < 1e-9);
    }

    #[test]
    fn constant_tape_grad_check_zero() {
        let mut t = Tape::new();
        let x = t.leaf("x", 2).unwrap();
        let c = t.scalar(4.0);
        let z = t.mul(x, c).unwrap();
        let _ = z;
        t.set_output(c);
        let v = vals(&[("x", vec![1.0, 2.0])]);
        assert_eq!(grad_check(&mut t, &v, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn three_layer_tanh_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let x = t.leaf("x", 3).unwrap();
        let mut layer = x;
        let mut values = vals(&[("x", vec![0.2, -0.4, 0.9])]);
        for l in 0..3 {
            let mut rows = Vec::new();
            for r in 0..3 {
                let name = format!("w{l}{r}");
                let w = t.leaf(&name, 3).unwrap();
                values.insert(name, (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
                rows.push(t.dot(w, layer).unwrap());
            }
            let z = t.concat(&rows).unwrap();
            layer = t.tanh(z);
        }
        let out = t.sum(layer);
        t.set_output(out);
        assert!(grad_check(&mut t, &values, 1e-5).unwrap() < 1e-5);
        assert!(t.is_topologically_ordered());
    }

    #[test]
    fn every_primitive_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        type Build = fn(&mut Tape, Var, Var) -> Var;
        let builders: Vec<(&str, Build)> = vec![
            ("add", |t, a, b| t.add(a, b).unwrap()),
            ("sub", |t, a, b| t.sub(a, b).unwrap()),
            ("mul", |t, a, b| t.mul(a, b).unwrap()),
            ("div", |t, a, b| t.div(a, b).unwrap()),
            ("neg", |t, a, _| t.neg(a)),
            ("exp", |t, a, _| t.exp(a)),
            ("log", |t, _, b| t.log(b)),
            ("tanh", |t, a, _| t.tanh(a)),
            ("pow", |t, _, b| t.powf(b, 2.5)),
            ("sigmoid", |t, a, _| t.sigmoid(a)),
            ("softmin", |t, a, b| {
                let c = t.concat(&[a, b]).unwrap();
                t.soft_min(c, 3.0).unwrap()
            }),
            ("softmax", |t, a, b| {
                let c = t.concat(&[a, b]).unwrap();
                t.soft_max(c, 3.0).unwrap()
            }),
            ("index", |t, a, b| {
                let c = t.concat(&[a, b]).unwrap();
                t.index(c, 1).unwrap()
            }),
        ];
        for (name, build) in builders {
            let mut t = Tape::new();
            let a = t.leaf("a", 1).unwrap();
            let b = t.leaf("b", 1).unwrap();
            let y = build(&mut t, a, b);
            let s = t.sum(y);
            t.set_output(s);
            for _ in 0..100 {
                let v = vals(&[
                    ("a", vec![rng.gen_range(-2.0..2.0)]),
                    ("b", vec![rng.gen_range(0.5..3.0)]),
                ]);
                let err = grad_check(&mut t, &v, 1e-6).unwrap();
                assert!(err < 1e-5, "{name}: {err}");
            }
        }
    }

    #[test]
    fn domain_errors_are_reported() {
        let mut t = Tape::new();
        let x = t.leaf("x", 1).unwrap();
        let y = t.log(x);
        t.set_output(y);
        let err = t.forward(&vals(&[("x", vec![0.0])])).unwrap_err();
        assert!(matches!(err, DiffError::Domain { op: "log", .. }));

        let mut t = Tape::new();
        let x = t.leaf("x", 1).unwrap();
        let one = t.scalar(1.0);
        let y = t.div(one, x).unwrap();
        t.set_output(y);
        assert!(matches!(
            t.forward(&vals(&[("x", vec![1e-13])])),
            Err(DiffError::Domain { op: "div", .. })
        ));
    }

    #[test]
    fn misuse_errors() {
        let mut t = Tape::new();
        let x = t.leaf("x", 2).unwrap();
        t.set_output(x);
        assert_eq!(t.backward().unwrap_err(), DiffError::NotEvaluated);
        assert_eq!(
            t.forward(&HashMap::new()).unwrap_err(),
            DiffError::MissingLeaf("x".into())
        );
        assert!(matches!(
            t.forward(&vals(&[("x", vec![1.0])])),
            Err(DiffError::ShapeMismatch { .. })
        ));
        t.forward(&vals(&[("x", vec![1.0, 2.0])])).unwrap();
        assert_eq!(t.backward().unwrap_err(), DiffError::NonScalarOutput(2));
        let y = t.leaf("y", 3).unwrap();
        assert!(t.add(x, y).is_err());
        assert!(t.soft_min(y, 0.0).is_err());
    }

    #[test]
    fn infinite_operands_act_as_exact_extrema() {
        let (v, w) = soft_max(&[1.0, f64::INFINITY], 10.0);
        assert_eq!(v, f64::INFINITY);
        assert_eq!(w, vec![0.0, 0.0]);
        let (v, w) = soft_min(&[1.0, f64::INFINITY], 10.0);
        assert!((v - 1.0).abs() < 1e-12);
        assert_eq!(w, vec![1.0, 0.0]);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn soft_extrema_bounds(a in proptest::collection::vec(-5.0f64..5.0, 1..12), k in 0.5f64..200.0) {
                let n = a.len() as f64;
                let min = a.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let (smin, _) = soft_min(&a, k);
                let (smax, _) = soft_max(&a, k);
                prop_assert!(smin <= min + 1e-12);
                prop_assert!(min - smin <= n.ln() / k + 1e-12);
                prop_assert!(smax >= max - 1e-12);
                prop_assert!(smax - max <= n.ln() / k + 1e-12);
            }
        }
    }
}
