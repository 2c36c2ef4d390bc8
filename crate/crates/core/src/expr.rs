//! Exact expression DAGs over real variables.
//!
//! Nodes are stored in topological order and hash-consed, so shared
//! subterms (hidden units, derivative factors) appear once. The same DAG is
//! evaluated pointwise in `f64`, over boxes with [`Interval`], and with
//! first-order affine forms by the certifier.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::Interval;

pub const EXPR_FORMAT: &str = "hjcert-expr";
pub const EXPR_VERSION: u32 = 1;

pub type NodeId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Node {
    Const {
        #[serde(with = "crate::real")]
        value: f64,
    },
    Var {
        index: u32,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Neg {
        a: NodeId,
    },
    Sin {
        a: NodeId,
    },
    Cos {
        a: NodeId,
    },
    Sqr {
        a: NodeId,
    },
    Sqrt {
        a: NodeId,
    },
    Abs {
        a: NodeId,
    },
    Min {
        a: NodeId,
        b: NodeId,
    },
    Max {
        a: NodeId,
        b: NodeId,
    },
}

impl Node {
    fn key(&self) -> (u8, u64, u64) {
        match *self {
            Node::Const { value } => (0, value.to_bits(), 0),
            Node::Var { index } => (1, index as u64, 0),
            Node::Add { a, b } => (2, a as u64, b as u64),
            Node::Sub { a, b } => (3, a as u64, b as u64),
            Node::Mul { a, b } => (4, a as u64, b as u64),
            Node::Neg { a } => (5, a as u64, 0),
            Node::Sin { a } => (6, a as u64, 0),
            Node::Cos { a } => (7, a as u64, 0),
            Node::Sqr { a } => (8, a as u64, 0),
            Node::Sqrt { a } => (9, a as u64, 0),
            Node::Abs { a } => (10, a as u64, 0),
            Node::Min { a, b } => (11, a as u64, b as u64),
            Node::Max { a, b } => (12, a as u64, b as u64),
        }
    }

    /// Operand ids, in order.
    pub fn operands(&self) -> impl Iterator<Item = NodeId> {
        let (a, b) = match *self {
            Node::Const { .. } | Node::Var { .. } => (None, None),
            Node::Add { a, b }
            | Node::Sub { a, b }
            | Node::Mul { a, b }
            | Node::Min { a, b }
            | Node::Max { a, b } => (Some(a), Some(b)),
            Node::Neg { a }
            | Node::Sin { a }
            | Node::Cos { a }
            | Node::Sqr { a }
            | Node::Sqrt { a }
            | Node::Abs { a } => (Some(a), None),
        };
        a.into_iter().chain(b)
    }
}

/// Values an expression can be evaluated in.
pub trait Domain: Clone {
    fn constant(v: f64) -> Self;
    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn neg(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn sqr(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn abs(&self) -> Self;
    fn min(&self, o: &Self) -> Self;
    fn max(&self, o: &Self) -> Self;
}

impl Domain for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn neg(&self) -> Self {
        -self
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn sqr(&self) -> Self {
        self * self
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn abs(&self) -> Self {
        f64::abs(*self)
    }
    fn min(&self, o: &Self) -> Self {
        f64::min(*self, *o)
    }
    fn max(&self, o: &Self) -> Self {
        f64::max(*self, *o)
    }
}

impl Domain for Interval {
    fn constant(v: f64) -> Self {
        Interval::point(v)
    }
    fn add(&self, o: &Self) -> Self {
        *self + *o
    }
    fn sub(&self, o: &Self) -> Self {
        *self - *o
    }
    fn mul(&self, o: &Self) -> Self {
        *self * *o
    }
    fn neg(&self) -> Self {
        -*self
    }
    fn sin(&self) -> Self {
        Interval::sin(*self)
    }
    fn cos(&self) -> Self {
        Interval::cos(*self)
    }
    fn sqr(&self) -> Self {
        Interval::sqr(*self)
    }
    fn sqrt(&self) -> Self {
        Interval::sqrt(*self)
    }
    fn abs(&self) -> Self {
        Interval::abs(*self)
    }
    fn min(&self, o: &Self) -> Self {
        Interval::min(*self, *o)
    }
    fn max(&self, o: &Self) -> Self {
        Interval::max(*self, *o)
    }
}

/// An expression DAG with a single output node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExprTree {
    pub format: String,
    pub version: u32,
    pub n_vars: usize,
    pub output: NodeId,
    pub nodes: Vec<Node>,
}

impl ExprTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Checks topological order, operand ranges and variable indices.
    pub fn validate(&self) -> Result<()> {
        if self.format != EXPR_FORMAT {
            return Err(Error::Expr(format!("unexpected format tag {:?}", self.format)));
        }
        if self.version != EXPR_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: EXPR_VERSION,
            });
        }
        if self.output as usize >= self.nodes.len() {
            return Err(Error::Expr("output node out of range".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if let Node::Var { index } = n {
                if *index as usize >= self.n_vars {
                    return Err(Error::Expr(format!("node {i}: variable {index} out of range")));
                }
            }
            if let Node::Const { value } = n {
                if !value.is_finite() {
                    return Err(Error::Expr(format!("node {i}: non-finite constant")));
                }
            }
            if n.operands().any(|o| o as usize >= i) {
                return Err(Error::Expr(format!("node {i} is not topologically ordered")));
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut scratch = Vec::new();
        self.eval_in(x, &mut scratch)
    }

    /// Evaluates in any [`Domain`], reusing `scratch` across calls.
    pub fn eval_in<D: Domain>(&self, vars: &[D], scratch: &mut Vec<D>) -> D {
        self.eval_nodes(vars, scratch);
        scratch[self.output as usize].clone()
    }

    /// Evaluates every node up to the output, leaving values in `scratch`.
    pub fn eval_nodes<D: Domain>(&self, vars: &[D], scratch: &mut Vec<D>) {
        assert_eq!(vars.len(), self.n_vars, "variable count mismatch");
        scratch.clear();
        scratch.reserve(self.nodes.len());
        for node in &self.nodes[..=self.output as usize] {
            let v = {
                let s = &*scratch;
                let g = |id: NodeId| &s[id as usize];
                match *node {
                    Node::Const { value } => D::constant(value),
                    Node::Var { index } => vars[index as usize].clone(),
                    Node::Add { a, b } => g(a).add(g(b)),
                    Node::Sub { a, b } => g(a).sub(g(b)),
                    Node::Mul { a, b } => g(a).mul(g(b)),
                    Node::Neg { a } => g(a).neg(),
                    Node::Sin { a } => g(a).sin(),
                    Node::Cos { a } => g(a).cos(),
                    Node::Sqr { a } => g(a).sqr(),
                    Node::Sqrt { a } => g(a).sqrt(),
                    Node::Abs { a } => g(a).abs(),
                    Node::Min { a, b } => g(a).min(g(b)),
                    Node::Max { a, b } => g(a).max(g(b)),
                }
            };
            scratch.push(v);
        }
    }

    /// Natural interval extension over a box.
    pub fn eval_interval(&self, vars: &[Interval]) -> Interval {
        let mut scratch = Vec::new();
        self.eval_in(vars, &mut scratch)
    }

    /// Count of nodes by operator name, for reports.
    pub fn op_histogram(&self) -> Vec<(&'static str, usize)> {
        let mut counts: Vec<(&'static str, usize)> = Vec::new();
        for n in &self.nodes {
            let name = op_name(n);
            match counts.iter_mut().find(|(k, _)| *k == name) {
                Some((_, c)) => *c += 1,
                None => counts.push((name, 1)),
            }
        }
        counts
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("expression serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let e: ExprTree = serde_json::from_str(text)?;
        e.validate()?;
        Ok(e)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub(crate) fn op_name(n: &Node) -> &'static str {
    match n {
        Node::Const { .. } => "const",
        Node::Var { .. } => "var",
        Node::Add { .. } => "add",
        Node::Sub { .. } => "sub",
        Node::Mul { .. } => "mul",
        Node::Neg { .. } => "neg",
        Node::Sin { .. } => "sin",
        Node::Cos { .. } => "cos",
        Node::Sqr { .. } => "sqr",
        Node::Sqrt { .. } => "sqrt",
        Node::Abs { .. } => "abs",
        Node::Min { .. } => "min",
        Node::Max { .. } => "max",
    }
}

/// Symbolic derivative of a node: structurally zero, one, or a node.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Deriv {
    Zero,
    One,
    Node(NodeId),
}

/// Incremental, hash-consing constructor for [`ExprTree`].
#[derive(Clone, Debug)]
pub struct ExprBuilder {
    n_vars: usize,
    nodes: Vec<Node>,
    interned: HashMap<(u8, u64, u64), NodeId>,
    derivs: HashMap<(NodeId, usize), Deriv>,
}

impl ExprBuilder {
    pub fn new(n_vars: usize) -> Self {
        ExprBuilder {
            n_vars,
            nodes: Vec::new(),
            interned: HashMap::new(),
            derivs: HashMap::new(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Node {
        self.nodes[id as usize]
    }

    fn intern(&mut self, node: Node) -> NodeId {
        let key = node.key();
        if let Some(&id) = self.interned.get(&key) {
            return id;
        }
        let id = self.nodes.len() as NodeId;
        self.nodes.push(node);
        self.interned.insert(key, id);
        id
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        assert!(value.is_finite(), "non-finite constant {value}");
        self.intern(Node::Const { value })
    }

    pub fn var(&mut self, index: usize) -> NodeId {
        assert!(index < self.n_vars, "variable {index} out of range");
        self.intern(Node::Var {
            index: index as u32,
        })
    }

    pub fn vars(&mut self) -> Vec<NodeId> {
        (0..self.n_vars).map(|i| self.var(i)).collect()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.intern(Node::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.intern(Node::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.intern(Node::Mul { a, b })
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.intern(Node::Neg { a })
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.intern(Node::Sin { a })
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.intern(Node::Cos { a })
    }

    pub fn sqr(&mut self, a: NodeId) -> NodeId {
        self.intern(Node::Sqr { a })
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.intern(Node::Sqrt { a })
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.intern(Node::Abs { a })
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.intern(Node::Min { a, b })
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.intern(Node::Max { a, b })
    }

    /// Left-to-right sum `((t0 + t1) + t2) + ...`; zero for an empty slice.
    pub fn sum(&mut self, terms: &[NodeId]) -> NodeId {
        match terms.split_first() {
            None => self.constant(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    /// Scales `a` by a constant, `k * a`.
    pub fn scale(&mut self, k: f64, a: NodeId) -> NodeId {
        let c = self.constant(k);
        self.mul(c, a)
    }

    /// Copies `e` into this builder with its variables replaced by `inputs`.
    pub fn inline(&mut self, e: &ExprTree, inputs: &[NodeId]) -> NodeId {
        assert_eq!(inputs.len(), e.n_vars, "inline arity mismatch");
        let mut map: Vec<NodeId> = Vec::with_capacity(e.nodes.len());
        for node in &e.nodes[..=e.output as usize] {
            let m = |id: NodeId| map[id as usize];
            let id = match *node {
                Node::Const { value } => self.constant(value),
                Node::Var { index } => inputs[index as usize],
                Node::Add { a, b } => self.add(m(a), m(b)),
                Node::Sub { a, b } => self.sub(m(a), m(b)),
                Node::Mul { a, b } => self.mul(m(a), m(b)),
                Node::Neg { a } => self.neg(m(a)),
                Node::Sin { a } => self.sin(m(a)),
                Node::Cos { a } => self.cos(m(a)),
                Node::Sqr { a } => self.sqr(m(a)),
                Node::Sqrt { a } => self.sqrt(m(a)),
                Node::Abs { a } => self.abs(m(a)),
                Node::Min { a, b } => self.min(m(a), m(b)),
                Node::Max { a, b } => self.max(m(a), m(b)),
            };
            map.push(id);
        }
        map[e.output as usize]
    }

    /// Partial derivative of node `of` with respect to variable `var`.
    ///
    /// Fails on nodes without a classical derivative (`sqrt`, `abs`, `min`,
    /// `max`); value networks never contain them.
    pub fn derivative(&mut self, of: NodeId, var: usize) -> Result<NodeId> {
        match self.deriv(of, var)? {
            Deriv::Zero => Ok(self.constant(0.0)),
            Deriv::One => Ok(self.constant(1.0)),
            Deriv::Node(id) => Ok(id),
        }
    }

    fn deriv(&mut self, of: NodeId, var: usize) -> Result<Deriv> {
        // Forward sweep over the dependency cone of `of` so operand
        // derivatives are memoized before they are needed; avoids deep
        // recursion on large DAGs.
        let mut needed = vec![false; of as usize + 1];
        let mut stack = vec![of];
        while let Some(id) = stack.pop() {
            if needed[id as usize] || self.derivs.contains_key(&(id, var)) {
                continue;
            }
            needed[id as usize] = true;
            stack.extend(self.nodes[id as usize].operands());
        }
        for id in 0..=of {
            if needed[id as usize] {
                let d = self.deriv_node(id, var)?;
                self.derivs.insert((id, var), d);
            }
        }
        Ok(self.derivs[&(of, var)])
    }

    fn deriv_node(&mut self, id: NodeId, var: usize) -> Result<Deriv> {
        let d = |s: &Self, x: NodeId| s.derivs[&(x, var)];
        Ok(match self.nodes[id as usize] {
            Node::Const { .. } => Deriv::Zero,
            Node::Var { index } => {
                if index as usize == var {
                    Deriv::One
                } else {
                    Deriv::Zero
                }
            }
            Node::Add { a, b } => {
                let (da, db) = (d(self, a), d(self, b));
                self.d_add(da, db)
            }
            Node::Sub { a, b } => {
                let (da, db) = (d(self, a), d(self, b));
                let ndb = self.d_neg(db);
                self.d_add(da, ndb)
            }
            Node::Mul { a, b } => {
                let (da, db) = (d(self, a), d(self, b));
                let t1 = self.d_times(da, b);
                let t2 = self.d_times(db, a);
                self.d_add(t1, t2)
            }
            Node::Neg { a } => {
                let da = d(self, a);
                self.d_neg(da)
            }
            Node::Sin { a } => {
                let da = d(self, a);
                if da == Deriv::Zero {
                    Deriv::Zero
                } else {
                    let c = self.cos(a);
                    self.d_times(da, c)
                }
            }
            Node::Cos { a } => {
                let da = d(self, a);
                if da == Deriv::Zero {
                    Deriv::Zero
                } else {
                    let s = self.sin(a);
                    let t = self.d_times(da, s);
                    self.d_neg(t)
                }
            }
            Node::Sqr { a } => {
                let da = d(self, a);
                if da == Deriv::Zero {
                    Deriv::Zero
                } else {
                    let two_a = self.scale(2.0, a);
                    self.d_times(da, two_a)
                }
            }
            n @ (Node::Sqrt { .. } | Node::Abs { .. } | Node::Min { .. } | Node::Max { .. }) => {
                let depends = n
                    .operands()
                    .any(|o| self.derivs[&(o, var)] != Deriv::Zero);
                if depends {
                    return Err(Error::Expr(format!(
                        "cannot differentiate `{}` node {id}",
                        op_name(&n)
                    )));
                }
                Deriv::Zero
            }
        })
    }

    fn d_add(&mut self, a: Deriv, b: Deriv) -> Deriv {
        match (a, b) {
            (Deriv::Zero, x) | (x, Deriv::Zero) => x,
            (Deriv::One, Deriv::One) => Deriv::Node(self.constant(2.0)),
            (Deriv::One, Deriv::Node(n)) | (Deriv::Node(n), Deriv::One) => {
                let one = self.constant(1.0);
                Deriv::Node(self.add(n, one))
            }
            (Deriv::Node(x), Deriv::Node(y)) => Deriv::Node(self.add(x, y)),
        }
    }

    fn d_neg(&mut self, a: Deriv) -> Deriv {
        match a {
            Deriv::Zero => Deriv::Zero,
            Deriv::One => Deriv::Node(self.constant(-1.0)),
            Deriv::Node(n) => Deriv::Node(self.neg(n)),
        }
    }

    /// `d * node`, keeping structural zeros and ones.
    fn d_times(&mut self, d: Deriv, node: NodeId) -> Deriv {
        match d {
            Deriv::Zero => Deriv::Zero,
            Deriv::One => Deriv::Node(node),
            Deriv::Node(n) => Deriv::Node(self.mul(node, n)),
        }
    }

    pub fn finish(&self, output: NodeId) -> ExprTree {
        // Drop nodes after the output so serialized trees stay minimal.
        let nodes = self.nodes[..=output as usize].to_vec();
        ExprTree {
            format: EXPR_FORMAT.to_string(),
            version: EXPR_VERSION,
            n_vars: self.n_vars,
            output,
            nodes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_expr() -> (ExprTree, ExprTree, ExprTree) {
        // f = sin(3 x0 + x1) * x0^2 - cos(x1)
        let mut b = ExprBuilder::new(2);
        let x = b.vars();
        let t = b.scale(3.0, x[0]);
        let t = b.add(t, x[1]);
        let s = b.sin(t);
        let q = b.sqr(x[0]);
        let p = b.mul(s, q);
        let c = b.cos(x[1]);
        let f = b.sub(p, c);
        let d0 = b.derivative(f, 0).unwrap();
        let d1 = b.derivative(f, 1).unwrap();
        (b.finish(f), b.finish(d0), b.finish(d1))
    }

    #[test]
    fn symbolic_derivative_matches_closed_form() {
        let (f, d0, d1) = sample_expr();
        for &(a, c) in &[(0.3, -0.7), (1.1, 2.0), (-0.4, 0.05)] {
            let x = [a, c];
            let fv = (3.0 * a + c).sin() * a * a - c.cos();
            let g0 = 3.0 * (3.0 * a + c).cos() * a * a + (3.0 * a + c).sin() * 2.0 * a;
            let g1 = (3.0 * a + c).cos() * a * a + c.sin();
            assert!((f.eval(&x) - fv).abs() < 1e-14);
            assert!((d0.eval(&x) - g0).abs() < 1e-13);
            assert!((d1.eval(&x) - g1).abs() < 1e-13);
        }
    }

    #[test]
    fn hash_consing_shares_subterms() {
        let mut b = ExprBuilder::new(1);
        let x = b.var(0);
        let a = b.sin(x);
        let c = b.sin(x);
        assert_eq!(a, c);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn nondifferentiable_nodes_are_rejected() {
        let mut b = ExprBuilder::new(1);
        let x = b.var(0);
        let a = b.abs(x);
        assert!(b.derivative(a, 0).is_err());
        let k = b.constant(2.0);
        let s = b.sqrt(k);
        assert!(b.derivative(s, 0).is_ok());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let (f, _, _) = sample_expr();
        let back = ExprTree::from_json(&f.to_json()).unwrap();
        assert_eq!(back, f);
        let mut broken = f.clone();
        broken.nodes[0] = Node::Add { a: 3, b: 4 };
        assert!(broken.validate().is_err());
    }

    #[test]
    fn inline_substitutes_variables() {
        let (f, _, _) = sample_expr();
        let mut b = ExprBuilder::new(1);
        let y = b.var(0);
        let two_y = b.scale(2.0, y);
        let out = b.inline(&f, &[two_y, y]);
        let g = b.finish(out);
        let v = 0.37;
        assert_eq!(g.eval(&[v]), f.eval(&[2.0 * v, v]));
    }

    proptest! {
        #[test]
        fn interval_eval_encloses_point_eval(lo0 in -3.0..3.0f64, w0 in 0.0..2.0f64, lo1 in -3.0..3.0f64, w1 in 0.0..2.0f64, s in 0.0..1.0f64, t in 0.0..1.0f64) {
            let (f, d0, d1) = sample_expr();
            let bx = [Interval::new(lo0, lo0 + w0), Interval::new(lo1, lo1 + w1)];
            let x = [lo0 + s * w0, lo1 + t * w1];
            for e in [&f, &d0, &d1] {
                prop_assert!(e.eval_interval(&bx).contains(e.eval(&x)));
            }
        }
    }
}
