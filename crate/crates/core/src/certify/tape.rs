//! Flattened evaluation tape with fused linear combinations.
//!
//! Chains of additions, negations and constant scalings that feed a single
//! consumer are collapsed into one `Lin` instruction `k0 + sum_i k_i v_i`.
//! Coefficients obtained by multiplying constants carry their rounding
//! error, so the tape encloses exactly the real function of the tree.

use std::collections::HashMap;

use crate::expr::{Domain, ExprTree, Node, NodeId};
use crate::interval::Interval;

use super::enclosure::{Affine, Enclosure};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Term {
    pub slot: u32,
    pub k: f64,
    /// Bound on `|exact coefficient - k|`.
    pub err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Var(u32),
    Const(f64),
    Lin { k0: f64, k0_err: f64, start: u32, len: u32 },
    Mul(u32, u32),
    Sin(u32),
    Cos(u32),
    Sqr(u32),
    Sqrt(u32),
    Abs(u32),
    Min(u32, u32),
    Max(u32, u32),
}

#[derive(Clone, Debug)]
pub(crate) struct Tape {
    pub n_vars: usize,
    pub ops: Vec<Op>,
    pub terms: Vec<Term>,
}

/// Values the tape can be evaluated in.
pub(crate) trait TapeDomain: Domain {
    fn lin(k0: f64, k0_err: f64, terms: &[Term], slots: &[Self]) -> Self;
}

#[inline]
fn up(x: f64) -> f64 {
    x.next_up()
}

/// Relative bound for the rounding of an `m`-term dot product, with slack
/// for the rounding of the bound itself.
#[inline]
fn dot_factor(m: usize) -> f64 {
    (m as f64 + 3.0) * f64::EPSILON
}

const TINY: f64 = 8.0 * f64::MIN_POSITIVE;

impl TapeDomain for Interval {
    fn lin(k0: f64, k0_err: f64, terms: &[Term], slots: &[Self]) -> Self {
        let mut lo = k0;
        let mut hi = k0;
        let mut abs_sum = k0.abs();
        let mut coef_err = k0_err;
        for t in terms {
            let v = &slots[t.slot as usize];
            let (a, b) = if t.k >= 0.0 { (v.lo, v.hi) } else { (v.hi, v.lo) };
            lo += t.k * a;
            hi += t.k * b;
            let m = v.mag();
            abs_sum += t.k.abs() * m;
            coef_err += t.err * m;
        }
        let f = dot_factor(terms.len() + 1);
        let err = up(up(f * abs_sum) + up(coef_err * (1.0 + f)) + TINY);
        Interval::try_new((lo - err).next_down(), (hi + err).next_up()).unwrap_or(Interval {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        })
    }
}

impl TapeDomain for Enclosure {
    fn lin(k0: f64, k0_err: f64, terms: &[Term], slots: &[Self]) -> Self {
        let mut lo = k0;
        let mut hi = k0;
        let mut iv_abs = k0.abs();
        let mut iv_coef = k0_err;
        let mut c = k0;
        let mut g = [0.0; super::enclosure::NOISE];
        let mut r = 0.0;
        let mut af_abs = k0.abs();
        let mut af_coef = k0_err;
        for t in terms {
            let v = &slots[t.slot as usize];
            let (a, b) = if t.k >= 0.0 { (v.iv.lo, v.iv.hi) } else { (v.iv.hi, v.iv.lo) };
            lo += t.k * a;
            hi += t.k * b;
            let m = v.iv.mag();
            let ka = t.k.abs();
            iv_abs += ka * m;
            iv_coef += t.err * m;

            c += t.k * v.af.c;
            let mut gs = 0.0;
            for (gj, vj) in g.iter_mut().zip(&v.af.g) {
                *gj += t.k * vj;
                gs += vj.abs();
            }
            r += ka * v.af.r;
            let am = v.af.c.abs() + gs + v.af.r;
            af_abs += ka * am;
            af_coef += t.err * am;
        }
        let f = dot_factor(terms.len() + 1);
        let iv_err = up(up(f * iv_abs) + up(iv_coef * (1.0 + f)) + TINY);
        let iv = Interval::try_new((lo - iv_err).next_down(), (hi + iv_err).next_up());
        // The gradient sums and `c` each carry at most `f * af_abs` error;
        // `NOISE + 1` of them, plus the rounding of `r` itself.
        let nsum = (super::enclosure::NOISE + 1) as f64;
        let af_err = up(up(nsum * f * af_abs) + up(af_coef * (1.0 + f)) + up(r * f) + TINY);
        let af = Affine {
            c,
            g,
            r: up(r + af_err),
        };
        match iv {
            Some(iv) => Enclosure::tighten(iv, af),
            None => Enclosure::tighten(
                Interval {
                    lo: f64::NEG_INFINITY,
                    hi: f64::INFINITY,
                },
                af,
            ),
        }
    }
}

/// `coef * k` with an error bound, given `coef` with error `coef_err`.
fn scale_coef(coef: f64, coef_err: f64, k: f64) -> (f64, f64) {
    let p = coef * k;
    let e = (coef.mul_add(k, -p)).abs().max(if p.abs() < 1e-250 { TINY } else { 0.0 });
    (p, up(up(coef_err * k.abs()) + e))
}

fn linear_parts(node: &Node, nodes: &[Node]) -> Option<Vec<(NodeId, f64)>> {
    let is_const = |id: NodeId| matches!(nodes[id as usize], Node::Const { .. });
    let value = |id: NodeId| match nodes[id as usize] {
        Node::Const { value } => value,
        _ => unreachable!(),
    };
    match *node {
        Node::Add { a, b } => Some(vec![(a, 1.0), (b, 1.0)]),
        Node::Sub { a, b } => Some(vec![(a, 1.0), (b, -1.0)]),
        Node::Neg { a } => Some(vec![(a, -1.0)]),
        Node::Mul { a, b } if is_const(a) => Some(vec![(b, value(a))]),
        Node::Mul { a, b } if is_const(b) => Some(vec![(a, value(b))]),
        _ => None,
    }
}

impl Tape {
    pub fn compile(expr: &ExprTree) -> Tape {
        let nodes = &expr.nodes;
        let out = expr.output as usize;
        let n = out + 1;
        let mut live = vec![false; n];
        live[out] = true;
        let mut uses = vec![0u32; n];
        let mut nonlinear_user = vec![false; n];
        let lin: Vec<Option<Vec<(NodeId, f64)>>> = nodes[..n].iter().map(|nd| linear_parts(nd, nodes)).collect();
        for i in (0..n).rev() {
            if !live[i] {
                continue;
            }
            for o in nodes[i].operands() {
                live[o as usize] = true;
                uses[o as usize] += 1;
                if lin[i].is_none() {
                    nonlinear_user[o as usize] = true;
                }
            }
        }
        // A linear node is inlined into its consumer when it has exactly one
        // use and that use is itself linear.
        let inlined = |i: usize| lin[i].is_some() && i != out && uses[i] == 1 && !nonlinear_user[i];

        let mut slot = vec![u32::MAX; n];
        let mut ops = Vec::new();
        let mut terms = Vec::new();
        for i in 0..n {
            if !live[i] || inlined(i) {
                continue;
            }
            let s = |id: NodeId| {
                let v = slot[id as usize];
                debug_assert_ne!(v, u32::MAX);
                v
            };
            let op = match nodes[i] {
                Node::Const { value } => Op::Const(value),
                Node::Var { index } => Op::Var(index),
                _ if lin[i].is_some() => {
                    let mut k0 = 0.0;
                    let mut k0_err = 0.0;
                    let mut acc: Vec<Term> = Vec::new();
                    let mut index: HashMap<u32, usize> = HashMap::new();
                    let mut stack: Vec<(NodeId, f64, f64)> = lin[i]
                        .as_ref()
                        .unwrap()
                        .iter()
                        .rev()
                        .map(|&(c, k)| (c, k, 0.0))
                        .collect();
                    while let Some((c, k, kerr)) = stack.pop() {
                        let ci = c as usize;
                        if let Node::Const { value } = nodes[ci] {
                            let (p, e) = scale_coef(k, kerr, value);
                            let t = k0 + p;
                            let bb = t - k0;
                            let sum_err = ((k0 - (t - bb)) + (p - bb)).abs();
                            k0 = t;
                            k0_err = up(up(k0_err + e) + sum_err);
                        } else if inlined(ci) {
                            for &(cc, kk) in lin[ci].as_ref().unwrap().iter().rev() {
                                let (p, e) = scale_coef(k, kerr, kk);
                                stack.push((cc, p, e));
                            }
                        } else {
                            let sl = slot[ci];
                            match index.get(&sl) {
                                Some(&j) => {
                                    let t = &mut acc[j];
                                    let s2 = t.k + k;
                                    let bb = s2 - t.k;
                                    let sum_err = ((t.k - (s2 - bb)) + (k - bb)).abs();
                                    t.k = s2;
                                    t.err = up(up(t.err + kerr) + sum_err);
                                }
                                None => {
                                    index.insert(sl, acc.len());
                                    acc.push(Term { slot: sl, k, err: kerr });
                                }
                            }
                        }
                    }
                    let start = terms.len() as u32;
                    let len = acc.len() as u32;
                    terms.extend(acc);
                    Op::Lin { k0, k0_err, start, len }
                }
                Node::Mul { a, b } => Op::Mul(s(a), s(b)),
                Node::Sin { a } => Op::Sin(s(a)),
                Node::Cos { a } => Op::Cos(s(a)),
                Node::Sqr { a } => Op::Sqr(s(a)),
                Node::Sqrt { a } => Op::Sqrt(s(a)),
                Node::Abs { a } => Op::Abs(s(a)),
                Node::Min { a, b } => Op::Min(s(a), s(b)),
                Node::Max { a, b } => Op::Max(s(a), s(b)),
                Node::Add { .. } | Node::Sub { .. } | Node::Neg { .. } => unreachable!(),
            };
            slot[i] = ops.len() as u32;
            ops.push(op);
        }
        Tape {
            n_vars: expr.n_vars,
            ops,
            terms,
        }
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    /// Value of the last instruction.
    pub fn eval<D: TapeDomain>(&self, vars: &[D], scratch: &mut Vec<D>) -> D {
        assert_eq!(vars.len(), self.n_vars, "variable count mismatch");
        scratch.clear();
        scratch.reserve(self.ops.len());
        for op in &self.ops {
            let v = {
                let s = &*scratch;
                let g = |i: u32| &s[i as usize];
                match *op {
                    Op::Var(i) => vars[i as usize].clone(),
                    Op::Const(v) => D::constant(v),
                    Op::Lin { k0, k0_err, start, len } => {
                        D::lin(k0, k0_err, &self.terms[start as usize..(start + len) as usize], s)
                    }
                    Op::Mul(a, b) => g(a).mul(g(b)),
                    Op::Sin(a) => g(a).sin(),
                    Op::Cos(a) => g(a).cos(),
                    Op::Sqr(a) => g(a).sqr(),
                    Op::Sqrt(a) => g(a).sqrt(),
                    Op::Abs(a) => g(a).abs(),
                    Op::Min(a, b) => g(a).min(g(b)),
                    Op::Max(a, b) => g(a).max(g(b)),
                }
            };
            scratch.push(v);
        }
        scratch.pop().expect("tape is nonempty")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::ExperimentConfig;
    use crate::net::NetParams;
    use crate::residuals::stationary_residual_expr;
    use crate::Problem;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fused_tape_encloses_the_tree() {
        let p = Problem::new(ExperimentConfig::preset("double-integrator-paper").unwrap().problem).unwrap();
        let net = NetParams::init(9, &[2, 12, 12, 1], 30.0).unwrap();
        let expr = stationary_residual_expr(&p, &net.export_expr()).unwrap();
        let tape = Tape::compile(&expr);
        assert!(tape.len() * 2 < expr.len(), "{} vs {}", tape.len(), expr.len());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut si = Vec::new();
        let mut se = Vec::new();
        for _ in 0..2000 {
            let w = 10f64.powf(rng.random_range(-6.0..0.0));
            let lo = [rng.random_range(-2.5..2.5 - w), rng.random_range(-2.5..2.5 - w)];
            let b = [Interval::new(lo[0], lo[0] + w), Interval::new(lo[1], lo[1] + w)];
            let x = [rng.random_range(b[0].lo..=b[0].hi), rng.random_range(b[1].lo..=b[1].hi)];
            let v = expr.eval(&x);
            let iv: Interval = tape.eval(&b, &mut si);
            assert!(iv.contains(v), "{v} not in {iv}");
            let vars = [Enclosure::var(b[0], 0), Enclosure::var(b[1], 1)];
            let e = tape.eval(&vars, &mut se);
            assert!(e.iv.contains(v), "{v} not in {}", e.iv);
            let nat = expr.eval_interval(&b);
            assert!(e.iv.width() <= nat.width() * (1.0 + 1e-9) + 1e-12);
        }
    }
}
