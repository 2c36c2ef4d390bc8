//! Pointwise HJB and Bellman residuals, the value-error conversions, and the
//! residual expressions handed to the certifier.
//!
//! Sign convention: the stationary residual is
//! `R = lambda W - h - min_u grad W . f`, and the forward residual is
//! `dW/dtau - (h + min_u grad W . f) + lambda W`, so the two coincide when
//! `W` does not depend on `tau`.

use serde::{Deserialize, Serialize};

use crate::bellman::BellmanOperator;
use crate::config::{ProblemSpec, StateBox};
use crate::dynamics::{running_cost_expr, Problem, MAX_DIM};
use crate::error::{Error, Result};
use crate::expr::{ExprBuilder, ExprTree, Node, NodeId};
use crate::net::NetParams;
use crate::value::{Shifted, ValueFunction};

/// A value function with an input gradient.
pub trait Differentiable: ValueFunction {
    fn gradient(&self, x: &[f64], out: &mut [f64]);
}

impl Differentiable for NetParams {
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.grad_x(x));
    }
}

impl<V: Differentiable + ?Sized> Differentiable for Shifted<'_, V> {
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        self.inner.gradient(x, out);
    }
}

/// A function of time-to-go and state.
pub trait TimeValue: Sync {
    fn value(&self, tau: f64, x: &[f64]) -> f64;
    fn d_tau(&self, tau: f64, x: &[f64]) -> f64;
    fn gradient(&self, tau: f64, x: &[f64], out: &mut [f64]);
}

/// A stationary function seen as constant in `tau`.
pub struct Stationary<'a, V: ?Sized>(pub &'a V);

impl<V: Differentiable + ?Sized> TimeValue for Stationary<'_, V> {
    fn value(&self, _tau: f64, x: &[f64]) -> f64 {
        self.0.value(x)
    }

    fn d_tau(&self, _tau: f64, _x: &[f64]) -> f64 {
        0.0
    }

    fn gradient(&self, _tau: f64, x: &[f64], out: &mut [f64]) {
        self.0.gradient(x, out);
    }
}

/// Stationary residual from a value and gradient already in hand.
pub fn stationary_from_parts(problem: &Problem, x: &[f64], value: f64, grad: &[f64]) -> f64 {
    problem.spec.lambda * value - problem.running_cost(x) - problem.hamiltonian(x, grad).value
}

/// `lambda W(x) - h(x) - min_u grad W(x) . f(x, u)`.
pub fn residual_route_b_stationary<W: Differentiable + ?Sized>(problem: &Problem, w: &W, x: &[f64]) -> f64 {
    let mut g = [0.0; MAX_DIM];
    let n = x.len();
    w.gradient(x, &mut g[..n]);
    stationary_from_parts(problem, x, w.value(x), &g[..n])
}

/// `dW/dtau - h - min_u grad W . f + lambda W` at `(tau, x)`.
pub fn residual_route_b_forward<W: TimeValue + ?Sized>(problem: &Problem, w: &W, tau: f64, x: &[f64]) -> f64 {
    let mut g = [0.0; MAX_DIM];
    let n = x.len();
    w.gradient(tau, x, &mut g[..n]);
    let ham = problem.hamiltonian(x, &g[..n]).value;
    problem.spec.lambda * w.value(tau, x) - problem.running_cost(x) - ham + w.d_tau(tau, x)
}

/// Signed one-step defect `(T W)(x) - W(x)`, defined on the shrunk region.
pub fn bellman_defect<W: ValueFunction + ?Sized>(problem: &Problem, w: &W, x: &[f64]) -> Result<f64> {
    let inner = problem.invariance_margin()?;
    if x.len() != inner.dim() || !inner.contains(x) {
        return Err(Error::Domain { point: x.to_vec() });
    }
    let op = BellmanOperator::new(problem);
    Ok(op.apply(w, x).value - w.value(x))
}

/// `|(T W)(x) - W(x)|`.
pub fn residual_route_a<W: ValueFunction + ?Sized>(problem: &Problem, w: &W, x: &[f64]) -> Result<f64> {
    bellman_defect(problem, w, x).map(f64::abs)
}

/// Value error implied by a one-step defect bound: `varsigma / (1 - gamma)`.
pub fn eps_val_from_operator(varsigma: f64, spec: &ProblemSpec) -> Result<f64> {
    if !(varsigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("varsigma must be nonnegative, got {varsigma}")));
    }
    Ok(varsigma / (1.0 - spec.gamma()))
}

/// Value error implied by PDE slack: `max(eps_pde / lambda, eps_0)`.
pub fn eps_val_from_slack(eps_pde: f64, eps_0: f64, lambda: f64) -> Result<f64> {
    if !(eps_pde >= 0.0 && eps_0 >= 0.0) {
        return Err(Error::InvalidArgument("slack bounds must be nonnegative".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    Ok((eps_pde / lambda).max(eps_0))
}

/// Largest `|R(W + eps)(x) - R(W)(x) - lambda eps|` over the samples.
pub fn offset_identity_check<W: Differentiable + ?Sized>(
    problem: &Problem,
    w: &W,
    eps: f64,
    samples: &[Vec<f64>],
) -> f64 {
    let shifted = Shifted { inner: w, offset: eps };
    let lambda = problem.spec.lambda;
    samples
        .iter()
        .map(|x| {
            let r0 = residual_route_b_stationary(problem, w, x);
            let r1 = residual_route_b_stationary(problem, &shifted, x);
            (r1 - r0 - lambda * eps).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Operator,
    Pde,
}

/// A certified residual bound and the domain it holds on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBound {
    pub kind: BoundKind,
    #[serde(default, with = "crate::real::option", skip_serializing_if = "Option::is_none")]
    pub varsigma: Option<f64>,
    #[serde(default, with = "crate::real::option", skip_serializing_if = "Option::is_none")]
    pub eps_pde: Option<f64>,
    #[serde(with = "crate::real")]
    pub eps_0: f64,
    pub domain: StateBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_range: Option<[f64; 2]>,
}

impl ResidualBound {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            BoundKind::Operator => matches!(self.varsigma, Some(v) if v >= 0.0) && self.eps_pde.is_none(),
            BoundKind::Pde => matches!(self.eps_pde, Some(v) if v >= 0.0) && self.varsigma.is_none(),
        };
        if !ok || !(self.eps_0 >= 0.0) {
            return Err(Error::Certificate("residual bound fields do not match its kind".into()));
        }
        Ok(())
    }

    pub fn eps_val(&self, spec: &ProblemSpec) -> Result<f64> {
        self.validate()?;
        match self.kind {
            BoundKind::Operator => eps_val_from_operator(self.varsigma.unwrap(), spec),
            BoundKind::Pde => eps_val_from_slack(self.eps_pde.unwrap(), self.eps_0, spec.lambda),
        }
    }
}

fn is_zero(b: &ExprBuilder, id: NodeId) -> bool {
    matches!(b.node(id), Node::Const { value } if value == 0.0)
}

fn is_one(b: &ExprBuilder, id: NodeId) -> bool {
    matches!(b.node(id), Node::Const { value } if value == 1.0)
}

/// `a * b`, skipping structural ones; `None` for structural zeros.
fn product(b: &mut ExprBuilder, x: NodeId, y: NodeId) -> Option<NodeId> {
    if is_zero(b, x) || is_zero(b, y) {
        None
    } else if is_one(b, x) {
        Some(y)
    } else if is_one(b, y) {
        Some(x)
    } else {
        Some(b.mul(x, y))
    }
}

/// `min_u p . f(x, u)` over the control box: `p . f0 + sum_j min(q_j lo_j, q_j hi_j)`
/// with `q = G^T p`. Kept as explicit binary `min` nodes.
pub fn hamiltonian_expr(b: &mut ExprBuilder, problem: &Problem, x: &[NodeId], p: &[NodeId]) -> NodeId {
    let n = problem.state_dim();
    let m = problem.system.control_dim();
    let f0 = problem.system.drift_expr(b, x);
    let g = problem.system.control_matrix_expr(b, x);
    let mut terms: Vec<NodeId> = (0..n).filter_map(|i| product(b, p[i], f0[i])).collect();
    for j in 0..m {
        let parts: Vec<NodeId> = (0..n).filter_map(|i| product(b, p[i], g[i * m + j])).collect();
        if parts.is_empty() {
            continue;
        }
        let q = b.sum(&parts);
        let lo = b.scale(problem.spec.control.lo[j], q);
        let hi = b.scale(problem.spec.control.hi[j], q);
        terms.push(b.min(lo, hi));
    }
    if terms.is_empty() {
        b.constant(0.0)
    } else {
        b.sum(&terms)
    }
}

/// Stationary PDE residual of `value` (an expression of the state) as an
/// expression; gradients come from symbolic differentiation.
pub fn stationary_residual_expr(problem: &Problem, value: &ExprTree) -> Result<ExprTree> {
    let n = problem.state_dim();
    if value.n_vars != n {
        return Err(Error::Expr(format!("value has {} inputs, expected {n}", value.n_vars)));
    }
    let mut b = ExprBuilder::new(n);
    let x = b.vars();
    let w = b.inline(value, &x);
    let grad = (0..n).map(|i| b.derivative(w, i)).collect::<Result<Vec<_>>>()?;
    let ham = hamiltonian_expr(&mut b, problem, &x, &grad);
    let h = running_cost_expr(&mut b, &x, &problem.spec.cost);
    let lw = b.scale(problem.spec.lambda, w);
    let r = b.sub(lw, h);
    let r = b.sub(r, ham);
    Ok(b.finish(r))
}

/// Forward PDE residual of a time-state expression with `tau` as the last
/// variable.
pub fn forward_residual_expr(problem: &Problem, value: &ExprTree) -> Result<ExprTree> {
    let n = problem.state_dim();
    if value.n_vars != n + 1 {
        return Err(Error::Expr(format!(
            "time-state value has {} inputs, expected {}",
            value.n_vars,
            n + 1
        )));
    }
    let mut b = ExprBuilder::new(n + 1);
    let vars = b.vars();
    let x = &vars[..n];
    let w = b.inline(value, &vars);
    let grad = (0..n).map(|i| b.derivative(w, i)).collect::<Result<Vec<_>>>()?;
    let wt = b.derivative(w, n)?;
    let ham = hamiltonian_expr(&mut b, problem, x, &grad);
    let h = running_cost_expr(&mut b, x, &problem.spec.cost);
    let h_tilde = b.add(h, ham);
    let r = b.sub(wt, h_tilde);
    let lw = b.scale(problem.spec.lambda, w);
    let r = b.add(r, lw);
    Ok(b.finish(r))
}

/// The `tau = 0` slice of a time-state expression, as a state expression.
pub fn initial_slice_expr(value: &ExprTree) -> Result<ExprTree> {
    if value.n_vars < 2 {
        return Err(Error::Expr("time-state value needs at least two inputs".into()));
    }
    let n = value.n_vars - 1;
    let mut b = ExprBuilder::new(n);
    let mut inputs = b.vars();
    inputs.push(b.constant(0.0));
    let w = b.inline(value, &inputs);
    Ok(b.finish(w))
}

/// Signed one-step defect `min_u { c(x,u) + gamma W(y_u) } - W(x)` as an
/// expression: exact flows and the Simpson cost quadrature are inlined.
pub fn bellman_defect_expr(problem: &Problem, value: &ExprTree) -> Result<ExprTree> {
    let n = problem.state_dim();
    if value.n_vars != n {
        return Err(Error::Expr(format!("value has {} inputs, expected {n}", value.n_vars)));
    }
    let sigma = problem.spec.sigma;
    let gamma = problem.gamma();
    let mut b = ExprBuilder::new(n);
    let x = b.vars();
    let mut candidates = Vec::new();
    for u in problem.step_controls() {
        let mut cost_terms = Vec::new();
        for &(r, weight) in problem.simpson_nodes() {
            let y = problem.system.flow_expr(&mut b, &x, u, r).ok_or_else(|| {
                Error::Expr(format!(
                    "system `{}` has no exact flow; the one-step defect needs one",
                    problem.system.name()
                ))
            })?;
            let h = running_cost_expr(&mut b, &y, &problem.spec.cost);
            cost_terms.push(b.scale(weight, h));
        }
        let cost = b.sum(&cost_terms);
        let y = problem
            .system
            .flow_expr(&mut b, &x, u, sigma)
            .expect("checked above");
        let wy = b.inline(value, &y);
        let cont = b.scale(gamma, wy);
        candidates.push(b.add(cost, cont));
    }
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        best = b.min(best, c);
    }
    let w = b.inline(value, &x);
    let d = b.sub(best, w);
    Ok(b.finish(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::ExperimentConfig;
    use crate::grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn di_problem() -> Problem {
        Problem::new(ExperimentConfig::preset("double-integrator-paper").unwrap().problem).unwrap()
    }

    struct Const(f64);
    impl ValueFunction for Const {
        fn value(&self, _x: &[f64]) -> f64 {
            self.0
        }
    }
    impl Differentiable for Const {
        fn gradient(&self, _x: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    /// `W(tau, x) = a tau^2 + b tau x1 + c x2`.
    struct Poly(f64, f64, f64);
    impl TimeValue for Poly {
        fn value(&self, t: f64, x: &[f64]) -> f64 {
            self.0 * t * t + self.1 * t * x[0] + self.2 * x[1]
        }
        fn d_tau(&self, t: f64, x: &[f64]) -> f64 {
            2.0 * self.0 * t + self.1 * x[0]
        }
        fn gradient(&self, t: f64, _x: &[f64], out: &mut [f64]) {
            out[0] = self.1 * t;
            out[1] = self.2;
        }
    }

    #[test]
    fn stationary_residual_examples() {
        let p = di_problem();
        assert_eq!(residual_route_b_stationary(&p, &Const(0.0), &[2.0, 1.0]), 0.0);
        assert_eq!(residual_route_b_stationary(&p, &Const(0.3), &[2.0, 1.0]), 0.3);
        assert_eq!(residual_route_b_stationary(&p, &Const(0.0), &[0.0, 0.0]), 0.5);
    }

    #[test]
    fn forward_residual_specializes_to_stationary() {
        let p = di_problem();
        let net = NetParams::init(3, &[2, 16, 16, 1], 30.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let x = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
            let a = residual_route_b_stationary(&p, &net, &x);
            let b = residual_route_b_forward(&p, &Stationary(&net), 1.0, &x);
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let eps = 0.1;
        struct Flat(f64);
        impl TimeValue for Flat {
            fn value(&self, _t: f64, _x: &[f64]) -> f64 {
                self.0
            }
            fn d_tau(&self, _t: f64, _x: &[f64]) -> f64 {
                0.0
            }
            fn gradient(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
                out.fill(0.0);
            }
        }
        assert!((residual_route_b_forward(&p, &Flat(eps), 0.5, &[1.5, -2.0]) - p.spec.lambda * eps).abs() < 1e-15);
    }

    #[test]
    fn forward_tau_derivative_matches_finite_differences() {
        let p = di_problem();
        let w = Poly(0.7, -0.3, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let t = rng.random_range(0.1..5.0);
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let h = 1e-5;
            let fd = (w.value(t + h, &x) - w.value(t - h, &x)) / (2.0 * h);
            let mut g = [0.0; 2];
            w.gradient(t, &x, &mut g);
            let with_fd = fd - p.running_cost(&x) - p.hamiltonian(&x, &g).value + p.spec.lambda * w.value(t, &x);
            assert!((residual_route_b_forward(&p, &w, t, &x) - with_fd).abs() <= 1e-6);
        }
    }

    #[test]
    fn route_a_examples() {
        let p = di_problem();
        let zero = |_: &[f64]| 0.0;
        let r = residual_route_a(&p, &zero, &[0.0, 0.0]).unwrap();
        assert!((r - 0.5 * (1.0 - p.gamma())).abs() < 1e-12);
        assert!((r - 0.0243853).abs() < 1e-7);
        let c = 0.8;
        let konst = move |_: &[f64]| c;
        let r = residual_route_a(&p, &konst, &[2.0, 2.0]).unwrap();
        assert!((r - (1.0 - p.gamma()) * c).abs() < 1e-15);
        assert!(matches!(residual_route_a(&p, &zero, &[2.45, 0.0]), Err(Error::Domain { .. })));
    }

    #[test]
    fn route_a_of_grid_fixed_point_shrinks_with_tolerance() {
        let p = di_problem();
        let mut sups = Vec::new();
        for tol in [1e-3, 1e-4, 1e-5] {
            let g = grid::solve_stationary(&p, &[51, 51], tol).unwrap();
            let mut sup: f64 = 0.0;
            for i in 0..g.len() {
                let x = g.node(i);
                if let Ok(r) = residual_route_a(&p, &g, &x) {
                    sup = sup.max(r);
                }
            }
            assert!(sup <= tol, "tol {tol}: residual {sup}");
            sups.push(sup);
        }
        assert!(sups[2] < sups[1] && sups[1] < sups[0], "{sups:?}");
    }

    #[test]
    fn eps_val_formulas() {
        let spec = di_problem().spec;
        let gamma = spec.gamma();
        assert_eq!(eps_val_from_operator(1.0 - gamma, &spec).unwrap(), 1.0);
        assert_eq!(eps_val_from_operator(0.0, &spec).unwrap(), 0.0);
        assert!((eps_val_from_operator(0.005, &spec).unwrap() - 0.1025218).abs() < 1e-6);
        assert_eq!(eps_val_from_slack(0.1, 0.0, 1.0).unwrap(), 0.1);
        assert_eq!(eps_val_from_slack(0.1, 0.08, 2.0).unwrap(), 0.08);
        assert_eq!(eps_val_from_slack(0.0, 0.0, 3.0).unwrap(), 0.0);
        assert!(eps_val_from_slack(0.1, 0.0, 0.0).is_err());
        assert!(eps_val_from_operator(-1.0, &spec).is_err());
    }

    #[test]
    fn offset_identity_examples() {
        let mut spec = di_problem().spec;
        let net = NetParams::init(1, &[2, 40, 40, 1], 30.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<Vec<f64>> = (0..500)
            .map(|_| vec![rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)])
            .collect();
        let p = Problem::new(spec.clone()).unwrap();
        assert!(offset_identity_check(&p, &net, 0.1, &samples) <= 1e-12);

        spec.lambda = 2.0;
        spec.gamma = None;
        let p2 = Problem::new(spec).unwrap();
        // Zero up to the rounding of the subtraction itself.
        assert!(offset_identity_check(&p2, &Const(0.0), 0.37, &samples) <= 2.0 * f64::EPSILON);
        let shifted = Shifted { inner: &Const(0.0), offset: 0.37 };
        assert!((residual_route_b_stationary(&p2, &shifted, &[2.0, 2.0]) - 0.74).abs() < 1e-15);
    }

    #[test]
    fn stationary_expression_matches_pointwise_residual() {
        let p = di_problem();
        let net = NetParams::init(8, &[2, 12, 12, 1], 30.0).unwrap();
        let e = stationary_residual_expr(&p, &net.export_expr()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let x = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
            let a = e.eval(&x);
            let b = residual_route_b_stationary(&p, &net, &x);
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn defect_expression_matches_pointwise_defect() {
        let p = di_problem();
        let net = NetParams::init(2, &[2, 10, 1], 5.0).unwrap();
        let e = bellman_defect_expr(&p, &net.export_expr()).unwrap();
        let inner = p.invariance_margin().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let x = [
                rng.random_range(inner.lo[0]..inner.hi[0]),
                rng.random_range(inner.lo[1]..inner.hi[1]),
            ];
            let a = e.eval(&x);
            let b = bellman_defect(&p, &net, &x).unwrap();
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_expression_of_a_shift() {
        let p = di_problem();
        let mut b = ExprBuilder::new(3);
        let c = b.constant(0.25);
        let e = b.finish(c);
        let r = forward_residual_expr(&p, &e).unwrap();
        assert!((r.eval(&[2.0, 2.0, 1.0]) - 0.25).abs() < 1e-15);
        let s = initial_slice_expr(&e).unwrap();
        assert_eq!(s.eval(&[0.0, 0.0]), 0.25);
    }

    #[test]
    fn residual_bound_validation() {
        let spec = di_problem().spec;
        let rb = ResidualBound {
            kind: BoundKind::Pde,
            varsigma: None,
            eps_pde: Some(0.1),
            eps_0: 0.0,
            domain: spec.roi.clone(),
            tau_range: None,
        };
        assert_eq!(rb.eps_val(&spec).unwrap(), 0.1);
        let mut bad = rb.clone();
        bad.varsigma = Some(0.1);
        assert!(bad.validate().is_err());
    }
}
