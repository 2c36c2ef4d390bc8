//! Control-affine systems, the goal-band running cost, the endpoint
//! Hamiltonian and the one-step discounted cost.

use std::fmt;
use std::sync::Arc;

use crate::config::{ControlBox, CostSpec, ProblemSpec, StateBox};
use crate::error::{Error, Result};
use crate::expr::{ExprBuilder, NodeId};

/// Largest state dimension supported by the solvers.
pub const MAX_DIM: usize = 3;

/// Subintervals of the composite Simpson rule used for the one-step cost.
pub const SIMPSON_INTERVALS: usize = 8;

/// A control-affine system `x' = f0(x) + G(x) u`.
pub trait System: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// Drift `f0(x)`.
    fn drift(&self, x: &[f64], out: &mut [f64]);

    /// Control matrix `G(x)`, row-major `state_dim x control_dim`.
    fn control_matrix(&self, x: &[f64], out: &mut [f64]);

    fn vector_field(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        let m = self.control_dim();
        let mut g = [0.0; MAX_DIM * MAX_DIM];
        self.drift(x, out);
        self.control_matrix(x, &mut g[..n * m]);
        for i in 0..n {
            for j in 0..m {
                out[i] += g[i * m + j] * u[j];
            }
        }
    }

    /// Exact constant-control flow, when the system has one.
    fn exact_flow(&self, _x: &[f64], _u: &[f64], _dt: f64, _out: &mut [f64]) -> bool {
        false
    }

    /// Constant-control flow: exact when available, otherwise one Heun step.
    fn flow(&self, x: &[f64], u: &[f64], dt: f64, out: &mut [f64]) {
        if !self.exact_flow(x, u, dt, out) {
            heun_step(self, x, u, dt, out);
        }
    }

    /// Per-dimension displacement bound over one step of length `dt` from
    /// any state of `roi` under any admissible constant control.
    fn invariance_margins(&self, roi: &StateBox, control: &ControlBox, dt: f64) -> Vec<f64>;

    /// Bound `M_f` on `|f(x, u)|` over `roi x U`.
    fn growth_bound(&self, roi: &StateBox, control: &ControlBox) -> f64;

    /// Drift as expressions of the state nodes.
    fn drift_expr(&self, b: &mut ExprBuilder, x: &[NodeId]) -> Vec<NodeId>;

    /// Control matrix as expressions, row-major like [`System::control_matrix`].
    fn control_matrix_expr(&self, b: &mut ExprBuilder, x: &[NodeId]) -> Vec<NodeId>;

    /// Exact constant-control flow as expressions, if available.
    fn flow_expr(&self, b: &mut ExprBuilder, x: &[NodeId], u: &[f64], dt: f64)
        -> Option<Vec<NodeId>>;
}

/// Second-order (Heun) step of the vector field under constant control.
pub fn heun_step<S: System + ?Sized>(sys: &S, x: &[f64], u: &[f64], dt: f64, out: &mut [f64]) {
    let n = sys.state_dim();
    let mut k1 = [0.0; MAX_DIM];
    let mut k2 = [0.0; MAX_DIM];
    let mut mid = [0.0; MAX_DIM];
    sys.vector_field(x, u, &mut k1[..n]);
    for i in 0..n {
        mid[i] = x[i] + dt * k1[i];
    }
    sys.vector_field(&mid[..n], u, &mut k2[..n]);
    for i in 0..n {
        out[i] = x[i] + 0.5 * dt * (k1[i] + k2[i]);
    }
}

/// `x1' = x2, x2' = u`.
#[derive(Debug, Clone, Copy, Default)]
pub struct DoubleIntegrator;

impl System for DoubleIntegrator {
    fn name(&self) -> &'static str {
        "double_integrator"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = 0.0;
    }

    fn control_matrix(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 1.0;
    }

    fn exact_flow(&self, x: &[f64], u: &[f64], dt: f64, out: &mut [f64]) -> bool {
        let u = u[0];
        out[0] = x[0] + x[1] * dt + 0.5 * u * dt * dt;
        out[1] = x[1] + u * dt;
        true
    }

    fn invariance_margins(&self, roi: &StateBox, control: &ControlBox, dt: f64) -> Vec<f64> {
        let vmax = roi.lo[1].abs().max(roi.hi[1].abs());
        let umax = control.max_abs(0);
        vec![vmax * dt + 0.5 * dt * dt * umax, dt * umax]
    }

    fn growth_bound(&self, roi: &StateBox, control: &ControlBox) -> f64 {
        let vmax = roi.lo[1].abs().max(roi.hi[1].abs());
        vmax.hypot(control.max_abs(0))
    }

    fn drift_expr(&self, b: &mut ExprBuilder, x: &[NodeId]) -> Vec<NodeId> {
        vec![x[1], b.constant(0.0)]
    }

    fn control_matrix_expr(&self, b: &mut ExprBuilder, _x: &[NodeId]) -> Vec<NodeId> {
        vec![b.constant(0.0), b.constant(1.0)]
    }

    fn flow_expr(
        &self,
        b: &mut ExprBuilder,
        x: &[NodeId],
        u: &[f64],
        dt: f64,
    ) -> Option<Vec<NodeId>> {
        // Same operation order as `exact_flow`.
        let u = u[0];
        let v_dt = b.scale(dt, x[1]);
        let p = b.add(x[0], v_dt);
        let acc = b.constant(0.5 * u * dt * dt);
        let p = b.add(p, acc);
        let du = b.constant(u * dt);
        let v = b.add(x[1], du);
        Some(vec![p, v])
    }
}

/// `x' = u`, a one-dimensional system for small tests.
#[derive(Debug, Clone, Copy, Default)]
pub struct SingleIntegrator;

impl System for SingleIntegrator {
    fn name(&self) -> &'static str {
        "single_integrator"
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn drift(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn control_matrix(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }

    fn exact_flow(&self, x: &[f64], u: &[f64], dt: f64, out: &mut [f64]) -> bool {
        out[0] = x[0] + u[0] * dt;
        true
    }

    fn invariance_margins(&self, _roi: &StateBox, control: &ControlBox, dt: f64) -> Vec<f64> {
        vec![dt * control.max_abs(0)]
    }

    fn growth_bound(&self, _roi: &StateBox, control: &ControlBox) -> f64 {
        control.max_abs(0)
    }

    fn drift_expr(&self, b: &mut ExprBuilder, _x: &[NodeId]) -> Vec<NodeId> {
        vec![b.constant(0.0)]
    }

    fn control_matrix_expr(&self, b: &mut ExprBuilder, _x: &[NodeId]) -> Vec<NodeId> {
        vec![b.constant(1.0)]
    }

    fn flow_expr(
        &self,
        b: &mut ExprBuilder,
        x: &[NodeId],
        u: &[f64],
        dt: f64,
    ) -> Option<Vec<NodeId>> {
        let du = b.constant(u[0] * dt);
        Some(vec![b.add(x[0], du)])
    }
}

/// Looks up a built-in system by its registry name.
pub fn system_by_name(name: &str) -> Result<Arc<dyn System>> {
    match name {
        "double_integrator" => Ok(Arc::new(DoubleIntegrator)),
        "single_integrator" => Ok(Arc::new(SingleIntegrator)),
        other => Err(Error::UnknownSystem(other.to_string())),
    }
}

/// Goal-band cost: `-alpha (r_g - |x|)` for `|x| <= r_g`, else 0.
///
/// `|x|` is the Euclidean norm of the whole state. Computed as
/// `min(0, alpha (|x| - r_g))`, the same operations the residual
/// expressions use.
pub fn running_cost(x: &[f64], cost: &CostSpec) -> f64 {
    let sq = x.iter().fold(None, |acc: Option<f64>, v| {
        Some(match acc {
            None => v * v,
            Some(s) => s + v * v,
        })
    });
    let norm = sq.unwrap_or(0.0).sqrt();
    (cost.alpha * (norm - cost.r_g)).min(0.0)
}

/// Running cost as an expression of the state nodes.
pub fn running_cost_expr(b: &mut ExprBuilder, x: &[NodeId], cost: &CostSpec) -> NodeId {
    let squares: Vec<NodeId> = x.iter().map(|&v| b.sqr(v)).collect();
    let sq = b.sum(&squares);
    let norm = b.sqrt(sq);
    let r = b.constant(cost.r_g);
    let d = b.sub(norm, r);
    let scaled = b.scale(cost.alpha, d);
    let zero = b.constant(0.0);
    b.min(scaled, zero)
}

/// Endpoint minimum of `p . f(x, u)` over the control box.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianEval {
    pub value: f64,
    pub u_star: Vec<f64>,
}

/// A system bound to a problem specification.
#[derive(Clone, Debug)]
pub struct Problem {
    pub spec: ProblemSpec,
    pub system: Arc<dyn System>,
    controls: Vec<Vec<f64>>,
    simpson: Vec<(f64, f64)>,
}

impl Problem {
    pub fn new(spec: ProblemSpec) -> Result<Self> {
        spec.validate()?;
        let system = system_by_name(&spec.system)?;
        if system.state_dim() != spec.state_dim() {
            return Err(Error::InvalidSpec(format!(
                "system `{}` has {} states but the region of interest has {}",
                system.name(),
                system.state_dim(),
                spec.state_dim()
            )));
        }
        if system.state_dim() > MAX_DIM {
            return Err(Error::InvalidSpec(format!(
                "state dimension above {MAX_DIM} is not supported"
            )));
        }
        if system.control_dim() != spec.control.dim() {
            return Err(Error::InvalidSpec(format!(
                "system `{}` has {} inputs but the control box has {}",
                system.name(),
                system.control_dim(),
                spec.control.dim()
            )));
        }
        let mut controls = spec.control.corners();
        let center: Vec<f64> = spec
            .control
            .lo
            .iter()
            .zip(&spec.control.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect();
        if !controls.contains(&center) {
            controls.push(center);
        }
        let simpson = simpson_nodes(spec.lambda, spec.sigma);
        Ok(Problem {
            spec,
            system,
            controls,
            simpson,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    pub fn gamma(&self) -> f64 {
        self.spec.gamma()
    }

    /// Constant controls searched by every one-step minimization: the
    /// corners of the control box, then its center.
    pub fn step_controls(&self) -> &[Vec<f64>] {
        &self.controls
    }

    pub fn flow_step(&self, x: &[f64], u: &[f64], dt: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim()];
        self.system.flow(x, u, dt, &mut out);
        out
    }

    pub fn running_cost(&self, x: &[f64]) -> f64 {
        running_cost(x, &self.spec.cost)
    }

    /// `min_u p . f(x, u)` over the control box, attained at a corner.
    /// Ties (zero switching coefficient) select the lower bound.
    pub fn hamiltonian(&self, x: &[f64], p: &[f64]) -> HamiltonianEval {
        let n = self.state_dim();
        let m = self.system.control_dim();
        let mut f0 = [0.0; MAX_DIM];
        let mut g = [0.0; MAX_DIM * MAX_DIM];
        self.system.drift(x, &mut f0[..n]);
        self.system.control_matrix(x, &mut g[..n * m]);
        let mut value = dot(p, &f0[..n]);
        let mut u_star = Vec::with_capacity(m);
        for j in 0..m {
            let q = (0..n).fold(0.0, |acc, i| acc + p[i] * g[i * m + j]);
            let lo = q * self.spec.control.lo[j];
            let hi = q * self.spec.control.hi[j];
            value += lo.min(hi);
            u_star.push(if q > 0.0 {
                self.spec.control.lo[j]
            } else if q < 0.0 {
                self.spec.control.hi[j]
            } else {
                self.spec.control.lo[j]
            });
        }
        HamiltonianEval { value, u_star }
    }

    /// `int_0^sigma exp(-lambda r) h(y(r)) dr` along the constant-control
    /// trajectory, by composite Simpson on the flow.
    pub fn one_step_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        let n = self.state_dim();
        let mut y = [0.0; MAX_DIM];
        let mut acc = 0.0;
        for &(r, w) in &self.simpson {
            self.system.flow(x, u, r, &mut y[..n]);
            acc += w * running_cost(&y[..n], &self.spec.cost);
        }
        acc
    }

    /// Region from which every one-step trajectory stays in the ROI.
    pub fn invariance_margin(&self) -> Result<StateBox> {
        shrink_roi(self.system.as_ref(), &self.spec.roi, &self.spec.control, self.spec.sigma)
    }

    /// Simpson nodes `(r_i, w_i exp(-lambda r_i))` over `[0, sigma]`.
    pub fn simpson_nodes(&self) -> &[(f64, f64)] {
        &self.simpson
    }
}

/// Shrinks `roi` by the system's one-step displacement bound.
pub fn shrink_roi(
    system: &dyn System,
    roi: &StateBox,
    control: &ControlBox,
    dt: f64,
) -> Result<StateBox> {
    let margins = system.invariance_margins(roi, control, dt);
    let mut lo = roi.lo.clone();
    let mut hi = roi.hi.clone();
    for (i, m) in margins.iter().enumerate() {
        lo[i] += m;
        hi[i] -= m;
        if lo[i] > hi[i] {
            return Err(Error::InfeasibleInvariance { dim: i });
        }
    }
    Ok(StateBox { lo, hi })
}

fn simpson_nodes(lambda: f64, sigma: f64) -> Vec<(f64, f64)> {
    let k = SIMPSON_INTERVALS;
    let h = sigma / k as f64;
    (0..=k)
        .map(|i| {
            let r = i as f64 * h;
            let coef = if i == 0 || i == k {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            (r, coef * h / 3.0 * (-lambda * r).exp())
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}
