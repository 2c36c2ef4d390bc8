//! The discounted one-step Bellman operator over the step controls.

use crate::dynamics::{Problem, MAX_DIM};
use crate::value::ValueFunction;

/// Result of one Bellman backup at a state.
#[derive(Clone, Debug, PartialEq)]
pub struct Backup {
    pub value: f64,
    /// Index into [`Problem::step_controls`] of the minimizing control.
    pub control: usize,
}

/// `(T W)(x) = min_u { c(x, u) + gamma W(y_u(sigma)) }` over the step controls.
#[derive(Clone, Debug)]
pub struct BellmanOperator {
    problem: Problem,
    gamma: f64,
}

impl BellmanOperator {
    pub fn new(problem: &Problem) -> Self {
        BellmanOperator {
            gamma: problem.gamma(),
            problem: problem.clone(),
        }
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn apply<V: ValueFunction + ?Sized>(&self, w: &V, x: &[f64]) -> Backup {
        let n = self.problem.state_dim();
        let sigma = self.problem.spec.sigma;
        let mut y = [0.0; MAX_DIM];
        let mut best = Backup {
            value: f64::INFINITY,
            control: 0,
        };
        for (k, u) in self.problem.step_controls().iter().enumerate() {
            self.problem.system.flow(x, u, sigma, &mut y[..n]);
            let q = self.problem.one_step_cost(x, u) + self.gamma * w.value(&y[..n]);
            if q < best.value {
                best = Backup { value: q, control: k };
            }
        }
        best
    }
}
