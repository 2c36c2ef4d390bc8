//! Replay buffer of states with cached one-step transitions.

use rand::Rng;

use crate::config::StateBox;
use crate::dynamics::{Problem, MAX_DIM};
use crate::error::{Error, Result};

/// Stored state plus, per step control, its one-step cost and successor.
#[derive(Clone, Debug)]
pub(crate) struct Entry {
    pub x: [f64; MAX_DIM],
    pub cost: Vec<f64>,
    pub next: Vec<[f64; MAX_DIM]>,
    pub h: f64,
}

/// Two pools: uniform ROI samples and counterexamples. A counterexample is
/// drawn `weight` times as often as a uniform state.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    roi: StateBox,
    uniform: Vec<Entry>,
    counter: Vec<Entry>,
    counter_head: usize,
    weight: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, roi: StateBox) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            roi,
            uniform: Vec::new(),
            counter: Vec::new(),
            counter_head: 0,
            weight: 10.0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.uniform.len() + self.counter.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counterexample_count(&self) -> usize {
        self.counter.len()
    }

    pub fn set_counterexample_weight(&mut self, weight: f64) {
        assert!(weight > 0.0, "weight must be positive");
        self.weight = weight;
    }

    fn entry(&self, problem: &Problem, x: &[f64]) -> Result<Entry> {
        if x.len() != self.roi.dim() || !self.roi.contains(x) {
            return Err(Error::Domain { point: x.to_vec() });
        }
        let n = x.len();
        let mut xs = [0.0; MAX_DIM];
        xs[..n].copy_from_slice(x);
        let sigma = problem.spec.sigma;
        let controls = problem.step_controls();
        let mut cost = Vec::with_capacity(controls.len());
        let mut next = Vec::with_capacity(controls.len());
        for u in controls {
            let mut y = [0.0; MAX_DIM];
            problem.system.flow(x, u, sigma, &mut y[..n]);
            cost.push(problem.one_step_cost(x, u));
            next.push(y);
        }
        Ok(Entry {
            x: xs,
            cost,
            next,
            h: problem.running_cost(x),
        })
    }

    /// Adds `count` uniform ROI states, up to capacity.
    pub fn fill_uniform<R: Rng>(&mut self, problem: &Problem, count: usize, rng: &mut R) -> Result<()> {
        let n = self.roi.dim();
        let mut x = vec![0.0; n];
        for _ in 0..count {
            if self.len() >= self.capacity {
                break;
            }
            for i in 0..n {
                x[i] = rng.random_range(self.roi.lo[i]..=self.roi.hi[i]);
            }
            let e = self.entry(problem, &x)?;
            self.uniform.push(e);
        }
        Ok(())
    }

    /// Adds a counterexample state. At capacity the most recent uniform
    /// state is evicted, then the oldest counterexample.
    pub fn push_counterexample(&mut self, problem: &Problem, x: &[f64]) -> Result<()> {
        let e = self.entry(problem, x)?;
        if self.len() < self.capacity {
            self.counter.push(e);
        } else if !self.uniform.is_empty() {
            self.uniform.pop();
            self.counter.push(e);
        } else {
            let i = self.counter_head % self.counter.len();
            self.counter[i] = e;
            self.counter_head = i + 1;
        }
        Ok(())
    }

    pub(crate) fn sample<R: Rng>(&self, rng: &mut R) -> &Entry {
        let nu = self.uniform.len() as f64;
        let nc = self.counter.len() as f64;
        assert!(nu + nc > 0.0, "sampling from an empty replay buffer");
        let p_counter = self.weight * nc / (nu + self.weight * nc);
        if !self.counter.is_empty() && rng.random::<f64>() < p_counter {
            &self.counter[rng.random_range(0..self.counter.len())]
        } else {
            &self.uniform[rng.random_range(0..self.uniform.len())]
        }
    }

    /// All stored states, uniform pool first.
    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        let n = self.roi.dim();
        self.uniform.iter().chain(&self.counter).map(move |e| &e.x[..n])
    }
}
