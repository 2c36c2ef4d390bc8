//! TD plus HJB-residual training with Adam and a Polyak target network.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::replay::{Entry, ReplayBuffer};
use super::NetParams;
use crate::dynamics::{Problem, MAX_DIM};
use crate::error::{Error, Result};

/// Samples per deterministic gradient chunk.
const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub iterations: usize,
    pub batch_size: usize,
    #[serde(with = "crate::real")]
    pub learning_rate: f64,
    /// Cosine-decay endpoint for the learning rate; constant when absent.
    #[serde(default, with = "crate::real::option", skip_serializing_if = "Option::is_none")]
    pub learning_rate_final: Option<f64>,
    #[serde(with = "crate::real")]
    pub target_update: f64,
    #[serde(with = "crate::real")]
    pub w_td: f64,
    #[serde(with = "crate::real")]
    pub w_hjb: f64,
    /// Accepted for completeness; must be zero.
    #[serde(with = "crate::real")]
    pub w_sob: f64,
    pub buffer_capacity: usize,
    pub buffer_fill: usize,
    #[serde(default = "default_beta1", with = "crate::real")]
    pub beta1: f64,
    #[serde(default = "default_beta2", with = "crate::real")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps", with = "crate::real")]
    pub adam_eps: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_log_every() -> usize {
    500
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(format!("training schedule: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if let Some(f) = self.learning_rate_final {
            if !(f >= 0.0 && f.is_finite()) {
                return bad("learning_rate_final must be nonnegative");
            }
        }
        if !(self.target_update > 0.0 && self.target_update <= 1.0) {
            return bad("target_update must lie in (0, 1]");
        }
        if !(self.w_td >= 0.0 && self.w_hjb >= 0.0) || self.w_td + self.w_hjb <= 0.0 {
            return bad("loss weights must be nonnegative and not both zero");
        }
        if self.w_sob != 0.0 {
            return bad("the Sobolev weight is not supported and must be 0");
        }
        if self.buffer_capacity == 0 || self.buffer_fill == 0 || self.buffer_fill > self.buffer_capacity {
            return bad("need 0 < buffer_fill <= buffer_capacity");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("invalid Adam constants");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }

    fn learning_rate_at(&self, it: usize) -> f64 {
        match self.learning_rate_final {
            None => self.learning_rate,
            Some(lr_min) => {
                let t = it as f64 / self.iterations.max(1) as f64;
                let c = 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos());
                lr_min + (self.learning_rate - lr_min) * c
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub td: f64,
    pub hjb: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: usize,
    /// Batch loss at every iteration.
    pub losses: Vec<f64>,
    pub records: Vec<LossRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,loss,td,hjb")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{}",
                r.iteration,
                crate::real::format(r.loss),
                crate::real::format(r.td),
                crate::real::format(r.hjb)
            )?;
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, s: &TrainSchedule) {
        self.t += 1;
        let c1 = 1.0 - s.beta1.powi(self.t as i32);
        let c2 = 1.0 - s.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = s.beta1 * self.m[i] + (1.0 - s.beta1) * g;
            self.v[i] = s.beta2 * self.v[i] + (1.0 - s.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + s.adam_eps);
        }
    }
}

/// Stateful trainer; the CEGIS loop keeps one alive across rounds.
pub struct Trainer {
    problem: Problem,
    schedule: TrainSchedule,
    params: NetParams,
    target: NetParams,
    adam: Adam,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    pub fn new(problem: &Problem, params: NetParams, schedule: &TrainSchedule, seed: u64) -> Result<Self> {
        schedule.validate()?;
        if params.input_dim() != problem.state_dim() {
            return Err(Error::InvalidArgument(format!(
                "network input {} does not match state dimension {}",
                params.input_dim(),
                problem.state_dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut buffer = ReplayBuffer::new(schedule.buffer_capacity, problem.spec.roi.clone())?;
        buffer.fill_uniform(problem, schedule.buffer_fill, &mut rng)?;
        Ok(Trainer {
            problem: problem.clone(),
            schedule: schedule.clone(),
            target: params.clone(),
            adam: Adam::new(params.param_count()),
            params,
            buffer,
            rng,
            iteration: 0,
        })
    }

    pub fn params(&self) -> &NetParams {
        &self.params
    }

    pub fn into_params(self) -> NetParams {
        self.params
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn buffer_mut(&mut self) -> &mut ReplayBuffer {
        &mut self.buffer
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn schedule(&self) -> &TrainSchedule {
        &self.schedule
    }

    pub fn set_schedule(&mut self, schedule: &TrainSchedule) -> Result<()> {
        schedule.validate()?;
        self.schedule = schedule.clone();
        Ok(())
    }

    /// Clears the Adam moments and the schedule position; parameters and
    /// the target network are kept.
    pub fn reset_optimizer(&mut self) {
        self.adam = Adam::new(self.params.param_count());
        self.iteration = 0;
    }

    /// One optimizer step on a fresh batch.
    pub fn step(&mut self) -> LossRecord {
        let b = self.schedule.batch_size;
        let batch: Vec<&Entry> = (0..b).map(|_| self.buffer.sample(&mut self.rng)).collect();
        let n_params = self.params.param_count();
        let ctx = StepCtx {
            problem: &self.problem,
            params: &self.params,
            target: &self.target,
            w_td: self.schedule.w_td,
            w_hjb: self.schedule.w_hjb,
            scale: 1.0 / b as f64,
        };
        let parts: Vec<(Vec<f64>, f64, f64)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grad = vec![0.0; n_params];
                let (td, hjb) = ctx.chunk(chunk, &mut grad);
                (grad, td, hjb)
            })
            .collect();
        let mut grad = vec![0.0; n_params];
        let (mut td, mut hjb) = (0.0, 0.0);
        for (g, a, r) in &parts {
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
            td += a;
            hjb += r;
        }
        td *= ctx.scale;
        hjb *= ctx.scale;
        let loss = self.schedule.w_td * td + self.schedule.w_hjb * hjb;

        let lr = self.schedule.learning_rate_at(self.iteration);
        self.adam.step(self.params.as_mut_slice(), &grad, lr, &self.schedule);
        let tau = self.schedule.target_update;
        for (t, p) in self.target.as_mut_slice().iter_mut().zip(self.params.as_slice()) {
            *t += tau * (p - *t);
        }
        self.iteration += 1;
        LossRecord {
            iteration: self.iteration,
            loss,
            td,
            hjb,
        }
    }

    /// Runs the schedule's iteration count.
    pub fn run(&mut self) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        let n = self.schedule.iterations;
        for _ in 0..n {
            let rec = self.step();
            report.losses.push(rec.loss);
            report.iterations += 1;
            if !rec.loss.is_finite() || !self.params.is_finite() {
                return Err(Error::Diverged {
                    iteration: rec.iteration,
                    loss: rec.loss,
                    trace: report.losses,
                });
            }
            if rec.iteration % self.schedule.log_every == 0 || report.iterations == n {
                log::info!(
                    "iter {:>6}  loss {:.3e}  td {:.3e}  hjb {:.3e}",
                    rec.iteration,
                    rec.loss,
                    rec.td,
                    rec.hjb
                );
                report.records.push(rec);
            }
        }
        Ok(report)
    }
}

/// Trains `params` from scratch with a fresh buffer and optimizer.
pub fn train(
    problem: &Problem,
    params: NetParams,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<(NetParams, TrainReport)> {
    let mut t = Trainer::new(problem, params, schedule, seed)?;
    let report = t.run()?;
    Ok((t.into_params(), report))
}

struct StepCtx<'a> {
    problem: &'a Problem,
    params: &'a NetParams,
    target: &'a NetParams,
    w_td: f64,
    w_hjb: f64,
    scale: f64,
}

/// Row-major matrix view helpers over flat buffers.
fn view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("buffer shape")
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("buffer shape")
}

/// Activations of one chunk. Rows are channel-major: the first `n` rows
/// carry values, then one block of `n` rows per input-tangent direction.
struct ChunkPass {
    n: usize,
    /// Input of every layer, `(d+1) n x width`.
    xs: Vec<Vec<f64>>,
    /// `cos z` of the value rows of every hidden layer.
    cos: Vec<Vec<f64>>,
    /// Tangent pre-activations of every hidden layer.
    dz: Vec<Vec<f64>>,
    /// Network value and input gradient per sample.
    value: Vec<f64>,
    grad: Vec<f64>,
}

/// Value-and-tangent pass over `n` states stored as rows of `x` (`n x d`).
fn forward_chunk(p: &NetParams, x: &[f64], n: usize) -> ChunkPass {
    let d = p.input_dim();
    let ch = d + 1;
    let rows = ch * n;
    let sizes = p.sizes();
    let nl = p.n_layers();
    let w0 = p.w0();

    let mut x0 = vec![0.0; rows * d];
    x0[..n * d].copy_from_slice(x);
    for t in 0..d {
        for i in 0..n {
            x0[((t + 1) * n + i) * d + t] = 1.0;
        }
    }
    let mut pass = ChunkPass {
        n,
        xs: vec![x0],
        cos: Vec::with_capacity(nl - 1),
        dz: Vec::with_capacity(nl - 1),
        value: vec![0.0; n],
        grad: vec![0.0; n * d],
    };
    for l in 0..nl - 1 {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let w = view(p.weights(l), n_out, n_in);
        let b = p.biases(l);
        let mut pre = vec![0.0; rows * n_out];
        general_mat_mul(1.0, &view(&pass.xs[l], rows, n_in), &w.t(), 0.0, &mut view_mut(&mut pre, rows, n_out));
        let mut cos = vec![0.0; n * n_out];
        let mut dz = vec![0.0; d * n * n_out];
        let mut out = vec![0.0; rows * n_out];
        for i in 0..n {
            for k in 0..n_out {
                let (s, c) = (w0 * (pre[i * n_out + k] + b[k])).sin_cos();
                out[i * n_out + k] = s;
                cos[i * n_out + k] = c;
            }
        }
        for t in 0..d {
            for i in 0..n {
                for k in 0..n_out {
                    let r = ((t + 1) * n + i) * n_out + k;
                    let z = w0 * pre[r];
                    dz[(t * n + i) * n_out + k] = z;
                    out[r] = cos[i * n_out + k] * z;
                }
            }
        }
        pass.xs.push(out);
        pass.cos.push(cos);
        pass.dz.push(dz);
    }
    let l = nl - 1;
    let n_in = sizes[l];
    let mut out = vec![0.0; rows];
    general_mat_mul(
        1.0,
        &view(&pass.xs[l], rows, n_in),
        &view(p.weights(l), 1, n_in).t(),
        0.0,
        &mut view_mut(&mut out, rows, 1),
    );
    let b = p.biases(l)[0];
    for i in 0..n {
        pass.value[i] = out[i] + b;
        for t in 0..d {
            pass.grad[i * d + t] = out[(t + 1) * n + i];
        }
    }
    pass
}

/// Plain network values at the rows of `x` (`n x d`).
fn values_chunk(p: &NetParams, x: &[f64], n: usize) -> Vec<f64> {
    let sizes = p.sizes();
    let nl = p.n_layers();
    let w0 = p.w0();
    let mut a = x.to_vec();
    for l in 0..nl {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let mut pre = vec![0.0; n * n_out];
        general_mat_mul(
            1.0,
            &view(&a, n, n_in),
            &view(p.weights(l), n_out, n_in).t(),
            0.0,
            &mut view_mut(&mut pre, n, n_out),
        );
        let b = p.biases(l);
        for i in 0..n {
            for k in 0..n_out {
                let s = pre[i * n_out + k] + b[k];
                pre[i * n_out + k] = if l + 1 == nl { s } else { (w0 * s).sin() };
            }
        }
        a = pre;
    }
    a
}

/// Reverse pass: `vbar` and `gbar` (`n x d`) are adjoints of the values and
/// input gradients; parameter gradients are added into `grad`.
fn backward_chunk(p: &NetParams, pass: &ChunkPass, vbar: &[f64], gbar: &[f64], grad: &mut [f64]) {
    let d = p.input_dim();
    let n = pass.n;
    let rows = (d + 1) * n;
    let sizes = p.sizes();
    let nl = p.n_layers();
    let w0 = p.w0();

    let l = nl - 1;
    let n_in = sizes[l];
    let mut ybar = vec![0.0; rows];
    ybar[..n].copy_from_slice(vbar);
    for t in 0..d {
        for i in 0..n {
            ybar[(t + 1) * n + i] = gbar[i * d + t];
        }
    }
    let (wr, br) = p.layer_range(l);
    general_mat_mul(
        1.0,
        &view(&ybar, rows, 1).t(),
        &view(&pass.xs[l], rows, n_in),
        1.0,
        &mut view_mut(&mut grad[wr], 1, n_in),
    );
    grad[br][0] += vbar.iter().sum::<f64>();
    let mut xbar = vec![0.0; rows * n_in];
    general_mat_mul(
        1.0,
        &view(&ybar, rows, 1),
        &view(p.weights(l), 1, n_in),
        0.0,
        &mut view_mut(&mut xbar, rows, n_in),
    );

    for l in (0..nl - 1).rev() {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        // Turn output adjoints into adjoints of s = W a + b in place.
        let sin = &pass.xs[l + 1];
        let cos = &pass.cos[l];
        let dz = &pass.dz[l];
        for i in 0..n {
            for k in 0..n_out {
                let c = cos[i * n_out + k];
                let s = sin[i * n_out + k];
                let mut zbar = xbar[i * n_out + k] * c;
                for t in 0..d {
                    let r = ((t + 1) * n + i) * n_out + k;
                    let dab = xbar[r];
                    zbar -= dab * s * dz[(t * n + i) * n_out + k];
                    xbar[r] = w0 * dab * c;
                }
                xbar[i * n_out + k] = w0 * zbar;
            }
        }
        let (wr, br) = p.layer_range(l);
        general_mat_mul(
            1.0,
            &view(&xbar, rows, n_out).t(),
            &view(&pass.xs[l], rows, n_in),
            1.0,
            &mut view_mut(&mut grad[wr], n_out, n_in),
        );
        let gb = &mut grad[br];
        for i in 0..n {
            for k in 0..n_out {
                gb[k] += xbar[i * n_out + k];
            }
        }
        if l > 0 {
            let mut prev = vec![0.0; rows * n_in];
            general_mat_mul(
                1.0,
                &view(&xbar, rows, n_out),
                &view(p.weights(l), n_out, n_in),
                0.0,
                &mut view_mut(&mut prev, rows, n_in),
            );
            xbar = prev;
        }
    }
}

impl StepCtx<'_> {
    /// Adds the loss gradient of a chunk (scaled by 1/batch) into `grad`.
    /// Returns sums of squared TD errors and squared residuals.
    fn chunk(&self, entries: &[&Entry], grad: &mut [f64]) -> (f64, f64) {
        let d = self.params.input_dim();
        let n = entries.len();
        let mut x = Vec::with_capacity(n * d);
        for e in entries {
            x.extend_from_slice(&e.x[..d]);
        }
        let pass = forward_chunk(self.params, &x, n);

        let n_ctrl = entries[0].next.len();
        let mut succ = Vec::with_capacity(n * n_ctrl * d);
        for e in entries {
            for y in &e.next {
                succ.extend_from_slice(&y[..d]);
            }
        }
        let tv = values_chunk(self.target, &succ, n * n_ctrl);
        let gamma = self.problem.gamma();
        let lambda = self.problem.spec.lambda;

        let mut vbar = vec![0.0; n];
        let mut gbar = vec![0.0; n * d];
        let (mut td_sum, mut r_sum) = (0.0, 0.0);
        let mut f = [0.0; MAX_DIM];
        for (i, e) in entries.iter().enumerate() {
            let mut y = f64::INFINITY;
            for k in 0..n_ctrl {
                let q = e.cost[k] + gamma * tv[i * n_ctrl + k];
                if q < y {
                    y = q;
                }
            }
            let v = pass.value[i];
            let td = v - y;
            let g = &pass.grad[i * d..(i + 1) * d];
            let ham = self.problem.hamiltonian(&e.x[..d], g);
            let r = lambda * v - e.h - ham.value;
            self.problem.system.vector_field(&e.x[..d], &ham.u_star, &mut f[..d]);
            vbar[i] = self.scale * (2.0 * self.w_td * td + 2.0 * self.w_hjb * r * lambda);
            for t in 0..d {
                gbar[i * d + t] = -self.scale * 2.0 * self.w_hjb * r * f[t];
            }
            td_sum += td * td;
            r_sum += r * r;
        }
        backward_chunk(self.params, &pass, &vbar, &gbar, grad);
        (td_sum, r_sum)
    }
}
