//! Sinusoidal MLP value approximator.
//!
//! Every hidden layer computes `sin(w0 (W a + b))`; the output layer is
//! linear. Parameters live in one flat vector so optimizer and target-network
//! updates are plain elementwise loops.

mod replay;
mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bellman::BellmanOperator;
use crate::error::{Error, Result};
use crate::expr::{ExprBuilder, ExprTree, NodeId};
use crate::value::ValueFunction;

pub use replay::ReplayBuffer;
pub use train::{train, LossRecord, TrainReport, TrainSchedule, Trainer};

pub const WEIGHTS_FORMAT: &str = "hjcert-weights";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    sizes: Vec<usize>,
    w0: f64,
    seed: u64,
    params: Vec<f64>,
    /// Start of each layer's weight block; biases follow the weights.
    offsets: Vec<usize>,
}

fn layer_offsets(sizes: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(sizes.len() - 1);
    let mut total = 0;
    for w in sizes.windows(2) {
        offsets.push(total);
        total += w[0] * w[1] + w[1];
    }
    (offsets, total)
}

impl NetParams {
    /// SIREN-style initialization. The first layer draws from
    /// `U(-1/fan_in, 1/fan_in)`; later layers from
    /// `U(-sqrt(6/fan_in)/w0, sqrt(6/fan_in)/w0)`. Biases share their
    /// layer's range, except the output bias which starts at zero.
    pub fn init(seed: u64, sizes: &[usize], w0: f64) -> Result<Self> {
        let mut p = Self::zeros(sizes, w0)?;
        p.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = sizes.len() - 1;
        for l in 0..n_layers {
            let fan_in = sizes[l] as f64;
            let limit = if l == 0 {
                1.0 / fan_in
            } else {
                (6.0 / fan_in).sqrt() / w0
            };
            let (w, b) = p.layer_range(l);
            for v in &mut p.params[w.start..b.end] {
                *v = rng.random_range(-limit..limit);
            }
            if l + 1 == n_layers {
                for v in &mut p.params[b] {
                    *v = 0.0;
                }
            }
        }
        Ok(p)
    }

    pub fn zeros(sizes: &[usize], w0: f64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) || *sizes.last().unwrap() != 1 {
            return Err(Error::InvalidArgument(format!(
                "layer sizes {sizes:?} must be positive and end in 1"
            )));
        }
        if !(w0 > 0.0 && w0.is_finite()) {
            return Err(Error::InvalidArgument(format!("w0 must be positive, got {w0}")));
        }
        let (offsets, total) = layer_offsets(sizes);
        Ok(NetParams {
            sizes: sizes.to_vec(),
            w0,
            seed: 0,
            params: vec![0.0; total],
            offsets,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn w0(&self) -> f64 {
        self.w0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index ranges of layer `l`'s weights (row-major, `out x in`) and biases.
    pub fn layer_range(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = self.offsets[l];
        (w..w + n_in * n_out, w + n_in * n_out..w + n_in * n_out + n_out)
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        &self.params[self.layer_range(l).0]
    }

    pub fn biases(&self, l: usize) -> &[f64] {
        &self.params[self.layer_range(l).1]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.layer_range(l).0;
        &mut self.params[r]
    }

    pub fn biases_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.layer_range(l).1;
        &mut self.params[r]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Network output at `x`.
    pub fn forward(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.input_dim(), "input dimension mismatch");
        let mut a = x.to_vec();
        let mut next = Vec::new();
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = self.weights(l);
            let b = self.biases(l);
            next.clear();
            for k in 0..n_out {
                let row = &w[k * n_in..(k + 1) * n_in];
                let s = affine(row, &a, b[k]);
                next.push(if l == last { s } else { (self.w0 * s).sin() });
            }
            std::mem::swap(&mut a, &mut next);
        }
        a[0]
    }

    /// Analytic gradient of the output with respect to the input.
    pub fn grad_x(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim(), "input dimension mismatch");
        let n_layers = self.n_layers();
        // Forward pass keeping cos(z) of each hidden layer.
        let mut acts = vec![x.to_vec()];
        let mut coss: Vec<Vec<f64>> = Vec::with_capacity(n_layers - 1);
        for l in 0..n_layers - 1 {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = self.weights(l);
            let b = self.biases(l);
            let a = &acts[l];
            let mut out = Vec::with_capacity(n_out);
            let mut cs = Vec::with_capacity(n_out);
            for k in 0..n_out {
                let z = self.w0 * affine(&w[k * n_in..(k + 1) * n_in], a, b[k]);
                out.push(z.sin());
                cs.push(z.cos());
            }
            acts.push(out);
            coss.push(cs);
        }
        // Reverse pass.
        let mut adj = self.weights(n_layers - 1).to_vec();
        for l in (0..n_layers - 1).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = self.weights(l);
            let mut prev = vec![0.0; n_in];
            for k in 0..n_out {
                let zbar = adj[k] * coss[l][k] * self.w0;
                for j in 0..n_in {
                    prev[j] += w[k * n_in + j] * zbar;
                }
            }
            adj = prev;
        }
        adj
    }

    /// One-step Bellman target using these parameters as the target network.
    pub fn bellman_target(&self, op: &BellmanOperator, x: &[f64]) -> f64 {
        op.apply(self, x).value
    }

    /// Exact expression for the network, built from the same operations in
    /// the same order as [`NetParams::forward`].
    pub fn export_expr(&self) -> ExprTree {
        let mut b = ExprBuilder::new(self.input_dim());
        let inputs = b.vars();
        let out = self.build_expr(&mut b, &inputs);
        b.finish(out)
    }

    /// Appends the network applied to `inputs` to a builder.
    pub fn build_expr(&self, b: &mut ExprBuilder, inputs: &[NodeId]) -> NodeId {
        let mut a: Vec<NodeId> = inputs.to_vec();
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = self.weights(l).to_vec();
            let bias = self.biases(l).to_vec();
            let mut next = Vec::with_capacity(n_out);
            for k in 0..n_out {
                let terms: Vec<NodeId> = (0..n_in)
                    .map(|j| {
                        let c = b.constant(w[k * n_in + j]);
                        b.mul(c, a[j])
                    })
                    .collect();
                let s = b.sum(&terms);
                let bk = b.constant(bias[k]);
                let s = b.add(s, bk);
                next.push(if l == last {
                    s
                } else {
                    let z = b.scale(self.w0, s);
                    b.sin(z)
                });
            }
            a = next;
        }
        a[0]
    }

    pub fn to_file(&self, meta: Option<serde_json::Value>) -> WeightsFile {
        WeightsFile {
            format: WEIGHTS_FORMAT.to_string(),
            version: WEIGHTS_VERSION,
            sizes: self.sizes.clone(),
            w0: self.w0,
            seed: self.seed,
            layers: (0..self.n_layers())
                .map(|l| LayerFile {
                    weights: self.weights(l).to_vec(),
                    biases: self.biases(l).to_vec(),
                })
                .collect(),
            training: meta,
        }
    }

    pub fn from_file(f: &WeightsFile) -> Result<Self> {
        if f.format != WEIGHTS_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "unexpected weights format {:?}",
                f.format
            )));
        }
        if f.version != WEIGHTS_VERSION {
            return Err(Error::Version {
                found: f.version,
                expected: WEIGHTS_VERSION,
            });
        }
        let mut p = Self::zeros(&f.sizes, f.w0)?;
        p.seed = f.seed;
        if f.layers.len() != p.n_layers() {
            return Err(Error::InvalidArgument("layer count mismatch".into()));
        }
        for (l, layer) in f.layers.iter().enumerate() {
            let (w, b) = p.layer_range(l);
            if layer.weights.len() != w.len() || layer.biases.len() != b.len() {
                return Err(Error::InvalidArgument(format!("layer {l} has the wrong shape")));
            }
            p.params[w].copy_from_slice(&layer.weights);
            p.params[b].copy_from_slice(&layer.biases);
        }
        if !p.is_finite() {
            return Err(Error::InvalidArgument("weights contain non-finite values".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: Option<serde_json::Value>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_file(meta))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, WeightsFile)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: WeightsFile = serde_json::from_str(&text)?;
        Ok((Self::from_file(&file)?, file))
    }
}

/// `row . a + bias`, accumulated left to right.
#[inline]
fn affine(row: &[f64], a: &[f64], bias: f64) -> f64 {
    let mut s = row[0] * a[0];
    for j in 1..row.len() {
        s += row[j] * a[j];
    }
    s + bias
}

impl ValueFunction for NetParams {
    fn value(&self, x: &[f64]) -> f64 {
        self.forward(x)
    }
}

impl ValueFunction for ExprTree {
    fn value(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
}

/// On-disk weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightsFile {
    pub format: String,
    pub version: u32,
    pub sizes: Vec<usize>,
    #[serde(with = "crate::real")]
    pub w0: f64,
    pub seed: u64,
    pub layers: Vec<LayerFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerFile {
    #[serde(with = "crate::real::vec")]
    pub weights: Vec<f64>,
    #[serde(with = "crate::real::vec")]
    pub biases: Vec<f64>,
}
