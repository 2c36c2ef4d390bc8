//! Semi-Lagrangian fixed-point solver for the discounted HJB on a grid.
//!
//! One sweep applies the discrete Bellman operator at every node: follow the
//! exact constant-control flow for one step, interpolate the previous field
//! there (clamped to the ROI), add the Simpson one-step cost, and take the
//! minimum over the step controls. Sweeps read only the previous field.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::StateBox;
use crate::dynamics::{Problem, MAX_DIM};
use crate::error::{Error, Result};
use crate::value::ValueFunction;

/// Snap distance (in cell units) under which an interpolation coordinate is
/// treated as lying exactly on a grid line.
const NODE_SNAP: f64 = 1e-10;

/// A scalar field sampled on a regular grid over a box.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub shape: Vec<usize>,
    pub roi: StateBox,
    /// Row-major values; the last dimension varies fastest.
    pub values: Vec<f64>,
    pub iterations: usize,
    pub sup_change: f64,
    /// Fixed-point tolerance the field was solved to, if any.
    pub tol: Option<f64>,
}

/// Sidecar metadata written next to a grid CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridMeta {
    pub shape: Vec<usize>,
    pub roi: StateBox,
    #[serde(default, with = "crate::real::option")]
    pub tol: Option<f64>,
    pub iterations: usize,
    #[serde(with = "crate::real")]
    pub sup_change: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_hash: Option<String>,
}

impl GridField {
    pub fn zeros(shape: &[usize], roi: &StateBox) -> Result<Self> {
        Self::filled(shape, roi, 0.0)
    }

    pub fn filled(shape: &[usize], roi: &StateBox, value: f64) -> Result<Self> {
        if shape.len() != roi.dim() || shape.is_empty() || shape.len() > MAX_DIM {
            return Err(Error::InvalidArgument(format!(
                "grid shape {shape:?} does not match a {}-dimensional region",
                roi.dim()
            )));
        }
        if shape.iter().any(|&n| n < 2) {
            return Err(Error::InvalidArgument(format!(
                "every grid dimension needs at least 2 points, got {shape:?}"
            )));
        }
        let len = shape.iter().product();
        Ok(GridField {
            shape: shape.to_vec(),
            roi: roi.clone(),
            values: vec![value; len],
            iterations: 0,
            sup_change: 0.0,
            tol: None,
        })
    }

    /// Samples `f` at every node.
    pub fn from_fn<V: ValueFunction + ?Sized>(shape: &[usize], roi: &StateBox, f: &V) -> Result<Self> {
        let mut g = Self::zeros(shape, roi)?;
        let values: Vec<f64> = (0..g.len())
            .into_par_iter()
            .map(|k| f.value(&g.node(k)))
            .collect();
        g.values = values;
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spacing(&self, i: usize) -> f64 {
        self.roi.width(i) / (self.shape[i] - 1) as f64
    }

    /// Coordinate of grid line `k` in dimension `i`; the last line is the
    /// upper bound exactly.
    pub fn coord(&self, i: usize, k: usize) -> f64 {
        if k + 1 == self.shape[i] {
            self.roi.hi[i]
        } else {
            self.roi.lo[i] + k as f64 * self.spacing(i)
        }
    }

    /// Multi-index of a flat node index.
    pub fn multi_index(&self, mut flat: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        for i in (0..self.dim()).rev() {
            idx[i] = flat % self.shape[i];
            flat /= self.shape[i];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&k, &n)| acc * n + k)
    }

    /// State at a flat node index.
    pub fn node(&self, flat: usize) -> Vec<f64> {
        let idx = self.multi_index(flat);
        (0..self.dim()).map(|i| self.coord(i, idx[i])).collect()
    }

    /// True when the node lies within `rim` lines of the boundary.
    pub fn on_rim(&self, flat: usize, rim: usize) -> bool {
        let idx = self.multi_index(flat);
        (0..self.dim()).any(|i| idx[i] < rim || idx[i] + rim >= self.shape[i])
    }

    /// Interpolation stencil of `x`: up to `2^d` (flat index, weight) pairs.
    fn stencil(&self, x: &[f64], out: &mut Vec<(usize, f64)>) {
        out.clear();
        let d = self.dim();
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for i in 0..d {
            let h = self.spacing(i);
            let xi = x[i].clamp(self.roi.lo[i], self.roi.hi[i]);
            let mut t = (xi - self.roi.lo[i]) / h;
            let r = t.round();
            if (t - r).abs() <= NODE_SNAP {
                t = r;
            }
            let k = (t.floor() as isize).clamp(0, self.shape[i] as isize - 2) as usize;
            base[i] = k;
            frac[i] = (t - k as f64).clamp(0.0, 1.0);
        }
        for corner in 0..1usize << d {
            let mut w = 1.0;
            let mut idx = [0usize; MAX_DIM];
            for i in 0..d {
                if corner >> i & 1 == 1 {
                    w *= frac[i];
                    idx[i] = base[i] + 1;
                } else {
                    w *= 1.0 - frac[i];
                    idx[i] = base[i];
                }
            }
            if w != 0.0 {
                out.push((self.flat_index(&idx[..d]), w));
            }
        }
    }

    /// Multilinear interpolation with queries clamped to the ROI.
    pub fn interp(&self, x: &[f64]) -> f64 {
        let mut st = Vec::with_capacity(1 << self.dim());
        self.stencil(x, &mut st);
        st.iter().map(|&(k, w)| w * self.values[k]).sum()
    }

    /// Largest absolute nodewise difference.
    pub fn sup_distance(&self, other: &GridField) -> f64 {
        assert_eq!(self.shape, other.shape, "grid shapes differ");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest absolute value over nodes off the `rim`.
    pub fn max_abs_interior(&self, rim: usize) -> f64 {
        (0..self.len())
            .filter(|&k| !self.on_rim(k, rim))
            .map(|k| self.values[k].abs())
            .fold(0.0, f64::max)
    }

    /// `w - self` sampled on this grid.
    pub fn difference<V: ValueFunction + ?Sized>(&self, w: &V) -> Result<GridField> {
        let mut d = GridField::from_fn(&self.shape, &self.roi, w)?;
        for (v, o) in d.values.iter_mut().zip(&self.values) {
            *v -= o;
        }
        Ok(d)
    }

    pub fn meta(&self) -> GridMeta {
        GridMeta {
            shape: self.shape.clone(),
            roi: self.roi.clone(),
            tol: self.tol,
            iterations: self.iterations,
            sup_change: self.sup_change,
            spec_hash: None,
        }
    }

    /// Writes `x1,...,xn,w` rows in row-major order.
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = BufWriter::new(w);
        let header: Vec<String> = (1..=self.dim()).map(|i| format!("x{i}")).collect();
        writeln!(w, "{},w", header.join(","))?;
        for k in 0..self.len() {
            for c in self.node(k) {
                write!(w, "{},", crate::real::format(c))?;
            }
            writeln!(w, "{}", crate::real::format(self.values[k]))?;
        }
        w.flush()
    }

    /// Writes `<stem>.csv` and its `<stem>.json` sidecar into `dir`.
    pub fn save(&self, dir: &Path, stem: &str, spec_hash: Option<&str>) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        let file = std::fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
        self.write_csv(file).map_err(|e| Error::io(&csv, e))?;
        let mut meta = self.meta();
        meta.spec_hash = spec_hash.map(str::to_string);
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| Error::io(&json, e))
    }

    /// Reads a grid written by [`GridField::save`].
    pub fn load(dir: &Path, stem: &str) -> Result<(Self, GridMeta)> {
        let json = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let meta: GridMeta = serde_json::from_str(&text)?;
        let mut g = GridField::zeros(&meta.shape, &meta.roi)?;
        g.tol = meta.tol;
        g.iterations = meta.iterations;
        g.sup_change = meta.sup_change;
        let csv = dir.join(format!("{stem}.csv"));
        let file = std::fs::File::open(&csv).map_err(|e| Error::io(&csv, e))?;
        let mut n = 0;
        for (line_no, line) in BufReader::new(file).lines().enumerate().skip(1) {
            let line = line.map_err(|e| Error::io(&csv, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let last = line.rsplit(',').next().unwrap_or_default();
            let v: f64 = last.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("{}:{}: bad value {last:?}", csv.display(), line_no + 1))
            })?;
            if n >= g.len() {
                return Err(Error::InvalidArgument(format!(
                    "{}: more rows than the grid shape allows",
                    csv.display()
                )));
            }
            g.values[n] = v;
            n += 1;
        }
        if n != g.len() {
            return Err(Error::InvalidArgument(format!(
                "{}: expected {} rows, found {n}",
                csv.display(),
                g.len()
            )));
        }
        Ok((g, meta))
    }
}

impl ValueFunction for GridField {
    fn value(&self, x: &[f64]) -> f64 {
        self.interp(x)
    }
}

/// Precomputed discrete Bellman operator on a fixed grid.
///
/// For every node and step control it stores the one-step cost and the
/// interpolation stencil of the one-step successor, so a sweep is a sparse
/// gather followed by a minimum.
#[derive(Clone, Debug)]
pub struct SweepOperator {
    shape: Vec<usize>,
    roi: StateBox,
    gamma: f64,
    n_controls: usize,
    /// Per (node, control): cost.
    costs: Vec<f64>,
    /// Per (node, control): offset into `taps`.
    offsets: Vec<u32>,
    taps: Vec<(u32, f64)>,
}

/// Interpolation taps `(node, weight)` for one backtracked point.
type Stencil = Vec<(usize, f64)>;

impl SweepOperator {
    pub fn new(problem: &Problem, shape: &[usize]) -> Result<Self> {
        let template = GridField::zeros(shape, &problem.spec.roi)?;
        let controls = problem.step_controls();
        let n = problem.state_dim();
        let sigma = problem.spec.sigma;
        let per_node: Vec<(Vec<f64>, Vec<Stencil>)> = (0..template.len())
            .into_par_iter()
            .map(|k| {
                let x = template.node(k);
                let mut y = [0.0; MAX_DIM];
                let mut costs = Vec::with_capacity(controls.len());
                let mut stencils = Vec::with_capacity(controls.len());
                for u in controls {
                    problem.system.flow(&x, u, sigma, &mut y[..n]);
                    costs.push(problem.one_step_cost(&x, u));
                    let mut st = Vec::new();
                    template.stencil(&y[..n], &mut st);
                    stencils.push(st);
                }
                (costs, stencils)
            })
            .collect();
        let mut costs = Vec::with_capacity(template.len() * controls.len());
        let mut offsets = Vec::with_capacity(template.len() * controls.len() + 1);
        let mut taps = Vec::new();
        for (c, st) in per_node {
            costs.extend(c);
            for s in st {
                offsets.push(taps.len() as u32);
                taps.extend(s.into_iter().map(|(i, w)| (i as u32, w)));
            }
        }
        offsets.push(taps.len() as u32);
        Ok(SweepOperator {
            shape: shape.to_vec(),
            roi: problem.spec.roi.clone(),
            gamma: problem.gamma(),
            n_controls: controls.len(),
            costs,
            offsets,
            taps,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// One application of the discrete operator.
    pub fn apply(&self, field: &GridField) -> GridField {
        assert_eq!(field.shape, self.shape, "grid shape mismatch");
        let m = self.n_controls;
        let values: Vec<f64> = (0..field.len())
            .into_par_iter()
            .map(|k| {
                let mut best = f64::INFINITY;
                for c in 0..m {
                    let e = k * m + c;
                    let (a, b) = (self.offsets[e] as usize, self.offsets[e + 1] as usize);
                    let cont: f64 = self.taps[a..b]
                        .iter()
                        .map(|&(i, w)| w * field.values[i as usize])
                        .sum();
                    best = best.min(self.costs[e] + self.gamma * cont);
                }
                best
            })
            .collect();
        let sup_change = values
            .iter()
            .zip(&field.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        GridField {
            shape: self.shape.clone(),
            roi: self.roi.clone(),
            values,
            iterations: field.iterations + 1,
            sup_change,
            tol: field.tol,
        }
    }
}

/// One sweep of the discrete Bellman operator.
pub fn sweep(field: &GridField, problem: &Problem) -> Result<GridField> {
    Ok(SweepOperator::new(problem, &field.shape)?.apply(field))
}

/// Default sweep cap `10 ln(tol) / ln(gamma)`.
pub fn default_iteration_cap(tol: f64, gamma: f64) -> usize {
    (10.0 * tol.ln() / gamma.ln()).ceil().max(1.0) as usize
}

/// Iterates sweeps from zero until the sweep change certifies a fixed-point
/// distance of at most `tol` through the contraction constant.
pub fn solve_stationary(problem: &Problem, shape: &[usize], tol: f64) -> Result<GridField> {
    solve_stationary_capped(problem, shape, tol, None)
}

pub fn solve_stationary_capped(
    problem: &Problem,
    shape: &[usize],
    tol: f64,
    cap: Option<usize>,
) -> Result<GridField> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let op = SweepOperator::new(problem, shape)?;
    let gamma = op.gamma();
    let cap = cap.unwrap_or_else(|| default_iteration_cap(tol, gamma));
    let stop = tol * (1.0 - gamma) / gamma;
    let mut field = GridField::zeros(shape, &problem.spec.roi)?;
    field.tol = Some(tol);
    for _ in 0..cap {
        field = op.apply(&field);
        if field.sup_change <= stop {
            log::debug!(
                "grid converged after {} sweeps (change {:e})",
                field.iterations,
                field.sup_change
            );
            return Ok(field);
        }
    }
    Err(Error::NonConvergence {
        cap,
        last_change: field.sup_change,
    })
}

/// Forward-in-time slices `W_0 = 0, W_{k+1} = T W_k` at `tau_k = k sigma`.
pub fn solve_forward(problem: &Problem, shape: &[usize], n_steps: usize) -> Result<Vec<GridField>> {
    let spec = &problem.spec;
    if n_steps as f64 * spec.sigma > spec.horizon * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "{n_steps} steps of {} exceed the horizon {}",
            spec.sigma, spec.horizon
        )));
    }
    let op = SweepOperator::new(problem, shape)?;
    let mut slices = Vec::with_capacity(n_steps + 1);
    slices.push(GridField::zeros(shape, &spec.roi)?);
    for k in 0..n_steps {
        let next = op.apply(&slices[k]);
        slices.push(next);
    }
    Ok(slices)
}
