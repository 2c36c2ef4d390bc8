//! Inner and outer reach-set enclosures from a certified value error.
//!
//! With `|W_hat - W| <= eps_val`, the strict reach set `{W < 0}` contains
//! `{W_hat < -eps_val}` and is contained in `{W_hat <= eps_val}`.

use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::StateBox;
use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::value::ValueFunction;

/// Default number of boundary grid lines excluded from validation.
pub const DEFAULT_RIM: usize = 1;

/// Rasterized inner and outer enclosures on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EnclosurePair {
    pub shape: Vec<usize>,
    pub roi: StateBox,
    pub eps_val: f64,
    /// `W_hat < -eps_val`.
    pub inner: Vec<bool>,
    /// `W_hat <= eps_val`.
    pub outer: Vec<bool>,
    /// The sampled `W_hat`, kept for export.
    pub field: GridField,
}

impl EnclosurePair {
    pub fn inner_count(&self) -> usize {
        self.inner.iter().filter(|&&b| b).count()
    }

    pub fn outer_count(&self) -> usize {
        self.outer.iter().filter(|&&b| b).count()
    }

    /// Writes `x1,...,xn,inner,outer,oracle_neg` rows; `oracle_neg` is left
    /// empty without an oracle.
    pub fn write_csv<W: Write>(&self, w: W, oracle: Option<(&GridField, f64)>) -> std::io::Result<()> {
        let mut w = BufWriter::new(w);
        let n = self.shape.len();
        let header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        writeln!(w, "{},inner,outer,oracle_neg", header.join(","))?;
        for k in 0..self.inner.len() {
            for c in self.field.node(k) {
                write!(w, "{},", crate::real::format(c))?;
            }
            let neg = match oracle {
                Some((g, thr)) => ((g.values[k] < thr) as u8).to_string(),
                None => String::new(),
            };
            writeln!(w, "{},{},{}", self.inner[k] as u8, self.outer[k] as u8, neg)?;
        }
        w.flush()
    }

    pub fn save_csv(&self, path: &Path, oracle: Option<(&GridField, f64)>) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file, oracle).map_err(|e| Error::io(path, e))
    }
}

/// Thresholds a sampled field: strict `<` for the inner set, `<=` for the outer.
pub fn bracket_field(field: &GridField, eps_val: f64) -> Result<EnclosurePair> {
    if !(eps_val >= 0.0) || !eps_val.is_finite() {
        return Err(Error::InvalidArgument(format!("eps_val must be finite and nonnegative, got {eps_val}")));
    }
    let inner = field.values.par_iter().map(|&v| v < -eps_val).collect();
    let outer = field.values.par_iter().map(|&v| v <= eps_val).collect();
    Ok(EnclosurePair {
        shape: field.shape.clone(),
        roi: field.roi.clone(),
        eps_val,
        inner,
        outer,
        field: field.clone(),
    })
}

/// Samples `w` on the grid and brackets it.
pub fn bracket<V: ValueFunction + ?Sized>(w: &V, eps_val: f64, shape: &[usize], roi: &StateBox) -> Result<EnclosurePair> {
    let field = GridField::from_fn(shape, roi, w)?;
    bracket_field(&field, eps_val)
}

/// A grid node where an inclusion fails.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub index: usize,
    #[serde(with = "crate::real::vec")]
    pub x: Vec<f64>,
    #[serde(with = "crate::real")]
    pub w_hat: f64,
    #[serde(with = "crate::real")]
    pub w_num: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BracketReport {
    #[serde(with = "crate::real")]
    pub eps_val: f64,
    pub rim: usize,
    /// Oracle nodes count as reached for the outer check when `W_num` is
    /// below this; the inner check uses `W_num < 0`, so oracle noise within
    /// the band can excuse a node but never accuse one.
    #[serde(with = "crate::real")]
    pub oracle_threshold: f64,
    pub nodes_checked: usize,
    pub inner_count: usize,
    pub outer_count: usize,
    pub oracle_count: usize,
    /// Nodes in the inner set that the oracle does not reach.
    pub inner_violations: Vec<Violation>,
    /// Nodes the oracle reaches that lie outside the outer set.
    pub outer_violations: Vec<Violation>,
}

impl BracketReport {
    pub fn violations(&self) -> usize {
        self.inner_violations.len() + self.outer_violations.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Oracle reach threshold: `-10 tol`, or zero for an oracle without a tolerance.
pub fn oracle_threshold(oracle: &GridField) -> f64 {
    oracle.tol.map_or(0.0, |t| -10.0 * t)
}

/// Checks `inner ⊆ {W_num < 0}` and `{W_num < thr} ⊆ outer` away from the rim.
pub fn validate_bracket(pair: &EnclosurePair, oracle: &GridField, rim: usize) -> Result<BracketReport> {
    if pair.shape != oracle.shape || pair.roi != oracle.roi {
        return Err(Error::InvalidArgument("enclosure and oracle grids differ".into()));
    }
    let thr = oracle_threshold(oracle);
    let mut report = BracketReport {
        eps_val: pair.eps_val,
        rim,
        oracle_threshold: thr,
        nodes_checked: 0,
        inner_count: pair.inner_count(),
        outer_count: pair.outer_count(),
        oracle_count: 0,
        inner_violations: Vec::new(),
        outer_violations: Vec::new(),
    };
    for k in 0..oracle.len() {
        if oracle.on_rim(k, rim) {
            continue;
        }
        report.nodes_checked += 1;
        let reached = oracle.values[k] < thr;
        report.oracle_count += reached as usize;
        let v = || Violation {
            index: k,
            x: oracle.node(k),
            w_hat: pair.field.values[k],
            w_num: oracle.values[k],
        };
        if pair.inner[k] && oracle.values[k] >= 0.0 {
            report.inner_violations.push(v());
        }
        if reached && !pair.outer[k] {
            report.outer_violations.push(v());
        }
    }
    Ok(report)
}
