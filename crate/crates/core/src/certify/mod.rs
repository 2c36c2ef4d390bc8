//! Branch-and-bound residual certification.
//!
//! A cell query asks whether some `x` in the cell has `|R(x)| > rho`. Boxes
//! are pruned when an outward-rounded enclosure of `R` fits inside
//! `[-rho, rho]`; a box whose midpoint already exceeds `rho - delta` ends the
//! search with that midpoint as witness. UNSAT is therefore exact and
//! DELTA_SAT means the weakened query `|R| > rho - delta` is satisfiable.

mod enclosure;
pub mod smtlib;
mod tape;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ProblemSpec, StateBox};
use crate::dynamics::{Problem, MAX_DIM};
use crate::error::{Error, Result};
use crate::expr::ExprTree;
use crate::interval::Interval;
use crate::residuals::{
    bellman_defect_expr, eps_val_from_operator, eps_val_from_slack, stationary_residual_expr, BoundKind,
    ResidualBound,
};

pub use enclosure::{Affine, Enclosure};
use tape::Tape;

pub const CERTIFICATE_FORMAT: &str = "hjcert-certificate";
pub const CERTIFICATE_VERSION: u32 = 1;

/// Which residual is certified.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    /// One-step Bellman defect on the shrunk region.
    #[serde(rename = "a")]
    A,
    /// Stationary HJB PDE defect.
    #[serde(rename = "b")]
    B,
}

impl std::str::FromStr for Route {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Route::A),
            "b" => Ok(Route::B),
            _ => Err(Error::InvalidArgument(format!("unknown route `{s}` (expected a or b)"))),
        }
    }
}

/// A region queried on its own, with its bound.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub region: StateBox,
    pub rho: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    #[serde(rename = "UNSAT")]
    Unsat,
    #[serde(rename = "DELTA_SAT")]
    DeltaSat,
    #[serde(rename = "INDETERMINATE")]
    Indeterminate,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Unsat => "UNSAT",
            Status::DeltaSat => "DELTA_SAT",
            Status::Indeterminate => "INDETERMINATE",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    /// `Unsat` or `DeltaSat`; indeterminate searches are errors.
    pub status: Status,
    pub witness: Option<Vec<f64>>,
    pub proven_sup: f64,
    pub boxes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CertifyOptions {
    /// Boxes narrower than this in every dimension are not split further.
    pub width_floor: f64,
    /// Exploration budget per cell.
    pub max_boxes: u64,
    /// Use affine forms alongside intervals. With `false` only the natural
    /// interval extension is used.
    pub affine: bool,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            width_floor: 1e-6,
            max_boxes: 1_000_000,
            affine: true,
        }
    }
}

/// Natural interval extension of `expr` over a box.
pub fn eval_interval(expr: &ExprTree, region: &StateBox) -> Interval {
    expr.eval_interval(&region.intervals())
}

/// Enclosure of `expr` over a box using intervals tightened by affine
/// forms; this is what [`certify_cell`] prunes with.
pub fn eval_enclosure(expr: &ExprTree, region: &StateBox) -> Interval {
    Evaluator::new(expr, true).range(region)
}

struct Evaluator<'a> {
    expr: &'a ExprTree,
    tape: Tape,
    affine: bool,
    enc: Vec<Enclosure>,
    iv: Vec<Interval>,
    pt: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    fn new(expr: &'a ExprTree, affine: bool) -> Self {
        Evaluator {
            expr,
            tape: Tape::compile(expr),
            affine,
            enc: Vec::new(),
            iv: Vec::new(),
            pt: Vec::new(),
        }
    }

    fn range(&mut self, region: &StateBox) -> Interval {
        if self.affine {
            let vars: Vec<Enclosure> = (0..region.dim())
                .map(|i| Enclosure::var(region.interval(i), i))
                .collect();
            self.tape.eval(&vars, &mut self.enc).iv
        } else {
            self.tape.eval(&region.intervals(), &mut self.iv)
        }
    }

    fn point(&mut self, x: &[f64]) -> f64 {
        self.expr.eval_in(x, &mut self.pt)
    }
}

/// Decides `exists x in cell: |expr(x)| > rho` up to `delta`.
///
/// Fails with [`Error::Indeterminate`] when the budget runs out or a box
/// reaches the width floor without being pruned or yielding a witness.
pub fn certify_cell(expr: &ExprTree, cell: &Cell, delta: f64, opts: &CertifyOptions) -> Result<Verdict> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument("delta must be positive".into()));
    }
    if !(cell.rho >= 0.0) {
        return Err(Error::InvalidArgument("rho must be nonnegative".into()));
    }
    if cell.region.dim() != expr.n_vars {
        return Err(Error::InvalidArgument(format!(
            "cell has {} dimensions, expression has {} variables",
            cell.region.dim(),
            expr.n_vars
        )));
    }
    let rho = cell.rho;
    let mut ev = Evaluator::new(expr, opts.affine);
    let mut stack = vec![cell.region.clone()];
    let mut proven_sup = 0.0f64;
    let mut root_sup = None;
    let mut boxes = 0u64;
    let mut mid = vec![0.0; cell.region.dim()];
    while let Some(b) = stack.pop() {
        if boxes >= opts.max_boxes {
            return Err(Error::Indeterminate {
                boxes,
                reason: format!("exploration budget of {} boxes exhausted", opts.max_boxes),
            });
        }
        boxes += 1;
        let range = ev.range(&b);
        let sup = range.mag();
        if root_sup.is_none() {
            root_sup = Some(sup);
        }
        if sup <= rho {
            proven_sup = proven_sup.max(sup);
            continue;
        }
        for (i, m) in mid.iter_mut().enumerate() {
            *m = b.interval(i).mid();
        }
        let r = ev.point(&mid);
        if r.abs() > rho - delta {
            return Ok(Verdict {
                status: Status::DeltaSat,
                witness: Some(mid),
                proven_sup: root_sup.unwrap_or(sup),
                boxes,
            });
        }
        let dim = b.widest_dim();
        if b.width(dim) < opts.width_floor {
            return Err(Error::Indeterminate {
                boxes,
                reason: format!(
                    "box {:?}..{:?} below width floor {:e} with enclosure {range}",
                    b.lo, b.hi, opts.width_floor
                ),
            });
        }
        let (lo, hi) = b.split(dim);
        stack.push(hi);
        stack.push(lo);
    }
    Ok(Verdict {
        status: Status::Unsat,
        witness: None,
        proven_sup,
        boxes,
    })
}

/// Regular tiling of `domain`; neighbours share face coordinates bit for bit.
pub fn partition_roi(domain: &StateBox, cells_per_axis: usize, rho: f64) -> Result<Vec<Cell>> {
    if cells_per_axis == 0 {
        return Err(Error::InvalidArgument("cells_per_axis must be at least 1".into()));
    }
    domain.validate()?;
    let n = domain.dim();
    let k = cells_per_axis;
    let faces: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..=k)
                .map(|j| {
                    if j == 0 {
                        domain.lo[i]
                    } else if j == k {
                        domain.hi[i]
                    } else {
                        let t = j as f64 / k as f64;
                        (domain.lo[i] + t * domain.width(i)).clamp(domain.lo[i], domain.hi[i])
                    }
                })
                .collect()
        })
        .collect();
    let total = k.pow(n as u32);
    let mut cells = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rest = flat;
        let mut lo = vec![0.0; n];
        let mut hi = vec![0.0; n];
        for i in (0..n).rev() {
            let j = rest % k;
            rest /= k;
            lo[i] = faces[i][j];
            hi[i] = faces[i][j + 1];
        }
        cells.push(Cell {
            region: StateBox { lo, hi },
            rho,
        });
    }
    Ok(cells)
}

/// Per-cell record in a certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    #[serde(rename = "box")]
    pub region: StateBox,
    #[serde(with = "crate::real")]
    pub rho: f64,
    pub status: Status,
    #[serde(default, with = "crate::real::option_vec", skip_serializing_if = "Option::is_none")]
    pub witness: Option<Vec<f64>>,
    #[serde(default, with = "crate::real::option", skip_serializing_if = "Option::is_none")]
    pub proven_sup: Option<f64>,
    pub boxes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub format: String,
    pub version: u32,
    pub spec_hash: String,
    pub route: Route,
    pub domain: StateBox,
    #[serde(with = "crate::real")]
    pub lambda: f64,
    #[serde(with = "crate::real")]
    pub gamma: f64,
    #[serde(with = "crate::real")]
    pub rho: f64,
    #[serde(with = "crate::real")]
    pub delta: f64,
    pub cells: Vec<CellRecord>,
    #[serde(default, with = "crate::real::option", skip_serializing_if = "Option::is_none")]
    pub varsigma: Option<f64>,
    #[serde(default, with = "crate::real::option", skip_serializing_if = "Option::is_none")]
    pub eps_pde: Option<f64>,
    #[serde(with = "crate::real")]
    pub eps_0: f64,
    #[serde(default, with = "crate::real::option", skip_serializing_if = "Option::is_none")]
    pub eps_val: Option<f64>,
    /// False when some cell is indeterminate.
    pub complete: bool,
}

impl Certificate {
    pub fn all_unsat(&self) -> bool {
        self.cells.iter().all(|c| c.status == Status::Unsat)
    }

    pub fn count(&self, status: Status) -> usize {
        self.cells.iter().filter(|c| c.status == status).count()
    }

    pub fn witnesses(&self) -> impl Iterator<Item = &[f64]> {
        self.cells.iter().filter_map(|c| c.witness.as_deref())
    }

    pub fn total_boxes(&self) -> u64 {
        self.cells.iter().map(|c| c.boxes).sum()
    }

    /// Largest proven supremum over UNSAT cells.
    pub fn max_proven_sup(&self) -> Option<f64> {
        self.cells
            .iter()
            .filter(|c| c.status == Status::Unsat)
            .filter_map(|c| c.proven_sup)
            .reduce(f64::max)
    }

    fn bound_kind(&self) -> BoundKind {
        match self.route {
            Route::A => BoundKind::Operator,
            Route::B => BoundKind::Pde,
        }
    }

    /// The certified residual bound, present iff every cell is UNSAT.
    pub fn bound(&self) -> Option<ResidualBound> {
        if !self.all_unsat() {
            return None;
        }
        Some(ResidualBound {
            kind: self.bound_kind(),
            varsigma: self.varsigma,
            eps_pde: self.eps_pde,
            eps_0: self.eps_0,
            domain: self.domain.clone(),
            tau_range: None,
        })
    }

    fn aggregate(cells: &[CellRecord]) -> Option<f64> {
        cells
            .iter()
            .filter(|c| c.status == Status::Unsat)
            .map(|c| c.rho)
            .reduce(f64::max)
    }

    fn recompute_eps_val(&self) -> Result<Option<f64>> {
        if !self.all_unsat() {
            return Ok(None);
        }
        let agg = Self::aggregate(&self.cells).ok_or_else(|| Error::Certificate("no cells".into()))?;
        let v = match self.route {
            Route::A => {
                if !(self.gamma > 0.0 && self.gamma < 1.0) {
                    return Err(Error::Certificate("gamma outside (0, 1)".into()));
                }
                agg / (1.0 - self.gamma)
            }
            Route::B => eps_val_from_slack(agg, self.eps_0, self.lambda)?,
        };
        Ok(Some(v))
    }

    /// Structural checks and recomputation of the derived fields.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Certificate(m));
        if self.format != CERTIFICATE_FORMAT {
            return bad(format!("unexpected format tag {:?}", self.format));
        }
        if self.version != CERTIFICATE_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: CERTIFICATE_VERSION,
            });
        }
        if self.cells.is_empty() {
            return bad("no cells".into());
        }
        for (i, c) in self.cells.iter().enumerate() {
            if !self.domain.contains_box(&c.region) {
                return bad(format!("cell {i} lies outside the domain"));
            }
            match c.status {
                Status::Unsat => {
                    if c.witness.is_some() || !matches!(c.proven_sup, Some(s) if s <= c.rho) {
                        return bad(format!("cell {i}: UNSAT needs proven_sup <= rho and no witness"));
                    }
                }
                Status::DeltaSat => {
                    if !matches!(&c.witness, Some(w) if c.region.contains(w)) {
                        return bad(format!("cell {i}: DELTA_SAT needs a witness inside the cell"));
                    }
                }
                Status::Indeterminate => {}
            }
        }
        let complete = self.count(Status::Indeterminate) == 0;
        if complete != self.complete {
            return bad("completeness flag disagrees with cell statuses".into());
        }
        let agg = Self::aggregate(&self.cells);
        let (expect_vs, expect_pde) = match self.route {
            Route::A => (agg, None),
            Route::B => (None, agg),
        };
        if self.varsigma != expect_vs || self.eps_pde != expect_pde {
            return bad("aggregated bound is not the max of UNSAT cell bounds".into());
        }
        if self.eps_0 != 0.0 {
            return bad("stationary certificates carry eps_0 = 0".into());
        }
        if self.recompute_eps_val()? != self.eps_val {
            return bad("eps_val does not match the route formula".into());
        }
        Ok(())
    }

    /// Checks that the certificate belongs to `spec`.
    pub fn check_spec(&self, spec: &ProblemSpec) -> Result<()> {
        if self.spec_hash != spec.hash() {
            return Err(Error::Certificate("spec hash mismatch".into()));
        }
        if self.lambda != spec.lambda || self.gamma != spec.gamma() {
            return Err(Error::Certificate("discount parameters differ from the spec".into()));
        }
        if let Some(b) = self.bound() {
            if Some(b.eps_val(spec)?) != self.eps_val {
                return Err(Error::Certificate("eps_val does not match the spec".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Certificate = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
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

/// Certification domain and residual expression for a route.
pub fn route_query(problem: &Problem, route: Route, value: &ExprTree) -> Result<(StateBox, ExprTree)> {
    match route {
        Route::A => Ok((problem.invariance_margin()?, bellman_defect_expr(problem, value)?)),
        Route::B => Ok((problem.spec.roi.clone(), stationary_residual_expr(problem, value)?)),
    }
}

/// Certifies a uniform bound `rho` on the route's residual over a regular
/// partition of its domain.
pub fn certify_roi(
    problem: &Problem,
    value: &ExprTree,
    route: Route,
    rho: f64,
    delta: f64,
    cells_per_axis: usize,
    opts: &CertifyOptions,
) -> Result<Certificate> {
    let (domain, expr) = route_query(problem, route, value)?;
    certify_expr(problem, &expr, &domain, route, rho, delta, cells_per_axis, opts)
}

/// [`certify_roi`] for an already composed residual expression.
#[allow(clippy::too_many_arguments)]
pub fn certify_expr(
    problem: &Problem,
    expr: &ExprTree,
    domain: &StateBox,
    route: Route,
    rho: f64,
    delta: f64,
    cells_per_axis: usize,
    opts: &CertifyOptions,
) -> Result<Certificate> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::InvalidArgument("rho must be finite and nonnegative".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument("delta must be positive".into()));
    }
    if domain.dim() > MAX_DIM {
        return Err(Error::InvalidArgument("domain has too many dimensions".into()));
    }
    let cells = partition_roi(domain, cells_per_axis, rho)?;
    let records: Vec<CellRecord> = cells
        .par_iter()
        .map(|cell| -> Result<CellRecord> {
            let rec = match certify_cell(expr, cell, delta, opts) {
                Ok(v) => CellRecord {
                    region: cell.region.clone(),
                    rho: cell.rho,
                    status: v.status,
                    witness: v.witness,
                    proven_sup: Some(v.proven_sup),
                    boxes: v.boxes,
                    reason: None,
                },
                Err(Error::Indeterminate { boxes, reason }) => CellRecord {
                    region: cell.region.clone(),
                    rho: cell.rho,
                    status: Status::Indeterminate,
                    witness: None,
                    proven_sup: None,
                    boxes,
                    reason: Some(reason),
                },
                Err(e) => return Err(e),
            };
            log::debug!("cell {:?}: {} after {} boxes", rec.region.lo, rec.status.as_str(), rec.boxes);
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    let agg = Certificate::aggregate(&records);
    let (varsigma, eps_pde) = match route {
        Route::A => (agg, None),
        Route::B => (None, agg),
    };
    let mut cert = Certificate {
        format: CERTIFICATE_FORMAT.into(),
        version: CERTIFICATE_VERSION,
        spec_hash: problem.spec.hash(),
        route,
        domain: domain.clone(),
        lambda: problem.spec.lambda,
        gamma: problem.gamma(),
        rho,
        delta,
        complete: records.iter().all(|r| r.status != Status::Indeterminate),
        cells: records,
        varsigma,
        eps_pde,
        eps_0: 0.0,
        eps_val: None,
    };
    if let Some(b) = cert.bound() {
        cert.eps_val = Some(match route {
            Route::A => eps_val_from_operator(b.varsigma.unwrap(), &problem.spec)?,
            Route::B => b.eps_val(&problem.spec)?,
        });
    }
    cert.validate()?;
    Ok(cert)
}
