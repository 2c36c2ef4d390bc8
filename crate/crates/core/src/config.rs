//! Problem constants and geometric primitives.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interval::Interval;

/// Version tag written into every serialized config.
pub const CONFIG_VERSION: u32 = 1;

/// Relative tolerance when checking a stored discount factor against
/// `exp(-lambda * sigma)`.
const GAMMA_CHECK_RTOL: f64 = 1e-12;

/// Per-step discount factor `exp(-lambda * sigma)`.
pub fn derive_gamma(lambda: f64, sigma: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidSpec(format!(
            "discount rate must be positive, got {lambda}"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidSpec(format!(
            "time step must be positive, got {sigma}"
        )));
    }
    let gamma = (-lambda * sigma).exp();
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidSpec(format!(
            "discount factor {gamma} is not inside (0, 1)"
        )));
    }
    Ok(gamma)
}

/// Axis-aligned box `[lo_0, hi_0] x ... x [lo_{n-1}, hi_{n-1}]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    #[serde(with = "crate::real::vec")]
    pub lo: Vec<f64>,
    #[serde(with = "crate::real::vec")]
    pub hi: Vec<f64>,
}

impl StateBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let b = StateBox { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn from_intervals(iv: &[Interval]) -> Self {
        StateBox {
            lo: iv.iter().map(|i| i.lo).collect(),
            hi: iv.iter().map(|i| i.hi).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() {
            return Err(Error::InvalidSpec(format!(
                "box bounds have mismatched or zero dimension ({} vs {})",
                self.lo.len(),
                self.hi.len()
            )));
        }
        for (i, (l, h)) in self.lo.iter().zip(&self.hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(Error::InvalidSpec(format!(
                    "box dimension {i} has invalid bounds [{l}, {h}]"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn max_width(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).fold(0.0, f64::max)
    }

    pub fn interval(&self, i: usize) -> Interval {
        Interval::new(self.lo[i], self.hi[i])
    }

    pub fn intervals(&self) -> Vec<Interval> {
        (0..self.dim()).map(|i| self.interval(i)).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.intervals().iter().map(Interval::mid).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| l <= v && v <= h)
    }

    pub fn contains_box(&self, other: &StateBox) -> bool {
        other.dim() == self.dim()
            && (0..self.dim()).all(|i| self.lo[i] <= other.lo[i] && other.hi[i] <= self.hi[i])
    }

    /// Projects `x` onto the box.
    pub fn clamp(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }

    /// Index of the widest dimension, lowest index on ties.
    pub fn widest_dim(&self) -> usize {
        let mut best = 0;
        for i in 1..self.dim() {
            if self.width(i) > self.width(best) {
                best = i;
            }
        }
        best
    }

    /// Bisects along `dim`; the children share the split coordinate exactly.
    pub fn split(&self, dim: usize) -> (StateBox, StateBox) {
        let (a, b) = self.interval(dim).bisect();
        let mut left = self.clone();
        let mut right = self.clone();
        left.hi[dim] = a.hi;
        right.lo[dim] = b.lo;
        (left, right)
    }

    /// Appends a dimension (used for the time axis of forward-mode cells).
    pub fn with_extra_dim(&self, iv: Interval) -> StateBox {
        let mut b = self.clone();
        b.lo.push(iv.lo);
        b.hi.push(iv.hi);
        b
    }
}

/// Goal-band running cost `h(x) = -alpha (r_g - |x|)` inside the target ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    #[serde(with = "crate::real")]
    pub alpha: f64,
    #[serde(with = "crate::real")]
    pub r_g: f64,
}

impl CostSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "cost scale must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.r_g > 0.0 && self.r_g.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "target radius must be positive, got {}",
                self.r_g
            )));
        }
        Ok(())
    }

    /// Largest magnitude the running cost can take.
    pub fn bound(&self) -> f64 {
        self.alpha * self.r_g
    }
}

/// Box of admissible controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    #[serde(with = "crate::real::vec")]
    pub lo: Vec<f64>,
    #[serde(with = "crate::real::vec")]
    pub hi: Vec<f64>,
}

impl ControlBox {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Largest absolute control value per channel.
    pub fn max_abs(&self, j: usize) -> f64 {
        self.lo[j].abs().max(self.hi[j].abs())
    }

    /// All `2^m` corner controls, enumerated with channel 0 varying fastest
    /// and `lo` before `hi`.
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let m = self.dim();
        (0..1usize << m)
            .map(|mask| {
                (0..m)
                    .map(|j| {
                        if mask >> j & 1 == 0 {
                            self.lo[j]
                        } else {
                            self.hi[j]
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.dim()
            && u
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| l <= v && v <= h)
    }
}

/// Everything that defines one discounted reach problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    #[serde(default = "default_version")]
    pub version: u32,
    /// Registry name of the dynamical system.
    pub system: String,
    #[serde(with = "crate::real")]
    pub lambda: f64,
    #[serde(with = "crate::real")]
    pub sigma: f64,
    #[serde(with = "crate::real")]
    pub horizon: f64,
    /// Stored `exp(-lambda * sigma)`; recomputed and compared on load.
    #[serde(default, with = "crate::real::option")]
    pub gamma: Option<f64>,
    pub control: ControlBox,
    pub roi: StateBox,
    pub cost: CostSpec,
    #[serde(default = "default_true")]
    pub stationary: bool,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_true() -> bool {
    true
}

impl ProblemSpec {
    /// Builds and validates a spec, filling in the discount factor.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        system: &str,
        lambda: f64,
        sigma: f64,
        horizon: f64,
        control: ControlBox,
        roi: StateBox,
        cost: CostSpec,
        stationary: bool,
    ) -> Result<Self> {
        let gamma = derive_gamma(lambda, sigma)?;
        let spec = ProblemSpec {
            version: CONFIG_VERSION,
            system: system.to_string(),
            lambda,
            sigma,
            horizon,
            gamma: Some(gamma),
            control,
            roi,
            cost,
            stationary,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Discount factor, always recomputed from `lambda` and `sigma`.
    pub fn gamma(&self) -> f64 {
        (-self.lambda * self.sigma).exp()
    }

    pub fn state_dim(&self) -> usize {
        self.roi.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: CONFIG_VERSION,
            });
        }
        let gamma = derive_gamma(self.lambda, self.sigma)?;
        if let Some(stored) = self.gamma {
            if (stored - gamma).abs() > GAMMA_CHECK_RTOL * gamma {
                return Err(Error::InvalidSpec(format!(
                    "stored discount factor {stored} disagrees with exp(-lambda*sigma) = {gamma}"
                )));
            }
        }
        if !(self.horizon >= self.sigma && self.horizon.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "horizon {} must be at least the step {}",
                self.horizon, self.sigma
            )));
        }
        let c = &self.control;
        if c.lo.is_empty() || c.lo.len() != c.hi.len() {
            return Err(Error::InvalidSpec("control bounds are malformed".into()));
        }
        for (j, (l, h)) in c.lo.iter().zip(&c.hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l < h) {
                return Err(Error::InvalidSpec(format!(
                    "control channel {j} needs lo < hi, got [{l}, {h}]"
                )));
            }
        }
        self.roi.validate()?;
        for i in 0..self.roi.dim() {
            if !(self.roi.width(i) > 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "region of interest has zero width in dimension {i}"
                )));
            }
        }
        self.cost.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut spec: ProblemSpec = serde_json::from_str(text)?;
        spec.validate()?;
        spec.gamma = Some(spec.gamma());
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.gamma = Some(self.gamma());
        let text = serde_json::to_string(&canonical).expect("spec serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::ExperimentConfig;
    use proptest::prelude::*;

    #[test]
    fn gamma_table_value() {
        let g = derive_gamma(1.0, 0.05).unwrap();
        assert!((g - 0.9512294245).abs() <= 1e-9);
        let g = derive_gamma(2.0, 0.5).unwrap();
        assert!((g - 0.3678794412).abs() <= 1e-9);
    }

    #[test]
    fn gamma_rejects_degenerate_inputs() {
        assert!(derive_gamma(1.0, 0.0).is_err());
        assert!(derive_gamma(0.0, 0.1).is_err());
        assert!(derive_gamma(-1.0, 0.1).is_err());
        assert!(derive_gamma(1.0, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn gamma_decreases_in_both_arguments(l in 0.01..5.0f64, s in 0.001..1.0f64, dl in 0.001..1.0f64, ds in 0.001..1.0f64) {
            let g = derive_gamma(l, s).unwrap();
            prop_assert!(g > 0.0 && g < 1.0);
            prop_assert!(derive_gamma(l + dl, s).unwrap() < g);
            prop_assert!(derive_gamma(l, s + ds).unwrap() < g);
        }

        #[test]
        fn splitting_tiles_the_parent(lo in -10.0..10.0f64, w0 in 0.001..5.0f64, w1 in 0.001..5.0f64, dim in 0usize..2) {
            let b = StateBox::new(vec![lo, -lo], vec![lo + w0, -lo + w1]).unwrap();
            let (l, r) = b.split(dim);
            prop_assert!(l.validate().is_ok() && r.validate().is_ok());
            prop_assert_eq!(l.hi[dim].to_bits(), r.lo[dim].to_bits());
            prop_assert_eq!(l.lo[dim].to_bits(), b.lo[dim].to_bits());
            prop_assert_eq!(r.hi[dim].to_bits(), b.hi[dim].to_bits());
            let other = 1 - dim;
            prop_assert_eq!(&l.lo[other], &b.lo[other]);
            prop_assert_eq!(&r.hi[other], &b.hi[other]);
        }
    }

    #[test]
    fn preset_loads_and_gamma_checked() {
        let cfg = ExperimentConfig::preset("double-integrator-paper").unwrap();
        let spec = &cfg.problem;
        assert_eq!(spec.lambda, 1.0);
        assert_eq!(spec.sigma, 0.05);
        assert_eq!(spec.roi.lo, vec![-2.5, -2.5]);
        assert!((spec.gamma() - 0.9512294245).abs() < 1e-9);

        let mut bad = spec.clone();
        bad.gamma = Some(0.95);
        let text = serde_json::to_string(&bad).unwrap();
        assert!(ProblemSpec::from_json(&text).is_err());
    }

    #[test]
    fn serialization_round_trips() {
        let spec = ExperimentConfig::preset("double-integrator-paper")
            .unwrap()
            .problem;
        let back = ProblemSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.hash(), spec.hash());
    }

    #[test]
    fn rejects_empty_control_box() {
        let spec = ExperimentConfig::preset("double-integrator-paper")
            .unwrap()
            .problem;
        let mut bad = spec.clone();
        bad.control.hi = vec![-1.0];
        assert!(bad.validate().is_err());
        let mut bad = spec;
        bad.roi.hi[0] = bad.roi.lo[0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn control_corners() {
        let c = ControlBox {
            lo: vec![-1.0, 0.0],
            hi: vec![1.0, 2.0],
        };
        assert_eq!(
            c.corners(),
            vec![
                vec![-1.0, 0.0],
                vec![1.0, 0.0],
                vec![-1.0, 2.0],
                vec![1.0, 2.0]
            ]
        );
    }
}
