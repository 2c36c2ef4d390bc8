//! Closed real intervals with outward rounding.
//!
//! Every primitive pushes an inexact endpoint one representable double
//! outward; exactness is detected with error-free transformations, so exact
//! results such as `1 * 1` stay put. Transcendental functions get
//! a wider absolute pad because libm is not correctly rounded.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Absolute pad applied around libm results of `sin`/`cos`, whose values lie
/// in `[-1, 1]`; several ulps of 1.0.
const TRIG_PAD: f64 = 4.0 * f64::EPSILON;

#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    #[serde(with = "crate::real")]
    pub lo: f64,
    #[serde(with = "crate::real")]
    pub hi: f64,
}

#[inline]
fn down(x: f64) -> f64 {
    x.next_down()
}

#[inline]
fn up(x: f64) -> f64 {
    x.next_up()
}

/// Below this magnitude the error-free transformations may lose bits.
const EXACT_MIN: f64 = 1e-250;

/// `a + b` and the exact rounding error (TwoSum).
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn sum_down(a: f64, b: f64) -> f64 {
    let (s, e) = two_sum(a, b);
    if e < 0.0 || !e.is_finite() { down(s) } else { s }
}

#[inline]
fn sum_up(a: f64, b: f64) -> f64 {
    let (s, e) = two_sum(a, b);
    if e > 0.0 || !e.is_finite() { up(s) } else { s }
}

/// Below this magnitude Dekker splitting cannot overflow.
const SPLIT_MAX: f64 = 1e290;

#[inline]
fn split(a: f64) -> (f64, f64) {
    let t = 134_217_729.0 * a;
    let hi = t - (t - a);
    (hi, a - hi)
}

/// `a * b` and the exact rounding error (Dekker's product); `None` when
/// underflow or overflow could make the error inexact.
#[inline]
fn two_prod(a: f64, b: f64) -> Option<(f64, f64)> {
    let p = a * b;
    if p.abs() < EXACT_MIN || a.abs() > SPLIT_MAX || b.abs() > SPLIT_MAX || !p.is_finite() {
        return None;
    }
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    let e = ((ah * bh - p) + ah * bl + al * bh) + al * bl;
    Some((p, e))
}

#[inline]
fn prod_down(a: f64, b: f64) -> f64 {
    match two_prod(a, b) {
        Some((p, e)) if e >= 0.0 => p,
        Some((p, _)) => down(p),
        None => down(a * b),
    }
}

#[inline]
fn prod_up(a: f64, b: f64) -> f64 {
    match two_prod(a, b) {
        Some((p, e)) if e <= 0.0 => p,
        Some((p, _)) => up(p),
        None => up(a * b),
    }
}

impl Interval {
    /// Panics if the endpoints are not ordered or are not finite.
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(
            lo <= hi && lo.is_finite() && hi.is_finite(),
            "invalid interval [{lo}, {hi}]"
        );
        Interval { lo, hi }
    }

    pub fn try_new(lo: f64, hi: f64) -> Option<Self> {
        (lo <= hi && lo.is_finite() && hi.is_finite()).then_some(Interval { lo, hi })
    }

    pub const fn point(x: f64) -> Self {
        Interval { lo: x, hi: x }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        let m = 0.5 * self.lo + 0.5 * self.hi;
        m.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    /// Largest absolute value in the interval.
    pub fn mag(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    /// Smallest absolute value in the interval.
    pub fn mig(&self) -> f64 {
        if self.lo > 0.0 {
            self.lo
        } else if self.hi < 0.0 {
            -self.hi
        } else {
            0.0
        }
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        Interval::try_new(self.lo.max(other.lo), self.hi.min(other.hi))
    }

    /// Splits at the midpoint; both halves share the midpoint bit-exactly.
    pub fn bisect(&self) -> (Interval, Interval) {
        let m = self.mid();
        (
            Interval { lo: self.lo, hi: m },
            Interval { lo: m, hi: self.hi },
        )
    }

    pub fn sqr(self) -> Interval {
        let a = self.mig();
        let b = self.mag();
        let lo = if a == 0.0 { 0.0 } else { prod_down(a, a).max(0.0) };
        Interval { lo, hi: prod_up(b, b) }
    }

    /// Square root on the nonnegative part of the interval.
    pub fn sqrt(self) -> Interval {
        let lo = self.lo.max(0.0);
        let hi = self.hi.max(0.0);
        let slo = if lo == 0.0 { 0.0 } else { down(lo.sqrt()).max(0.0) };
        Interval {
            lo: slo,
            hi: up(hi.sqrt()),
        }
    }

    pub fn abs(self) -> Interval {
        Interval {
            lo: self.mig(),
            hi: self.mag(),
        }
    }

    pub fn min(self, other: Interval) -> Interval {
        Interval {
            lo: self.lo.min(other.lo),
            hi: self.hi.min(other.hi),
        }
    }

    pub fn max(self, other: Interval) -> Interval {
        Interval {
            lo: self.lo.max(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    /// Range of `sin` over the interval by locating contained extrema.
    pub fn sin(self) -> Interval {
        sin_range(self.lo, self.hi, 0.0)
    }

    /// Range of `cos`, using `cos(x) = sin(x + π/2)` for the extremum search.
    pub fn cos(self) -> Interval {
        sin_range(self.lo, self.hi, FRAC_PI_2)
    }

    pub fn scale(self, k: f64) -> Interval {
        self * Interval::point(k)
    }
}

/// Range of `sin(x + shift)` over `[lo, hi]`, where the shift only moves the
/// critical points; endpoint values are evaluated with the matching libm
/// function to avoid rounding the shifted argument.
fn sin_range(lo: f64, hi: f64, shift: f64) -> Interval {
    const FULL: Interval = Interval { lo: -1.0, hi: 1.0 };
    if !(hi - lo < TAU) || lo.abs() > 1e9 || hi.abs() > 1e9 {
        return FULL;
    }
    let f = |x: f64| if shift == 0.0 { x.sin() } else { x.cos() };
    let (a, b) = (f(lo), f(hi));
    let mut out_lo = (a.min(b) - TRIG_PAD).max(-1.0);
    let mut out_hi = (a.max(b) + TRIG_PAD).min(1.0);
    // Maxima of sin(x + shift) sit at x = π/2 - shift + 2πk, minima at
    // x = -π/2 - shift + 2πk. A small slack on k keeps the test conservative
    // when an extremum lies within rounding distance of an endpoint.
    let slack = 1e-9;
    let contains = |phase: f64| {
        let kmin = ((lo - phase) / TAU - slack).ceil();
        let kmax = ((hi - phase) / TAU + slack).floor();
        kmin <= kmax
    };
    if contains(FRAC_PI_2 - shift) {
        out_hi = 1.0;
    }
    if contains(-FRAC_PI_2 - shift) {
        out_lo = -1.0;
    }
    Interval {
        lo: out_lo,
        hi: out_hi,
    }
}

impl Add for Interval {
    type Output = Interval;
    fn add(self, rhs: Interval) -> Interval {
        Interval {
            lo: sum_down(self.lo, rhs.lo),
            hi: sum_up(self.hi, rhs.hi),
        }
    }
}

impl Sub for Interval {
    type Output = Interval;
    fn sub(self, rhs: Interval) -> Interval {
        Interval {
            lo: sum_down(self.lo, -rhs.hi),
            hi: sum_up(self.hi, -rhs.lo),
        }
    }
}

impl Neg for Interval {
    type Output = Interval;
    fn neg(self) -> Interval {
        Interval {
            lo: -self.hi,
            hi: -self.lo,
        }
    }
}

impl Mul for Interval {
    type Output = Interval;
    fn mul(self, rhs: Interval) -> Interval {
        // A product with an exact zero factor is exact; anything else is
        // rounded outward, including results that underflowed to zero.
        let pairs = [
            (self.lo, rhs.lo),
            (self.lo, rhs.hi),
            (self.hi, rhs.lo),
            (self.hi, rhs.hi),
        ];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (a, b) in pairs {
            if a == 0.0 || b == 0.0 {
                lo = lo.min(0.0);
                hi = hi.max(0.0);
            } else {
                lo = lo.min(prod_down(a, b));
                hi = hi.max(prod_up(a, b));
            }
        }
        Interval { lo, hi }
    }
}

impl fmt::Debug for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:e}, {:e}]", self.lo, self.hi)
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn interval() -> impl Strategy<Value = Interval> {
        (-50.0..50.0f64, 0.0..20.0f64).prop_map(|(a, w)| Interval::new(a, a + w))
    }

    fn sample(i: Interval, t: f64) -> f64 {
        (i.lo + t * (i.hi - i.lo)).clamp(i.lo, i.hi)
    }

    #[test]
    fn exact_results_are_not_widened() {
        let three = Interval::point(1.5) * Interval::point(2.0);
        assert_eq!(three, Interval::point(3.0));
        assert_eq!(Interval::point(0.5) + Interval::point(0.25), Interval::point(0.75));
        let t = Interval::point(0.1) * Interval::point(0.1);
        assert_eq!(t.hi, t.lo.next_up());
        let s = Interval::point(0.1) + Interval::point(0.2);
        assert_eq!(s.hi, s.lo.next_up());
    }

    #[test]
    fn square_is_tight_around_zero() {
        let i = Interval::new(-1.0, 1.0);
        assert_eq!(i.sqr(), Interval::new(0.0, 1.0));
        let nat = i * i;
        assert!(nat.lo <= -1.0);
    }

    #[test]
    fn sin_quarter_and_full_period() {
        let q = Interval::new(0.0, FRAC_PI_2).sin();
        assert!(q.lo <= 0.0 && q.lo > -1e-14);
        assert_eq!(q.hi, 1.0);
        let full = Interval::new(0.0, TAU).sin();
        assert_eq!(full, Interval::new(-1.0, 1.0));
    }

    #[test]
    fn cos_contains_extrema() {
        let c = Interval::new(-0.1, 0.1).cos();
        assert_eq!(c.hi, 1.0);
        assert!(c.lo < 0.1f64.cos());
        let c = Interval::new(3.0, 3.3).cos();
        assert_eq!(c.lo, -1.0);
    }

    #[test]
    fn sqrt_clamps_negative_part() {
        let s = Interval::new(-1.0, 4.0).sqrt();
        assert_eq!(s.lo, 0.0);
        assert!(s.hi >= 2.0);
    }

    proptest! {
        #[test]
        fn arithmetic_encloses_pointwise(a in interval(), b in interval(), s in 0.0..1.0f64, t in 0.0..1.0f64) {
            let x = sample(a, s);
            let y = sample(b, t);
            prop_assert!((a + b).contains(x + y));
            prop_assert!((a - b).contains(x - y));
            prop_assert!((a * b).contains(x * y));
            prop_assert!(a.sqr().contains(x * x));
            prop_assert!(a.sin().contains(x.sin()));
            prop_assert!(a.cos().contains(x.cos()));
            prop_assert!(a.abs().contains(x.abs()));
            prop_assert!(a.min(b).contains(x.min(y)));
            prop_assert!(a.max(b).contains(x.max(y)));
            prop_assert!(a.sqrt().contains(x.max(0.0).sqrt()));
        }

        #[test]
        fn bisection_reuses_endpoints(a in interval()) {
            let (l, r) = a.bisect();
            prop_assert_eq!(l.lo.to_bits(), a.lo.to_bits());
            prop_assert_eq!(l.hi.to_bits(), r.lo.to_bits());
            prop_assert_eq!(r.hi.to_bits(), a.hi.to_bits());
            prop_assert!(l.lo <= l.hi && r.lo <= r.hi);
        }
    }
}
