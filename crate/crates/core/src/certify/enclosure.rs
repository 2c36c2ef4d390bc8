//! Enclosures combining first-order affine forms with natural intervals.
//!
//! An [`Affine`] value is `c + sum_i g_i e_i + r xi` with noise symbols
//! `e_i, xi` in `[-1, 1]`, one `e_i` per box dimension. Linear structure is
//! carried exactly, so enclosure error shrinks quadratically with box width
//! where the natural extension shrinks only linearly. Every operation adds
//! its own floating-point rounding error into `r`, rounding upward.

use crate::dynamics::MAX_DIM;
use crate::expr::Domain;
use crate::interval::Interval;

/// Noise symbols: state dimensions plus one for time-to-go.
pub const NOISE: usize = MAX_DIM + 1;

const U: f64 = f64::EPSILON;
/// Absolute error allowance for libm `sin`/`cos` results.
const TRIG_ERR: f64 = 4.0 * f64::EPSILON;
/// Guards against underflow in the relative rounding bounds.
const TINY: f64 = 4.0 * f64::MIN_POSITIVE;

#[inline]
fn up(x: f64) -> f64 {
    x.next_up()
}

/// `a + b` rounded upward, for nonnegative error terms.
#[inline]
fn add_up(a: f64, b: f64) -> f64 {
    up(a + b)
}

/// `a * b` rounded upward, for nonnegative factors.
#[inline]
fn mul_up(a: f64, b: f64) -> f64 {
    up(a * b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub c: f64,
    pub g: [f64; NOISE],
    pub r: f64,
}

impl Affine {
    pub fn constant(v: f64) -> Self {
        Affine {
            c: v,
            g: [0.0; NOISE],
            r: 0.0,
        }
    }

    /// The identity on `iv` along noise symbol `index`.
    pub fn var(iv: Interval, index: usize) -> Self {
        let c = iv.mid();
        let mut g = [0.0; NOISE];
        g[index] = up((iv.hi - c).max(c - iv.lo));
        Affine { c, g, r: 0.0 }
    }

    /// Sum of `|g_i|` and `r`, rounded upward.
    pub fn radius(&self) -> f64 {
        let mut s = self.r;
        for g in self.g {
            s = add_up(s, g.abs());
        }
        s
    }

    pub fn is_finite(&self) -> bool {
        self.c.is_finite() && self.r.is_finite() && self.g.iter().all(|g| g.is_finite())
    }

    pub fn range(&self) -> Option<Interval> {
        let rad = self.radius();
        Interval::try_new((self.c - rad).next_down(), (self.c + rad).next_up())
    }

    /// Rounding allowance for a freshly computed form whose terms were
    /// formed from partial results of magnitude at most `mag`.
    fn rounding(c: f64, g: &[f64; NOISE], mag: f64) -> f64 {
        let mut s = c.abs() + mag;
        for v in g {
            s += v.abs();
        }
        up(2.0 * U * up(s) + TINY)
    }

    fn with_error(c: f64, g: [f64; NOISE], r: f64, mag: f64) -> Self {
        let r = add_up(r, Self::rounding(c, &g, mag));
        Affine { c, g, r }
    }

    pub fn add(&self, o: &Affine) -> Affine {
        let mut g = [0.0; NOISE];
        for i in 0..NOISE {
            g[i] = self.g[i] + o.g[i];
        }
        Self::with_error(self.c + o.c, g, add_up(self.r, o.r), 0.0)
    }

    pub fn neg(&self) -> Affine {
        let mut g = self.g;
        for v in &mut g {
            *v = -*v;
        }
        Affine {
            c: -self.c,
            g,
            r: self.r,
        }
    }

    pub fn sub(&self, o: &Affine) -> Affine {
        self.add(&o.neg())
    }

    pub fn scale(&self, k: f64) -> Affine {
        let mut g = [0.0; NOISE];
        for i in 0..NOISE {
            g[i] = k * self.g[i];
        }
        Self::with_error(k * self.c, g, mul_up(k.abs(), self.r), 0.0)
    }

    /// `self + k`.
    pub fn shift(&self, k: f64) -> Affine {
        Self::with_error(self.c + k, self.g, self.r, 0.0)
    }

    pub fn mul(&self, o: &Affine) -> Affine {
        if self.radius() == 0.0 {
            return o.scale(self.c);
        }
        if o.radius() == 0.0 {
            return self.scale(o.c);
        }
        let mut g = [0.0; NOISE];
        let mut mag = 0.0;
        for i in 0..NOISE {
            let p = self.c * o.g[i];
            let q = o.c * self.g[i];
            g[i] = p + q;
            mag += p.abs() + q.abs();
        }
        let quad = mul_up(self.radius(), o.radius());
        let r = add_up(
            add_up(mul_up(self.c.abs(), o.r), mul_up(o.c.abs(), self.r)),
            quad,
        );
        Self::with_error(self.c * o.c, g, r, mag)
    }

    pub fn sqr(&self) -> Affine {
        // (c + L)^2 with L in [-rad, rad]: c^2 + 2 c L + L^2, and L^2 in [0, rad^2].
        let rad = self.radius();
        let half_sq = up(mul_up(rad, rad) * 0.5);
        let mut g = [0.0; NOISE];
        for i in 0..NOISE {
            g[i] = 2.0 * self.c * self.g[i];
        }
        let c = self.c * self.c + half_sq;
        let r = add_up(mul_up(2.0 * self.c.abs(), self.r), half_sq);
        Self::with_error(c, g, r, self.c * self.c + half_sq)
    }

    /// Linearization of a smooth function at the center. `value` and
    /// `slope` are `f(c)` and `f'(c)` with absolute errors at most
    /// `value_err` and `slope_err`; `curv` bounds `|f''|` over `iv`, which
    /// must contain every value of `self` and the center.
    fn linearize(&self, iv: Interval, value: f64, value_err: f64, slope: f64, slope_err: f64, curv: f64) -> Affine {
        let dist = (iv.hi - self.c).max(self.c - iv.lo).max(0.0);
        let dist = up(dist).min(self.radius());
        let rem = up(mul_up(mul_up(dist, dist), curv) * 0.5);
        let mut g = [0.0; NOISE];
        let mut mag = 0.0;
        for i in 0..NOISE {
            g[i] = slope * self.g[i];
            mag += g[i].abs();
        }
        let r = add_up(
            add_up(mul_up(slope.abs(), self.r), rem),
            add_up(value_err, mul_up(slope_err, self.radius())),
        );
        Self::with_error(value, g, r, mag)
    }

    pub fn from_interval(iv: Interval) -> Affine {
        let c = iv.mid();
        let r = up((iv.hi - c).max(c - iv.lo));
        Affine {
            c,
            g: [0.0; NOISE],
            r,
        }
    }

    fn radius_of(iv: &Interval) -> f64 {
        up(iv.width() * 0.5)
    }

    /// `max(x, 0)` over values known to lie in `iv`.
    fn relu(&self, iv: Interval) -> Affine {
        if iv.lo >= 0.0 {
            return *self;
        }
        if iv.hi <= 0.0 {
            return Affine::constant(0.0);
        }
        // Chord relaxation: relu(x) in lam x + mu +- mu.
        let (l, h) = (iv.lo, iv.hi);
        let lam = h / (h - l);
        let mu = up(up(-lam * l) * 0.5 * (1.0 + 4.0 * U));
        let lam_err = 4.0 * U * lam;
        let scaled = self.scale(lam);
        let slope_err = mul_up(lam_err, self.c.abs() + self.radius());
        let mut out = scaled.shift(mu);
        out.r = add_up(add_up(out.r, mu), slope_err);
        out
    }

    /// Keeps the affine form unless it is much wider than `iv`; a slightly
    /// wider form is still worth its correlations.
    fn tighter(self, iv: Interval) -> Affine {
        if !self.is_finite() || self.radius() > 1.5 * Self::radius_of(&iv) {
            Affine::from_interval(iv)
        } else {
            self
        }
    }
}

/// A value enclosed both ways; intervals are intersected after every step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Enclosure {
    pub iv: Interval,
    pub af: Affine,
}

impl Enclosure {
    pub fn var(iv: Interval, index: usize) -> Self {
        Enclosure {
            iv,
            af: Affine::var(iv, index),
        }
    }

    /// Pairs `iv` with `af`, shrinking `iv` to the affine range.
    pub(crate) fn tighten(iv: Interval, af: Affine) -> Self {
        let iv = match af.range().and_then(|r| r.intersect(&iv)) {
            Some(t) => t,
            None => iv,
        };
        Enclosure { iv, af }
    }
}

impl Domain for Enclosure {
    fn constant(v: f64) -> Self {
        Enclosure {
            iv: Interval::point(v),
            af: Affine::constant(v),
        }
    }

    fn add(&self, o: &Self) -> Self {
        Self::tighten(self.iv + o.iv, self.af.add(&o.af))
    }

    fn sub(&self, o: &Self) -> Self {
        Self::tighten(self.iv - o.iv, self.af.sub(&o.af))
    }

    fn mul(&self, o: &Self) -> Self {
        Self::tighten(self.iv * o.iv, self.af.mul(&o.af))
    }

    fn neg(&self) -> Self {
        Enclosure {
            iv: -self.iv,
            af: self.af.neg(),
        }
    }

    fn sin(&self) -> Self {
        let range = self.iv.sin();
        if self.iv.width() == 0.0 && self.af.radius() == 0.0 {
            return Self::tighten(range, Affine::from_interval(range));
        }
        let (s, c) = self.af.c.sin_cos();
        let af = if self.iv.contains(self.af.c) {
            self.af
                .linearize(self.iv, s, TRIG_ERR, c, TRIG_ERR, range.mag())
                .tighter(range)
        } else {
            Affine::from_interval(range)
        };
        Self::tighten(range, af)
    }

    fn cos(&self) -> Self {
        let range = self.iv.cos();
        if self.iv.width() == 0.0 && self.af.radius() == 0.0 {
            return Self::tighten(range, Affine::from_interval(range));
        }
        let (s, c) = self.af.c.sin_cos();
        let af = if self.iv.contains(self.af.c) {
            self.af
                .linearize(self.iv, c, TRIG_ERR, -s, TRIG_ERR, range.mag())
                .tighter(range)
        } else {
            Affine::from_interval(range)
        };
        Self::tighten(range, af)
    }

    fn sqr(&self) -> Self {
        let range = self.iv.sqr();
        Self::tighten(range, self.af.sqr().tighter(range))
    }

    fn sqrt(&self) -> Self {
        let range = self.iv.sqrt();
        let af = if self.iv.lo > 0.0 && self.iv.contains(self.af.c) {
            let s = self.af.c.sqrt();
            let slope = 0.5 / s;
            // |f''| = x^(-3/2) / 4, largest at the lower end.
            let lo = self.iv.lo;
            let curv = up(0.25 / (lo * lo.sqrt()).next_down());
            self.af
                .linearize(self.iv, s, U * s, slope, 4.0 * U * slope, curv)
                .tighter(range)
        } else {
            Affine::from_interval(range)
        };
        Self::tighten(range, af)
    }

    fn abs(&self) -> Self {
        let range = self.iv.abs();
        let af = if self.iv.lo >= 0.0 {
            self.af
        } else if self.iv.hi <= 0.0 {
            self.af.neg()
        } else {
            // |x| = 2 relu(x) - x.
            self.af.relu(self.iv).scale(2.0).sub(&self.af).tighter(range)
        };
        Self::tighten(range, af)
    }

    fn min(&self, o: &Self) -> Self {
        let range = self.iv.min(o.iv);
        // min(a, b) = a - relu(a - b).
        let d = Self::tighten(self.iv - o.iv, self.af.sub(&o.af));
        let af = self.af.sub(&d.af.relu(d.iv)).tighter(range);
        Self::tighten(range, af)
    }

    fn max(&self, o: &Self) -> Self {
        let range = self.iv.max(o.iv);
        // max(a, b) = a + relu(b - a).
        let d = Self::tighten(o.iv - self.iv, o.af.sub(&self.af));
        let af = self.af.add(&d.af.relu(d.iv)).tighter(range);
        Self::tighten(range, af)
    }
}
