//! Closed real intervals with outward rounding, and forward-mode duals over
//! them for interval Jacobians.
//!
//! Every operation returns an interval containing the exact real result for
//! all operand values, including floating-point rounding: endpoints are
//! pushed one ulp outward after each arithmetic operation and two ulps after
//! library transcendentals.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[inline]
fn down(x: f64) -> f64 {
    if x.is_finite() {
        x.next_down()
    } else {
        x
    }
}

#[inline]
fn up(x: f64) -> f64 {
    if x.is_finite() {
        x.next_up()
    } else {
        x
    }
}

#[derive(Clone, Copy, PartialEq)]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl fmt::Debug for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

impl Interval {
    pub const ENTIRE: Interval = Interval { lo: f64::NEG_INFINITY, hi: f64::INFINITY };

    /// Panics in debug builds when `lo > hi` or either endpoint is NaN.
    #[inline]
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "interval [{lo}, {hi}]");
        Self { lo, hi }
    }

    #[inline]
    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }

    #[inline]
    pub fn lo(&self) -> f64 {
        self.lo
    }

    #[inline]
    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * self.lo + 0.5 * self.hi
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn is_subset_of(&self, other: &Interval) -> bool {
        other.lo <= self.lo && self.hi <= other.hi
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval { lo: self.lo.min(other.lo), hi: self.hi.max(other.hi) }
    }

    /// `None` when the intervals are disjoint.
    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then_some(Interval { lo, hi })
    }

    pub fn is_finite(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn contains_zero(&self) -> bool {
        self.lo <= 0.0 && 0.0 <= self.hi
    }

    /// `self * k` for a real constant.
    pub fn scale(&self, k: f64) -> Interval {
        let (a, b) = (self.lo * k, self.hi * k);
        Interval { lo: down(a.min(b)), hi: up(a.max(b)) }
    }

    pub fn sqr(&self) -> Interval {
        let (a, b) = (self.lo * self.lo, self.hi * self.hi);
        if self.contains_zero() {
            Interval { lo: 0.0, hi: up(a.max(b)) }
        } else {
            Interval { lo: down(a.min(b)).max(0.0), hi: up(a.max(b)) }
        }
    }

    fn pad_unit(lo: f64, hi: f64) -> Interval {
        Interval { lo: down(down(lo)).max(-1.0), hi: up(up(hi)).min(1.0) }
    }

    /// Whether `self` may contain a point `phase + k * 2pi` for some integer k.
    fn may_contain_phase(&self, phase: f64) -> bool {
        const SLACK: f64 = 1e-9;
        let k = ((self.lo - phase) / TAU - SLACK).ceil();
        k <= (self.hi - phase) / TAU + SLACK
    }

    pub fn sin(&self) -> Interval {
        if !self.is_finite() || self.width() >= TAU {
            return Interval::new(-1.0, 1.0);
        }
        let (a, b) = (self.lo.sin(), self.hi.sin());
        let mut r = Self::pad_unit(a.min(b), a.max(b));
        if self.may_contain_phase(FRAC_PI_2) {
            r.hi = 1.0;
        }
        if self.may_contain_phase(-FRAC_PI_2) {
            r.lo = -1.0;
        }
        r
    }

    pub fn cos(&self) -> Interval {
        if !self.is_finite() || self.width() >= TAU {
            return Interval::new(-1.0, 1.0);
        }
        let (a, b) = (self.lo.cos(), self.hi.cos());
        let mut r = Self::pad_unit(a.min(b), a.max(b));
        if self.may_contain_phase(0.0) {
            r.hi = 1.0;
        }
        if self.may_contain_phase(PI) {
            r.lo = -1.0;
        }
        r
    }

    pub fn clip(&self, lo: f64, hi: f64) -> Interval {
        Interval { lo: self.lo.clamp(lo, hi), hi: self.hi.clamp(lo, hi) }
    }

    pub fn sigmoid(&self) -> Interval {
        Interval { lo: down(down(sigmoid(self.lo))).max(0.0), hi: up(up(sigmoid(self.hi))).min(1.0) }
    }

    pub fn tanh(&self) -> Interval {
        Interval { lo: down(down(self.lo.tanh())).max(-1.0), hi: up(up(self.hi.tanh())).min(1.0) }
    }

    pub fn relu(&self) -> Interval {
        Interval { lo: self.lo.max(0.0), hi: self.hi.max(0.0) }
    }

    /// Widens both endpoints by `r >= 0`, rounding outward.
    pub fn inflate(&self, r: f64) -> Interval {
        Interval { lo: down(self.lo - r), hi: up(self.hi + r) }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Add for Interval {
    type Output = Interval;
    #[inline]
    fn add(self, o: Interval) -> Interval {
        Interval { lo: down(self.lo + o.lo), hi: up(self.hi + o.hi) }
    }
}

impl Sub for Interval {
    type Output = Interval;
    #[inline]
    fn sub(self, o: Interval) -> Interval {
        Interval { lo: down(self.lo - o.hi), hi: up(self.hi - o.lo) }
    }
}

impl Neg for Interval {
    type Output = Interval;
    #[inline]
    fn neg(self) -> Interval {
        Interval { lo: -self.hi, hi: -self.lo }
    }
}

impl Mul for Interval {
    type Output = Interval;
    fn mul(self, o: Interval) -> Interval {
        let p = [self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi];
        // 0 * inf yields NaN; the product with a zero endpoint contributes 0.
        let fix = |v: f64| if v.is_nan() { 0.0 } else { v };
        let lo = p.iter().copied().map(fix).fold(f64::INFINITY, f64::min);
        let hi = p.iter().copied().map(fix).fold(f64::NEG_INFINITY, f64::max);
        Interval { lo: down(lo), hi: up(hi) }
    }
}

impl Div for Interval {
    type Output = Interval;
    fn div(self, o: Interval) -> Interval {
        if o.contains_zero() {
            return Interval::ENTIRE;
        }
        let p = [self.lo / o.lo, self.lo / o.hi, self.hi / o.lo, self.hi / o.hi];
        let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Interval { lo: down(lo), hi: up(hi) }
    }
}

/// First-order forward-mode dual number over intervals with `N` seeds.
///
/// `smooth` turns false once the value passes through a point where the
/// represented function may be discontinuous; derivative enclosures are
/// meaningless after that.
#[derive(Debug, Clone, Copy)]
pub struct Dual<const N: usize> {
    pub v: Interval,
    pub d: [Interval; N],
    pub smooth: bool,
}

impl<const N: usize> Dual<N> {
    pub fn constant(v: Interval) -> Self {
        Self { v, d: [Interval::point(0.0); N], smooth: true }
    }

    /// The `i`-th independent variable ranging over `v`.
    pub fn variable(v: Interval, i: usize) -> Self {
        let mut d = [Interval::point(0.0); N];
        d[i] = Interval::point(1.0);
        Self { v, d, smooth: true }
    }

    /// Applies the chain rule with an enclosure `g` of the outer derivative.
    pub fn chain(&self, v: Interval, g: Interval) -> Self {
        let mut d = self.d;
        for di in &mut d {
            *di = g * *di;
        }
        Self { v, d, smooth: self.smooth }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a = *a + b;
        }
        Self { v: self.v + o.v, d, smooth: self.smooth && o.smooth }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a = *a - b;
        }
        Self { v: self.v - o.v, d, smooth: self.smooth && o.smooth }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        let mut d = self.d;
        for a in &mut d {
            *a = -*a;
        }
        Self { v: -self.v, d, smooth: self.smooth }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a = *a * o.v + self.v * b;
        }
        Self { v: self.v * o.v, d, smooth: self.smooth && o.smooth }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.v / o.v;
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a = (*a - q * b) / o.v;
        }
        Self { v: q, d, smooth: self.smooth && o.smooth }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv() -> impl Strategy<Value = Interval> {
        (-10.0..10.0f64, 0.0..4.0f64).prop_map(|(a, w)| Interval::new(a, a + w))
    }

    fn sample(i: Interval, t: f64) -> f64 {
        (i.lo() + t * i.width()).min(i.hi())
    }

    proptest! {
        #[test]
        fn arithmetic_contains_samples(a in iv(), b in iv(), s in 0.0..=1.0f64, t in 0.0..=1.0f64) {
            let (x, y) = (sample(a, s), sample(b, t));
            prop_assert!((a + b).contains(x + y));
            prop_assert!((a - b).contains(x - y));
            prop_assert!((a * b).contains(x * y));
            prop_assert!(a.sqr().contains(x * x));
            prop_assert!(a.scale(-2.5).contains(-2.5 * x));
            if !b.contains_zero() {
                prop_assert!((a / b).contains(x / y));
            }
        }

        #[test]
        fn transcendental_contains_samples(a in iv(), s in 0.0..=1.0f64) {
            let x = sample(a, s);
            prop_assert!(a.sin().contains(x.sin()));
            prop_assert!(a.cos().contains(x.cos()));
            prop_assert!(a.tanh().contains(x.tanh()));
            prop_assert!(a.sigmoid().contains(sigmoid(x)));
            prop_assert!(a.clip(-1.0, 1.0).contains(x.clamp(-1.0, 1.0)));
        }

        #[test]
        fn inclusion_monotone(a in iv(), grow in 0.0..1.0f64) {
            let big = a.inflate(grow);
            prop_assert!(a.sin().is_subset_of(&big.sin()));
            prop_assert!(a.sqr().is_subset_of(&big.sqr()));
        }
    }

    #[test]
    fn sin_hits_extrema() {
        let r = Interval::new(1.0, 2.0).sin();
        assert_eq!(r.hi(), 1.0);
        let r = Interval::new(3.0, 3.5).cos();
        assert_eq!(r.lo(), -1.0);
        assert!(Interval::new(0.1, 0.2).sin().hi() < 0.2);
    }

    #[test]
    fn division_by_zero_straddle_is_entire() {
        let r = Interval::new(1.0, 2.0) / Interval::new(-1.0, 1.0);
        assert_eq!(r, Interval::ENTIRE);
    }

    #[test]
    fn dual_quotient_derivative_encloses_true_slope() {
        // f(x) = x / (1 + x^2) on [0.2, 0.4]; f'(x) = (1 - x^2) / (1 + x^2)^2.
        let x = Dual::<1>::variable(Interval::new(0.2, 0.4), 0);
        let one = Dual::constant(Interval::point(1.0));
        let f = x / (one + x * x);
        for k in 0..=10 {
            let t = 0.2 + 0.02 * f64::from(k);
            let exact = (1.0 - t * t) / (1.0 + t * t).powi(2);
            assert!(f.d[0].contains(exact));
            assert!(f.v.contains(t / (1.0 + t * t)));
        }
    }
}
