//! Number types the dynamics are written over: plain floats for simulation,
//! intervals for the natural extension and interval duals for the
//! mean-value form.

use crate::interval::{Dual, Interval};
use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(x: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn clip(self, lo: f64, hi: f64) -> Self;

    /// Velocity after an inelastic wall at `pos == wall`: a negative velocity
    /// becomes zero when the position sits on the wall.
    fn wall_reset(pos: Self, vel: Self, wall: f64) -> Self;

    #[inline]
    fn scale(self, k: f64) -> Self {
        self * Self::cst(k)
    }

    #[inline]
    fn sqr(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(x: f64) -> Self {
        x
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn clip(self, lo: f64, hi: f64) -> Self {
        self.clamp(lo, hi)
    }
    #[inline]
    fn wall_reset(pos: Self, vel: Self, wall: f64) -> Self {
        if pos <= wall && vel < 0.0 {
            0.0
        } else {
            vel
        }
    }
}

fn interval_wall_reset(pos: Interval, vel: Interval, wall: f64) -> Interval {
    if pos.lo() > wall || vel.lo() >= 0.0 {
        vel
    } else if pos.hi() <= wall {
        vel.relu()
    } else {
        Interval::new(vel.lo(), vel.hi().max(0.0))
    }
}

impl Scalar for Interval {
    fn cst(x: f64) -> Self {
        Interval::point(x)
    }
    fn sin(self) -> Self {
        Interval::sin(&self)
    }
    fn cos(self) -> Self {
        Interval::cos(&self)
    }
    fn clip(self, lo: f64, hi: f64) -> Self {
        Interval::clip(&self, lo, hi)
    }
    fn wall_reset(pos: Self, vel: Self, wall: f64) -> Self {
        interval_wall_reset(pos, vel, wall)
    }
    fn scale(self, k: f64) -> Self {
        Interval::scale(&self, k)
    }
    fn sqr(self) -> Self {
        Interval::sqr(&self)
    }
}

impl<const N: usize> Scalar for Dual<N> {
    fn cst(x: f64) -> Self {
        Dual::constant(Interval::point(x))
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    /// Inside the band the derivative passes through, outside it vanishes and
    /// across an edge it is the hull of both (the Clarke gradient of clip).
    fn clip(self, lo: f64, hi: f64) -> Self {
        let v = self.v.clip(lo, hi);
        let g = if self.v.lo() >= lo && self.v.hi() <= hi {
            Interval::point(1.0)
        } else if self.v.hi() <= lo || self.v.lo() >= hi {
            Interval::point(0.0)
        } else {
            Interval::new(0.0, 1.0)
        };
        self.chain(v, g)
    }
    fn wall_reset(pos: Self, vel: Self, wall: f64) -> Self {
        let v = interval_wall_reset(pos.v, vel.v, wall);
        if v == vel.v {
            return vel;
        }
        if pos.v.hi() <= wall && vel.v.hi() <= 0.0 {
            return Dual::constant(Interval::point(0.0));
        }
        // The reset is a jump in the state, so no derivative enclosure survives.
        let mut out = vel.chain(v, Interval::new(0.0, 1.0));
        out.smooth = false;
        out
    }
    fn scale(self, k: f64) -> Self {
        let mut d = self.d;
        for di in &mut d {
            *di = di.scale(k);
        }
        Dual { v: self.v.scale(k), d, smooth: self.smooth }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_derivative_is_clarke_hull_across_an_edge() {
        let x = Dual::<1>::variable(Interval::new(0.5, 1.5), 0);
        let y = x.clip(-1.0, 1.0);
        assert_eq!(y.v, Interval::new(0.5, 1.0));
        assert!(Interval::new(0.0, 1.0).is_subset_of(&y.d[0]) && y.d[0].width() < 1.0 + 1e-12);
        let z = Dual::<1>::variable(Interval::new(2.0, 3.0), 0).clip(-1.0, 1.0);
        assert!(z.d[0].contains(0.0) && z.d[0].width() < 1e-300);
    }

    #[test]
    fn wall_reset_cases() {
        let w = -1.2;
        assert_eq!(f64::wall_reset(-1.2, -0.01, w), 0.0);
        assert_eq!(f64::wall_reset(-1.1, -0.01, w), -0.01);
        let v = Interval::new(-0.02, 0.01);
        assert_eq!(Interval::wall_reset(Interval::new(-1.2, -1.0), v, w), v);
        assert_eq!(Interval::wall_reset(Interval::point(-1.2), v, w), Interval::new(0.0, 0.01));
        let d = Dual::<2>::wall_reset(
            Dual::variable(Interval::new(-1.2, -1.0), 0),
            Dual::variable(Interval::new(-0.02, -0.01), 1),
            w,
        );
        assert!(!d.smooth);
        assert_eq!(d.v, Interval::new(-0.02, 0.0));
    }
}
