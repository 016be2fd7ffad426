//! Anti-aliased signed-distance rasterizer for the procedural cameras.
//!
//! Pixel coverage is `clamp(0.5 - d, 0, 1)` where `d` is the signed distance
//! (in pixels) from the pixel centre to the shape, so every pixel is a
//! Lipschitz function of the shape parameters.

pub const BACKGROUND: f64 = 0.9;
pub const FOREGROUND: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Segment from `a` to `b` thickened by `radius`. Points are `(col, row)`.
    Capsule { a: (f64, f64), b: (f64, f64), radius: f64 },
    Rect { center: (f64, f64), half: (f64, f64) },
    Circle { center: (f64, f64), radius: f64 },
}

impl Primitive {
    fn signed_distance(&self, p: (f64, f64)) -> f64 {
        match *self {
            Primitive::Capsule { a, b, radius } => {
                let (bx, by) = (b.0 - a.0, b.1 - a.1);
                let (px, py) = (p.0 - a.0, p.1 - a.1);
                let len2 = bx * bx + by * by;
                let t = if len2 > 0.0 { ((px * bx + py * by) / len2).clamp(0.0, 1.0) } else { 0.0 };
                (px - t * bx).hypot(py - t * by) - radius
            }
            Primitive::Rect { center, half } => {
                let dx = (p.0 - center.0).abs() - half.0;
                let dy = (p.1 - center.1).abs() - half.1;
                dx.max(0.0).hypot(dy.max(0.0)) + dx.max(dy).min(0.0)
            }
            Primitive::Circle { center, radius } => (p.0 - center.0).hypot(p.1 - center.1) - radius,
        }
    }

    /// Scales all coordinates, e.g. from the 32-pixel reference frame.
    fn scaled(&self, sx: f64, sy: f64) -> Primitive {
        let s = |(x, y): (f64, f64)| (x * sx, y * sy);
        let r = 0.5 * (sx + sy);
        match *self {
            Primitive::Capsule { a, b, radius } => Primitive::Capsule { a: s(a), b: s(b), radius: radius * r },
            Primitive::Rect { center, half } => Primitive::Rect { center: s(center), half: s(half) },
            Primitive::Circle { center, radius } => Primitive::Circle { center: s(center), radius: radius * r },
        }
    }
}

/// Draws shapes given in a 32x32 reference frame onto an `h x w` canvas.
pub fn rasterize(shapes: &[Primitive], h: usize, w: usize) -> Vec<f64> {
    let (sx, sy) = (w as f64 / 32.0, h as f64 / 32.0);
    let shapes: Vec<Primitive> = shapes.iter().map(|p| p.scaled(sx, sy)).collect();
    let mut img = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let p = (c as f64 + 0.5, r as f64 + 0.5);
            let cover = shapes.iter().map(|s| (0.5 - s.signed_distance(p)).clamp(0.0, 1.0)).fold(0.0, f64::max);
            img.push(BACKGROUND - (BACKGROUND - FOREGROUND) * cover);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_distances() {
        let r = Primitive::Rect { center: (0.0, 0.0), half: (2.0, 1.0) };
        assert_eq!(r.signed_distance((0.0, 0.0)), -1.0);
        assert_eq!(r.signed_distance((5.0, 0.0)), 3.0);
        assert_eq!(r.signed_distance((5.0, 5.0)), 5.0);
        let c = Primitive::Capsule { a: (0.0, 0.0), b: (4.0, 0.0), radius: 1.0 };
        assert_eq!(c.signed_distance((2.0, 3.0)), 2.0);
        assert_eq!(c.signed_distance((7.0, 0.0)), 2.0);
    }

    #[test]
    fn pixels_stay_in_range() {
        let img = rasterize(&[Primitive::Circle { center: (16.0, 16.0), radius: 5.0 }], 32, 32);
        assert!(img.iter().all(|&p| (FOREGROUND..=BACKGROUND).contains(&p)));
        assert!((img[16 * 32 + 16] - FOREGROUND).abs() < 1e-12);
        assert_eq!(img[0], BACKGROUND);
    }
}
