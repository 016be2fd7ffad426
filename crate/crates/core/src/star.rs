//! Star sets `{ c + V a | C a <= d, l <= a <= u }` and axis-aligned boxes.
//!
//! Image-valued stars are ordinary [`StarSet`]s whose [`Shape`] is
//! [`Shape::Image`]; the value vector is the row-major `(channel, row, col)`
//! flattening of the image.
//!
//! Constraint rows are stored in blocks. A block built when the star had `k`
//! predicate variables only stores `k` columns; columns added later are
//! implicitly zero in that block, so appending variables never rewrites
//! existing rows.

use crate::error::{invalid, Error, Result};
use crate::interval::Interval;
use crate::linalg::{dot, Matrix, SparseMatrix};
use crate::linprog::{BoundSolver, LpStatus, Sense};

/// Axis-aligned box `[lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperbox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Hyperbox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return invalid(format!("box bounds have lengths {} and {}", lower.len(), upper.len()));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u {
                return invalid(format!("box dimension {i} is [{l}, {u}]"));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn from_intervals(iv: &[Interval]) -> Self {
        Self { lower: iv.iter().map(Interval::lo).collect(), upper: iv.iter().map(Interval::hi).collect() }
    }

    pub fn point(x: &[f64]) -> Self {
        Self { lower: x.to_vec(), upper: x.to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn interval(&self, i: usize) -> Interval {
        Interval::new(self.lower[i], self.upper[i])
    }

    pub fn intervals(&self) -> Vec<Interval> {
        (0..self.dim()).map(|i| self.interval(i)).collect()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn max_width(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).fold(0.0, f64::max)
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * l + 0.5 * u).collect()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    pub fn is_subset_of(&self, other: &Hyperbox) -> bool {
        self.dim() == other.dim()
            && (0..self.dim()).all(|i| other.lower[i] <= self.lower[i] && self.upper[i] <= other.upper[i])
    }

    pub fn hull(&self, other: &Hyperbox) -> Hyperbox {
        Hyperbox {
            lower: self.lower.iter().zip(&other.lower).map(|(a, b)| a.min(*b)).collect(),
            upper: self.upper.iter().zip(&other.upper).map(|(a, b)| a.max(*b)).collect(),
        }
    }

    /// Coordinates `dims` of this box.
    pub fn project(&self, dims: &[usize]) -> Hyperbox {
        Hyperbox {
            lower: dims.iter().map(|&i| self.lower[i]).collect(),
            upper: dims.iter().map(|&i| self.upper[i]).collect(),
        }
    }

    /// Widens every coordinate by `r >= 0` in both directions.
    pub fn inflate(&self, r: f64) -> Hyperbox {
        Hyperbox::from_intervals(&self.intervals().iter().map(|iv| iv.inflate(r)).collect::<Vec<_>>())
    }

    pub fn is_finite(&self) -> bool {
        self.lower.iter().chain(&self.upper).all(|v| v.is_finite())
    }

    /// Product of widths.
    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).product()
    }
}

/// Shape of a star's value vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct ConstraintBlock {
    /// `rows x k`, where `k` is the variable count when the block was added.
    a: Matrix,
    d: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StarSet {
    center: Vec<f64>,
    /// `n x p`.
    basis: Matrix,
    blocks: Vec<ConstraintBlock>,
    pred_lower: Vec<f64>,
    pred_upper: Vec<f64>,
    shape: Shape,
    /// Set only for stars built by [`StarSet::from_box`]; their bounds are
    /// reported as the original box.
    source_box: Option<Hyperbox>,
}

impl StarSet {
    /// Validated constructor. Fails with [`Error::InfeasibleStar`] when the
    /// predicate polytope is empty.
    pub fn new(
        center: Vec<f64>,
        basis: Matrix,
        constraints: Matrix,
        rhs: Vec<f64>,
        pred_lower: Vec<f64>,
        pred_upper: Vec<f64>,
        shape: Shape,
    ) -> Result<Self> {
        let (n, p) = (center.len(), basis.cols());
        if basis.rows() != n || shape.len() != n {
            return invalid(format!("basis is {}x{p} for center of length {n} and shape {shape:?}", basis.rows()));
        }
        if constraints.cols() != p || constraints.rows() != rhs.len() {
            return invalid("constraint block does not match predicate dimension");
        }
        if pred_lower.len() != p || pred_upper.len() != p {
            return invalid("predicate bound length mismatch");
        }
        let finite = center.iter().chain(&rhs).all(|v| v.is_finite()) && basis.is_finite() && constraints.is_finite();
        if !finite {
            return invalid("star data must be finite");
        }
        for i in 0..p {
            let (l, u) = (pred_lower[i], pred_upper[i]);
            if !l.is_finite() || !u.is_finite() || l > u {
                return invalid(format!("predicate variable {i} has bounds [{l}, {u}]"));
            }
        }
        let mut blocks = Vec::new();
        if constraints.rows() > 0 {
            blocks.push(ConstraintBlock { a: constraints, d: rhs });
        }
        let star = Self { center, basis, blocks, pred_lower, pred_upper, shape, source_box: None };
        if !star.is_feasible()? {
            return Err(Error::InfeasibleStar);
        }
        Ok(star)
    }

    /// The box `b` as a star with `c = mid(b)`, `V = diag(halfwidths)` and
    /// `a` in `[-1, 1]^n`.
    pub fn from_box(b: &Hyperbox) -> Result<Self> {
        let n = b.dim();
        if n == 0 {
            return invalid("cannot build a star from a 0-dimensional box");
        }
        if !b.is_finite() {
            return invalid("box bounds must be finite");
        }
        let center = b.midpoint();
        let half: Vec<f64> = (0..n).map(|i| 0.5 * b.upper[i] - 0.5 * b.lower[i]).collect();
        Ok(Self {
            center,
            basis: Matrix::from_diag(&half),
            blocks: Vec::new(),
            pred_lower: vec![-1.0; n],
            pred_upper: vec![1.0; n],
            shape: Shape::Flat(n),
            source_box: Some(b.clone()),
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn num_vars(&self) -> usize {
        self.basis.cols()
    }

    pub fn num_constraints(&self) -> usize {
        self.blocks.iter().map(|b| b.d.len()).sum()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn pred_lower(&self) -> &[f64] {
        &self.pred_lower
    }

    pub fn pred_upper(&self) -> &[f64] {
        &self.pred_upper
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn with_shape(mut self, shape: Shape) -> Result<Self> {
        if shape.len() != self.dim() {
            return invalid(format!("shape {shape:?} does not hold {} values", self.dim()));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Dense `(C, d)` over all current predicate variables.
    pub fn constraints(&self) -> (Matrix, Vec<f64>) {
        let p = self.num_vars();
        let m = self.num_constraints();
        let mut c = Matrix::zeros(m, p);
        let mut d = Vec::with_capacity(m);
        let mut r = 0;
        for blk in &self.blocks {
            let k = blk.a.cols();
            for i in 0..blk.a.rows() {
                c.row_mut(r)[..k].copy_from_slice(blk.a.row(i));
                r += 1;
            }
            d.extend_from_slice(&blk.d);
        }
        (c, d)
    }

    /// Value of the star at predicate point `alpha`.
    pub fn evaluate(&self, alpha: &[f64]) -> Vec<f64> {
        let mut v = self.basis.mul_vec(alpha);
        for (vi, ci) in v.iter_mut().zip(&self.center) {
            *vi += ci;
        }
        v
    }

    /// Whether `alpha` lies in the predicate polytope up to `tol`.
    pub fn predicate_contains(&self, alpha: &[f64], tol: f64) -> bool {
        if alpha.len() != self.num_vars() {
            return false;
        }
        let in_box = alpha
            .iter()
            .zip(self.pred_lower.iter().zip(&self.pred_upper))
            .all(|(a, (l, u))| *a >= l - tol && *a <= u + tol);
        in_box
            && self.blocks.iter().all(|blk| {
                let k = blk.a.cols();
                (0..blk.a.rows()).all(|i| dot(blk.a.row(i), &alpha[..k]) <= blk.d[i] + tol)
            })
    }

    /// `A x + b` applied to every point of the star.
    pub fn affine_map(&self, a: &Matrix, b: &[f64]) -> Result<StarSet> {
        if a.cols() != self.dim() || a.rows() != b.len() {
            return invalid(format!(
                "affine map {}x{} (+{}) applied to star of dimension {}",
                a.rows(),
                a.cols(),
                b.len(),
                self.dim()
            ));
        }
        let mut center = a.mul_vec(&self.center);
        for (c, bi) in center.iter_mut().zip(b) {
            *c += bi;
        }
        let basis = a.matmul(&self.basis)?;
        Ok(self.derived(center, basis, Shape::Flat(b.len())))
    }

    /// Sparse variant of [`StarSet::affine_map`].
    pub fn affine_map_sparse(&self, a: &SparseMatrix, b: &[f64]) -> Result<StarSet> {
        if a.cols() != self.dim() || a.rows() != b.len() {
            return invalid(format!(
                "affine map {}x{} (+{}) applied to star of dimension {}",
                a.rows(),
                a.cols(),
                b.len(),
                self.dim()
            ));
        }
        let p = self.num_vars();
        let mut center = a.mul_vec(&self.center);
        for (c, bi) in center.iter_mut().zip(b) {
            *c += bi;
        }
        let mut basis = Matrix::zeros(a.rows(), p);
        for r in 0..a.rows() {
            let dst = basis.row_mut(r);
            for (c, v) in a.row(r) {
                crate::linalg::axpy(v, self.basis.row(c), dst);
            }
        }
        Ok(self.derived(center, basis, Shape::Flat(b.len())))
    }

    /// Keeps coordinates `dims` in order.
    pub fn project(&self, dims: &[usize]) -> Result<StarSet> {
        if dims.iter().any(|&i| i >= self.dim()) {
            return invalid("projection index out of range");
        }
        let p = self.num_vars();
        let mut basis = Matrix::zeros(dims.len(), p);
        for (r, &i) in dims.iter().enumerate() {
            basis.row_mut(r).copy_from_slice(self.basis.row(i));
        }
        let center = dims.iter().map(|&i| self.center[i]).collect();
        let mut out = self.derived(center, basis, Shape::Flat(dims.len()));
        out.source_box = self.source_box.as_ref().map(|b| b.project(dims));
        Ok(out)
    }

    fn derived(&self, center: Vec<f64>, basis: Matrix, shape: Shape) -> StarSet {
        StarSet {
            center,
            basis,
            blocks: self.blocks.clone(),
            pred_lower: self.pred_lower.clone(),
            pred_upper: self.pred_upper.clone(),
            shape,
            source_box: None,
        }
    }

    /// Appends predicate variables with the given bounds. New basis columns
    /// are zero.
    pub(crate) fn append_variables(&mut self, lower: &[f64], upper: &[f64]) {
        let (n, p, k) = (self.dim(), self.num_vars(), lower.len());
        let mut basis = Matrix::zeros(n, p + k);
        for r in 0..n {
            basis.row_mut(r)[..p].copy_from_slice(self.basis.row(r));
        }
        self.basis = basis;
        self.pred_lower.extend_from_slice(lower);
        self.pred_upper.extend_from_slice(upper);
        self.source_box = None;
    }

    /// Appends a block of `<=` rows over the current variables.
    pub(crate) fn append_constraints(&mut self, a: Matrix, d: Vec<f64>) {
        debug_assert_eq!(a.cols(), self.num_vars());
        debug_assert_eq!(a.rows(), d.len());
        if !d.is_empty() {
            self.blocks.push(ConstraintBlock { a, d });
            self.source_box = None;
        }
    }

    pub(crate) fn center_mut(&mut self) -> &mut Vec<f64> {
        self.source_box = None;
        &mut self.center
    }

    pub(crate) fn basis_mut(&mut self) -> &mut Matrix {
        self.source_box = None;
        &mut self.basis
    }

    /// Adds a bounded set to the value: `{x + w | x in self, w in box}`.
    pub fn minkowski_box(&self, b: &Hyperbox) -> Result<StarSet> {
        if b.dim() != self.dim() {
            return invalid("Minkowski box dimension mismatch");
        }
        let mut out = self.clone();
        out.source_box = None;
        let p = out.num_vars();
        let widen: Vec<usize> = (0..b.dim()).filter(|&i| b.width(i) > 0.0).collect();
        out.append_variables(&vec![-1.0; widen.len()], &vec![1.0; widen.len()]);
        for (k, &i) in widen.iter().enumerate() {
            out.basis.set(i, p + k, 0.5 * b.width(i));
        }
        for i in 0..b.dim() {
            out.center[i] += 0.5 * b.lower()[i] + 0.5 * b.upper()[i];
        }
        Ok(out)
    }

    /// Cartesian product `self x b`: appends the box coordinates after the
    /// existing ones, each driven by a fresh predicate variable.
    pub fn product_box(&self, b: &Hyperbox) -> Result<StarSet> {
        if !b.is_finite() {
            return invalid("box bounds must be finite");
        }
        let (n, p, k) = (self.dim(), self.num_vars(), b.dim());
        let mut basis = Matrix::zeros(n + k, p + k);
        for r in 0..n {
            basis.row_mut(r)[..p].copy_from_slice(self.basis.row(r));
        }
        for i in 0..k {
            basis.set(n + i, p + i, 0.5 * b.upper()[i] - 0.5 * b.lower()[i]);
        }
        let mut center = self.center.clone();
        center.extend(b.midpoint());
        let mut out = self.derived(center, basis, Shape::Flat(n + k));
        out.pred_lower.extend(std::iter::repeat(-1.0).take(k));
        out.pred_upper.extend(std::iter::repeat(1.0).take(k));
        if let Some(sb) = &self.source_box {
            let mut lo = sb.lower().to_vec();
            let mut hi = sb.upper().to_vec();
            lo.extend_from_slice(b.lower());
            hi.extend_from_slice(b.upper());
            out.source_box = Some(Hyperbox::new(lo, hi)?);
        }
        Ok(out)
    }

    fn solver(&self) -> Result<BoundSolver> {
        let (c, d) = self.constraints();
        BoundSolver::new(&c, &d, &self.pred_lower, &self.pred_upper)
    }

    pub fn is_feasible(&self) -> Result<bool> {
        if self.blocks.is_empty() {
            return Ok(true);
        }
        Ok(self.solver()?.is_feasible())
    }

    /// Interval bounds over the predicate box, ignoring `C a <= d`. Sound but
    /// not tight when constraints are present.
    pub fn interval_bounds(&self, dims: Option<&[usize]>) -> Hyperbox {
        let all: Vec<usize>;
        let dims = match dims {
            Some(d) => d,
            None => {
                all = (0..self.dim()).collect();
                &all
            }
        };
        let mut lower = Vec::with_capacity(dims.len());
        let mut upper = Vec::with_capacity(dims.len());
        for &i in dims {
            let (lo, hi) = self.row_box_range(i);
            lower.push(lo);
            upper.push(hi);
        }
        Hyperbox { lower, upper }
    }

    pub(crate) fn row_box_range(&self, i: usize) -> (f64, f64) {
        let mut lo = self.center[i];
        let mut hi = self.center[i];
        for ((v, l), u) in self.basis.row(i).iter().zip(&self.pred_lower).zip(&self.pred_upper) {
            if *v > 0.0 {
                lo += v * l;
                hi += v * u;
            } else if *v < 0.0 {
                lo += v * u;
                hi += v * l;
            }
        }
        (lo, hi)
    }

    /// Tight per-dimension bounds over the predicate polytope.
    pub fn bounds_of(&self, dims: Option<&[usize]>) -> Result<Hyperbox> {
        if let Some(b) = &self.source_box {
            return Ok(match dims {
                Some(d) => b.project(d),
                None => b.clone(),
            });
        }
        if self.blocks.is_empty() {
            return Ok(self.interval_bounds(dims));
        }
        let all: Vec<usize>;
        let dims = match dims {
            Some(d) => d,
            None => {
                all = (0..self.dim()).collect();
                &all
            }
        };
        let mut solver = self.solver()?;
        if !solver.is_feasible() {
            return Err(Error::InfeasibleStar);
        }
        let mut lower = Vec::with_capacity(dims.len());
        let mut upper = Vec::with_capacity(dims.len());
        for &i in dims {
            let (lo, hi) = self.lp_range(&mut solver, i)?;
            lower.push(lo);
            upper.push(hi);
        }
        Ok(Hyperbox { lower, upper })
    }

    /// LP range of coordinate `i` using a solver built for this star.
    pub(crate) fn lp_range(&self, solver: &mut BoundSolver, i: usize) -> Result<(f64, f64)> {
        let row = self.basis.row(i);
        if row.iter().all(|v| *v == 0.0) {
            return Ok((self.center[i], self.center[i]));
        }
        let mut out = [0.0; 2];
        for (slot, sense) in out.iter_mut().zip([Sense::Minimize, Sense::Maximize]) {
            let s = solver.optimize(row, sense)?;
            match s.status {
                LpStatus::Optimal => *slot = self.center[i] + s.value,
                LpStatus::Infeasible => return Err(Error::InfeasibleStar),
                LpStatus::Unbounded => unreachable!("predicate variables are bounded"),
            }
        }
        Ok((out[0], out[1]))
    }

    pub(crate) fn lp_solver(&self) -> Result<BoundSolver> {
        self.solver()
    }

    pub(crate) fn has_constraints(&self) -> bool {
        !self.blocks.is_empty()
    }

    /// Whether some point of the star lies within `tol` of `x` in the
    /// infinity norm.
    pub fn contains_point(&self, x: &[f64], tol: f64) -> Result<bool> {
        if x.len() != self.dim() {
            return invalid(format!("point has {} entries, star has dimension {}", x.len(), self.dim()));
        }
        let p = self.num_vars();
        // Coordinates with zero basis rows are decided directly.
        let mut active = Vec::new();
        for i in 0..self.dim() {
            if self.basis.row(i).iter().all(|v| *v == 0.0) {
                if (self.center[i] - x[i]).abs() > tol {
                    return Ok(false);
                }
            } else {
                active.push(i);
            }
        }
        if !self.blocks.is_empty() || !active.is_empty() {
            let (c, d) = self.constraints();
            // Variables (a, t); minimise t subject to |c + V a - x| <= t.
            let m = c.rows() + 2 * active.len();
            let mut a = Matrix::zeros(m, p + 1);
            let mut rhs = Vec::with_capacity(m);
            for r in 0..c.rows() {
                a.row_mut(r)[..p].copy_from_slice(c.row(r));
                rhs.push(d[r]);
            }
            let mut r = c.rows();
            for &i in &active {
                let vi = self.basis.row(i);
                let dst = a.row_mut(r);
                dst[..p].copy_from_slice(vi);
                dst[p] = -1.0;
                rhs.push(x[i] - self.center[i]);
                let dst = a.row_mut(r + 1);
                for (o, v) in dst[..p].iter_mut().zip(vi) {
                    *o = -v;
                }
                dst[p] = -1.0;
                rhs.push(self.center[i] - x[i]);
                r += 2;
            }
            let mut lower = self.pred_lower.clone();
            let mut upper = self.pred_upper.clone();
            lower.push(0.0);
            upper.push(f64::INFINITY);
            let mut solver = BoundSolver::new(&a, &rhs, &lower, &upper)?;
            let mut obj = vec![0.0; p + 1];
            obj[p] = 1.0;
            let s = solver.optimize(&obj, Sense::Minimize)?;
            return Ok(s.status == LpStatus::Optimal && s.value <= tol);
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(l: &[f64], u: &[f64]) -> Hyperbox {
        Hyperbox::new(l.to_vec(), u.to_vec()).unwrap()
    }

    #[test]
    fn box_star_layout() {
        let s = StarSet::from_box(&bx(&[0.0, 2.0], &[1.0, 4.0])).unwrap();
        assert_eq!(s.center(), &[0.5, 3.0]);
        assert_eq!(s.basis(), &Matrix::from_diag(&[0.5, 1.0]));
        assert_eq!(s.pred_lower(), &[-1.0, -1.0]);
        assert_eq!(s.bounds_of(None).unwrap(), bx(&[0.0, 2.0], &[1.0, 4.0]));
    }

    #[test]
    fn degenerate_box() {
        let s = StarSet::from_box(&bx(&[3.0], &[3.0])).unwrap();
        assert_eq!(s.basis().get(0, 0), 0.0);
        assert_eq!(s.bounds_of(None).unwrap(), bx(&[3.0], &[3.0]));
        // Still exact once the source box is dropped by an identity map.
        let t = s.affine_map(&Matrix::identity(1), &[0.0]).unwrap();
        assert_eq!(t.bounds_of(None).unwrap(), bx(&[3.0], &[3.0]));
    }

    #[test]
    fn cartpole_cell_round_trip() {
        let cell = bx(&[0.0, 0.060], &[0.01, 0.061]);
        assert_eq!(StarSet::from_box(&cell).unwrap().bounds_of(None).unwrap(), cell);
    }

    #[test]
    fn zero_dimensional_box_rejected() {
        assert!(matches!(StarSet::from_box(&bx(&[], &[])), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn constrained_upper_bound() {
        let s = StarSet::new(
            vec![0.0],
            Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            vec![0.0],
            vec![-1.0; 2],
            vec![1.0; 2],
            Shape::Flat(1),
        )
        .unwrap();
        let b = s.bounds_of(None).unwrap();
        assert!(b.upper()[0].abs() < 1e-12);
        assert!((b.lower()[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_star_rejected() {
        let r = StarSet::new(
            vec![0.0],
            Matrix::identity(1),
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
            vec![-2.0],
            vec![-1.0],
            vec![1.0],
            Shape::Flat(1),
        );
        assert!(matches!(r, Err(Error::InfeasibleStar)));
    }

    #[test]
    fn constant_map() {
        let s = StarSet::from_box(&bx(&[-1.0, 0.0], &[1.0, 5.0])).unwrap();
        let t = s.affine_map(&Matrix::zeros(1, 2), &[7.0]).unwrap();
        assert_eq!(t.bounds_of(None).unwrap(), bx(&[7.0], &[7.0]));
    }

    #[test]
    fn affine_map_matches_corner_enumeration() {
        // Oracle: extreme values of an affine map over a box are attained at corners.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let l = [rng.gen_range(-2.0..0.0), rng.gen_range(-2.0..0.0)];
            let u = [l[0] + rng.gen_range(0.0..2.0), l[1] + rng.gen_range(0.0..2.0)];
            let a = Matrix::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = StarSet::from_box(&bx(&l, &u)).unwrap().affine_map(&a, &b).unwrap();
            let got = s.bounds_of(None).unwrap();
            for r in 0..3 {
                let vals: Vec<f64> = [[l[0], l[1]], [l[0], u[1]], [u[0], l[1]], [u[0], u[1]]]
                    .iter()
                    .map(|x| dot(a.row(r), x) + b[r])
                    .collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!((got.lower()[r] - lo).abs() < 1e-12);
                assert!((got.upper()[r] - hi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampled_points_are_tight_and_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = StarSet::from_box(&bx(&[0.0, -1.0], &[2.0, 1.0]))
            .unwrap()
            .affine_map(&Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.3, 2.0]]).unwrap(), &[0.1, 0.2])
            .unwrap();
        let b = s.bounds_of(None).unwrap();
        let mut seen_lo = [f64::INFINITY; 2];
        let mut seen_hi = [f64::NEG_INFINITY; 2];
        for _ in 0..10_000 {
            let alpha: Vec<f64> = (0..2).map(|_| if rng.gen_bool(0.5) { rng.gen_range(-1.0..=1.0) } else { rng.gen_range(0.999..=1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 } }).collect();
            let x = s.evaluate(&alpha);
            assert!(b.contains(&x, 1e-12));
            for i in 0..2 {
                seen_lo[i] = seen_lo[i].min(x[i]);
                seen_hi[i] = seen_hi[i].max(x[i]);
            }
        }
        for i in 0..2 {
            let w = b.width(i);
            assert!(seen_lo[i] - b.lower()[i] < 1e-2 * w);
            assert!(b.upper()[i] - seen_hi[i] < 1e-2 * w);
        }
    }

    #[test]
    fn contains_point_cases() {
        let s = StarSet::from_box(&bx(&[0.0, 0.0], &[1.0, 2.0])).unwrap();
        assert!(s.contains_point(&[0.5, 1.0], 0.0).unwrap());
        assert!(!s.contains_point(&[2.0, 1.0], 1e-6).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = s.affine_map(&Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0], vec![0.0, 3.0]]).unwrap(), &[0.0; 3]).unwrap();
        for _ in 0..100 {
            let a = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
            assert!(t.contains_point(&t.evaluate(&a), 1e-9).unwrap());
        }
    }

    #[test]
    fn minkowski_box_contains_sums() {
        let s = StarSet::from_box(&bx(&[0.0, 0.0], &[1.0, 1.0])).unwrap();
        let t = s.minkowski_box(&bx(&[-0.1, 0.0], &[0.1, 0.0])).unwrap();
        let b = t.bounds_of(None).unwrap();
        assert!((b.lower()[0] + 0.1).abs() < 1e-12 && (b.upper()[0] - 1.1).abs() < 1e-12);
        assert!(t.contains_point(&[1.05, 0.5], 1e-9).unwrap());
    }

    fn random_star(seed: u64, rows: usize) -> StarSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 3;
        let basis = Matrix::from_vec(2, p, (0..2 * p).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let c = Matrix::from_vec(rows, p, (0..rows * p).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        // Rhs positive so a = 0 stays feasible.
        let d = (0..rows).map(|_| rng.gen_range(0.05..1.0)).collect();
        StarSet::new(vec![0.3, -0.2], basis, c, d, vec![-1.0; p], vec![1.0; p], Shape::Flat(2)).unwrap()
    }

    proptest! {
        #[test]
        fn adding_a_row_never_widens(seed in 0u64..10_000, extra in prop::collection::vec(-1.0..1.0f64, 3), rhs in 0.01..1.0f64) {
            let s = random_star(seed, 2);
            let before = s.bounds_of(None).unwrap();
            let mut t = s.clone();
            t.append_constraints(Matrix::from_vec(1, 3, extra).unwrap(), vec![rhs]);
            let after = t.bounds_of(None).unwrap();
            for i in 0..2 {
                prop_assert!(after.lower()[i] >= before.lower()[i] - 1e-9);
                prop_assert!(after.upper()[i] <= before.upper()[i] + 1e-9);
            }
        }

        #[test]
        fn affine_map_is_exact(seed in 0u64..10_000, a in prop::collection::vec(-5.0..5.0f64, 6), b in prop::collection::vec(-5.0..5.0f64, 3), t in prop::collection::vec(-1.0..=1.0f64, 3)) {
            let s = random_star(seed, 1);
            let a = Matrix::from_vec(3, 2, a).unwrap();
            let mapped = s.affine_map(&a, &b).unwrap();
            let x = s.evaluate(&t);
            let direct: Vec<f64> = a.mul_vec(&x).iter().zip(&b).map(|(v, bi)| v + bi).collect();
            let via = mapped.evaluate(&t);
            for (p, q) in direct.iter().zip(&via) {
                prop_assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()));
            }
        }

        #[test]
        fn bounds_are_sound(seed in 0u64..10_000, t in prop::collection::vec(-1.0..=1.0f64, 3)) {
            let s = random_star(seed, 3);
            if s.predicate_contains(&t, 0.0) {
                let b = s.bounds_of(None).unwrap();
                prop_assert!(b.contains(&s.evaluate(&t), 1e-8));
            }
        }
    }
}
