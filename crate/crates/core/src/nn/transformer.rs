//! Star-set transformers for every layer kind.
//!
//! Affine layers are exact. ReLU uses the single-variable triangle
//! relaxation; clamp01 is `relu(x) - relu(x - 1)` with the triangle applied
//! to each term; sigmoid and tanh get one variable between two lines.

use super::{Layer, Lowered, Network};
use crate::error::{invalid, Error, Result};
use crate::interval::{sigmoid, Interval};
use crate::linalg::Matrix;
use crate::star::{Hyperbox, StarSet};

pub const DEFAULT_LP_BUDGET: usize = 1000;

#[derive(Debug, Clone, Copy)]
pub struct PropagateOptions {
    /// Refine every neuron by LP, not only those whose interval bound
    /// straddles a kink.
    pub lp_all: bool,
    /// Outward padding applied to LP-derived neuron bounds.
    pub tol: f64,
    /// Most LPs solved per `Diagnostics` (one reach tube); later neurons
    /// keep their interval bounds, which stay sound but looser.
    pub lp_budget: Option<usize>,
}

impl Default for PropagateOptions {
    fn default() -> Self {
        Self { lp_all: false, tol: crate::DEFAULT_TOL, lp_budget: Some(DEFAULT_LP_BUDGET) }
    }
}

/// Counters collected during propagation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Diagnostics {
    pub lp_refined: usize,
    /// Neurons left with interval bounds because the LP budget ran out.
    pub lp_skipped: usize,
    /// Neurons whose LP stalled and kept their interval bound.
    pub stalled_fallbacks: usize,
    /// Predicate variables added by relaxations.
    pub relaxed: usize,
}

/// Kink locations that make a neuron "unstable" for a layer kind.
fn kinks(layer: &Layer) -> &'static [f64] {
    match layer {
        Layer::Relu => &[0.0],
        Layer::Clamp01 => &[0.0, 1.0],
        Layer::Sigmoid | Layer::Tanh => &[0.0],
        _ => &[],
    }
}

/// Sound per-neuron bounds: interval bounds over the predicate box, refined by
/// LP for neurons that straddle one of `kinks` (or all neurons with `lp_all`).
pub fn neuron_bounds(s: &StarSet, kinks: &[f64], opts: &PropagateOptions, diag: &mut Diagnostics) -> Result<Hyperbox> {
    let n = s.dim();
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    for i in 0..n {
        let (lo, hi) = s.row_box_range(i);
        // Cover rounding in the interval sum.
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        lower.push(lo - slack);
        upper.push(hi + slack);
    }
    if s.has_constraints() {
        let mut refine: Vec<usize> = (0..n)
            .filter(|&i| {
                let nonconstant = s.basis().row(i).iter().any(|v| *v != 0.0);
                nonconstant && (opts.lp_all || kinks.iter().any(|k| lower[i] < *k && *k < upper[i]))
            })
            .collect();
        let left = opts.lp_budget.map_or(usize::MAX, |b| b.saturating_sub(diag.lp_refined));
        if refine.len() > left {
            diag.lp_skipped += refine.len() - left;
            refine.truncate(left);
        }
        if !refine.is_empty() {
            let mut solver = s.lp_solver()?;
            if !solver.is_feasible() {
                return Err(Error::InfeasibleStar);
            }
            for i in refine {
                match s.lp_range(&mut solver, i) {
                    Ok((lo, hi)) => {
                        diag.lp_refined += 1;
                        lower[i] = lower[i].max(lo - opts.tol);
                        upper[i] = upper[i].min(hi + opts.tol);
                    }
                    Err(Error::SolverStalled { .. }) => {
                        diag.stalled_fallbacks += 1;
                        log::warn!("LP stalled on neuron {i}; keeping interval bound");
                        solver = s.lp_solver()?;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Hyperbox::new(lower, upper)
}

/// One relaxed ReLU term `relu(x + shift)` for a neuron whose value is
/// `c + v . a` and whose (unshifted) bounds are `[l, u]`.
enum Piece {
    Zero,
    /// The term equals `x + shift`.
    Linear,
    /// The term is a fresh variable.
    Var(usize),
}

struct Relaxation {
    p: usize,
    new_lower: Vec<f64>,
    new_upper: Vec<f64>,
    /// Rows over `p + k` variables; `k` fixed at the end.
    rows: Vec<(Vec<(usize, f64)>, Option<usize>, f64, f64)>,
}

impl Relaxation {
    fn new(p: usize) -> Self {
        Self { p, new_lower: Vec::new(), new_upper: Vec::new(), rows: Vec::new() }
    }

    /// Triangle relaxation of `y = relu(x)` with `x = c + v . a in [l, u]`, `l < 0 < u`.
    fn relu_term(&mut self, c: f64, v: &[f64], l: f64, u: f64) -> Piece {
        if u <= 0.0 {
            return Piece::Zero;
        }
        if l >= 0.0 {
            return Piece::Linear;
        }
        let k = self.new_lower.len();
        self.new_lower.push(0.0);
        self.new_upper.push(u);
        let nz: Vec<(usize, f64)> = v.iter().copied().enumerate().filter(|(_, x)| *x != 0.0).collect();
        // x - y <= 0  ->  v.a - y <= -c
        self.rows.push((nz.clone(), Some(k), -1.0, -c + 1e-12 * (1.0 + c.abs())));
        // y <= lam (x - l)  ->  -lam v.a + y <= lam (c - l)
        let lam = u / (u - l);
        let scaled: Vec<(usize, f64)> = nz.iter().map(|(j, x)| (*j, -lam * x)).collect();
        let rhs = lam * (c - l);
        self.rows.push((scaled, Some(k), 1.0, rhs + 1e-12 * (1.0 + rhs.abs())));
        Piece::Var(k)
    }

    /// `y` between `lo_slope * x + lo_icpt` and `hi_slope * x + hi_icpt`, `y in [ylo, yhi]`.
    fn sandwich(&mut self, c: f64, v: &[f64], lines: [(f64, f64); 2], ylo: f64, yhi: f64) -> usize {
        let k = self.new_lower.len();
        self.new_lower.push(ylo);
        self.new_upper.push(yhi);
        let nz: Vec<(usize, f64)> = v.iter().copied().enumerate().filter(|(_, x)| *x != 0.0).collect();
        let [(a1, b1), (a2, b2)] = lines;
        // y >= a1 x + b1  ->  a1 v.a - y <= -a1 c - b1
        let r1 = -a1 * c - b1;
        self.rows.push((nz.iter().map(|(j, x)| (*j, a1 * x)).collect(), Some(k), -1.0, r1 + 1e-12 * (1.0 + r1.abs())));
        // y <= a2 x + b2  ->  -a2 v.a + y <= a2 c + b2
        let r2 = a2 * c + b2;
        self.rows.push((nz.iter().map(|(j, x)| (*j, -a2 * x)).collect(), Some(k), 1.0, r2 + 1e-12 * (1.0 + r2.abs())));
        k
    }

    /// Applies the new variables and rows to `s`. Returns the variable offset.
    fn apply(self, s: &mut StarSet) -> usize {
        let k = self.new_lower.len();
        if k == 0 {
            return self.p;
        }
        s.append_variables(&self.new_lower, &self.new_upper);
        let total = self.p + k;
        let mut a = Matrix::zeros(self.rows.len(), total);
        let mut d = Vec::with_capacity(self.rows.len());
        for (r, (coef, var, yc, rhs)) in self.rows.into_iter().enumerate() {
            let row = a.row_mut(r);
            for (j, x) in coef {
                row[j] = x;
            }
            if let Some(v) = var {
                row[self.p + v] = yc;
            }
            d.push(rhs);
        }
        s.append_constraints(a, d);
        self.p
    }
}

/// Per-neuron triangle relaxation of ReLU given sound neuron bounds.
pub fn relu_transform(s: &StarSet, bounds: &Hyperbox) -> Result<StarSet> {
    if bounds.dim() != s.dim() {
        return invalid("neuron bound dimension does not match star");
    }
    let p = s.num_vars();
    let mut relax = Relaxation::new(p);
    let pieces: Vec<Piece> = (0..s.dim())
        .map(|i| relax.relu_term(s.center()[i], s.basis().row(i), bounds.lower()[i], bounds.upper()[i]))
        .collect();
    let mut out = s.clone();
    let off = relax.apply(&mut out);
    for (i, piece) in pieces.iter().enumerate() {
        match piece {
            Piece::Linear => {}
            Piece::Zero => set_row(&mut out, i, 0.0, &[]),
            Piece::Var(k) => set_row(&mut out, i, 0.0, &[(off + k, 1.0)]),
        }
    }
    Ok(out)
}

fn set_row(s: &mut StarSet, i: usize, c: f64, entries: &[(usize, f64)]) {
    s.center_mut()[i] = c;
    let row = s.basis_mut().row_mut(i);
    row.fill(0.0);
    for (j, v) in entries {
        row[*j] += v;
    }
}

/// `clamp01(x) = relu(x) - relu(x - 1)` with both terms relaxed.
pub fn clamp01_transform(s: &StarSet, bounds: &Hyperbox) -> Result<StarSet> {
    if bounds.dim() != s.dim() {
        return invalid("neuron bound dimension does not match star");
    }
    let p = s.num_vars();
    let mut relax = Relaxation::new(p);
    let mut pieces = Vec::with_capacity(s.dim());
    for i in 0..s.dim() {
        let (c, v) = (s.center()[i], s.basis().row(i));
        let (l, u) = (bounds.lower()[i], bounds.upper()[i]);
        let lo = relax.relu_term(c, v, l, u);
        let hi = relax.relu_term(c - 1.0, v, l - 1.0, u - 1.0);
        pieces.push((lo, hi));
    }
    let mut out = s.clone();
    let off = relax.apply(&mut out);
    for (i, (lo, hi)) in pieces.iter().enumerate() {
        match (lo, hi) {
            (Piece::Linear, Piece::Zero) => {}
            (Piece::Zero, Piece::Zero) => set_row(&mut out, i, 0.0, &[]),
            // Both terms linear: (x) - (x - 1) = 1.
            (Piece::Linear, Piece::Linear) => set_row(&mut out, i, 1.0, &[]),
            (Piece::Var(a), Piece::Zero) => set_row(&mut out, i, 0.0, &[(off + a, 1.0)]),
            (Piece::Linear, Piece::Var(b)) => {
                // x - z
                out.basis_mut().row_mut(i)[off + b] -= 1.0;
            }
            (Piece::Var(a), Piece::Var(b)) => set_row(&mut out, i, 0.0, &[(off + a, 1.0), (off + b, -1.0)]),
            // relu(x - 1) > 0 forces x > 1 >= 0, so relu(x) cannot be zero or a fresh variable
            // while the shifted term is linear or relaxed.
            _ => unreachable!("inconsistent clamp pieces"),
        }
    }
    Ok(out)
}

/// Value and derivative of sigmoid (`is_tanh == false`) or tanh.
fn act(is_tanh: bool, x: f64) -> (f64, f64) {
    if is_tanh {
        let t = x.tanh();
        (t, 1.0 - t * t)
    } else {
        let s = sigmoid(x);
        (s, s * (1.0 - s))
    }
}

/// Lower and upper lines enclosing `g` on `[l, u]`.
fn envelope(is_tanh: bool, l: f64, u: f64) -> [(f64, f64); 2] {
    let (gl, dl) = act(is_tanh, l);
    let (gu, du) = act(is_tanh, u);
    if u - l < 1e-9 || (l < 0.0 && u > 0.0) {
        // g(x) - lam x is nondecreasing on [l, u] for lam = min(g'(l), g'(u)).
        let lam = dl.min(du);
        return [(lam, gl - lam * l), (lam, gu - lam * u)];
    }
    let m = 0.5 * (l + u);
    let (gm, dm) = act(is_tanh, m);
    let secant_slope = (gu - gl) / (u - l);
    let secant = (secant_slope, gl - secant_slope * l);
    let tangent = (dm, gm - dm * m);
    if u <= 0.0 {
        // Convex side: tangent below, secant above.
        [tangent, secant]
    } else {
        [secant, tangent]
    }
}

/// Relaxation of a mid-network sigmoid or tanh.
pub fn sigmoid_tanh_transform(s: &StarSet, bounds: &Hyperbox, is_tanh: bool) -> Result<StarSet> {
    if bounds.dim() != s.dim() {
        return invalid("neuron bound dimension does not match star");
    }
    let p = s.num_vars();
    let mut relax = Relaxation::new(p);
    let mut vars = Vec::with_capacity(s.dim());
    for i in 0..s.dim() {
        let (l, u) = (bounds.lower()[i], bounds.upper()[i]);
        let range = Interval::new(l, u);
        let y = if is_tanh { range.tanh() } else { range.sigmoid() };
        let lines = envelope(is_tanh, l, u);
        vars.push(relax.sandwich(s.center()[i], s.basis().row(i), lines, y.lo(), y.hi()));
    }
    let mut out = s.clone();
    let off = relax.apply(&mut out);
    for (i, k) in vars.into_iter().enumerate() {
        set_row(&mut out, i, 0.0, &[(off + k, 1.0)]);
    }
    Ok(out)
}

impl Network {
    /// Propagates `s` through every layer.
    pub fn propagate_star(&self, s: &StarSet, opts: &PropagateOptions) -> Result<StarSet> {
        let mut diag = Diagnostics::default();
        self.propagate_star_range(s, 0..self.layers.len(), opts, &mut diag)
    }

    /// Propagates `s` (shaped as the input of layer `range.start`) through
    /// layers `range`.
    pub fn propagate_star_range(
        &self,
        s: &StarSet,
        range: std::ops::Range<usize>,
        opts: &PropagateOptions,
        diag: &mut Diagnostics,
    ) -> Result<StarSet> {
        if range.end > self.layers.len() || range.start > range.end {
            return invalid("layer range out of bounds");
        }
        if s.dim() != self.shapes[range.start].len() {
            return invalid(format!(
                "star of dimension {} does not match layer input {:?}",
                s.dim(),
                self.shapes[range.start]
            ));
        }
        let lowered = self.lowered();
        let mut cur = s.clone();
        for i in range {
            let out_shape = self.shapes[i + 1];
            let layer = &self.layers[i];
            cur = match (&lowered[i], layer) {
                (Lowered::Dense, Layer::Dense { weight, bias }) => cur.affine_map(weight, bias)?,
                (Lowered::Sparse(ab), _) => cur.affine_map_sparse(&ab.0, &ab.1)?,
                (Lowered::Identity, _) => cur,
                (_, Layer::Relu) => {
                    let b = neuron_bounds(&cur, kinks(layer), opts, diag)?;
                    let before = cur.num_vars();
                    let next = relu_transform(&cur, &b)?;
                    diag.relaxed += next.num_vars() - before;
                    next
                }
                (_, Layer::Clamp01) => {
                    let b = neuron_bounds(&cur, kinks(layer), opts, diag)?;
                    let before = cur.num_vars();
                    let next = clamp01_transform(&cur, &b)?;
                    diag.relaxed += next.num_vars() - before;
                    next
                }
                (_, Layer::Sigmoid | Layer::Tanh) => {
                    let b = neuron_bounds(&cur, kinks(layer), opts, diag)?;
                    let before = cur.num_vars();
                    let next = sigmoid_tanh_transform(&cur, &b, matches!(layer, Layer::Tanh))?;
                    diag.relaxed += next.num_vars() - before;
                    next
                }
                _ => unreachable!("lowering matches layer kinds"),
            };
            cur = cur.with_shape(out_shape)?;
        }
        Ok(cur)
    }

    /// Exact output range of a network ending in a scalar sigmoid or tanh,
    /// given the star at that activation's input.
    pub fn scalar_monotone_output_bounds(
        &self,
        pre: &StarSet,
        opts: &PropagateOptions,
        diag: &mut Diagnostics,
    ) -> Result<Hyperbox> {
        let Some(last) = self.layers.last() else {
            return invalid("empty network");
        };
        let is_tanh = match last {
            Layer::Sigmoid => false,
            Layer::Tanh => true,
            other => return invalid(format!("final layer is {}, not sigmoid or tanh", other.name())),
        };
        if self.output_shape().len() != 1 || pre.dim() != 1 {
            return invalid("monotone output bounds need a scalar final activation");
        }
        let b = if opts.lp_budget.is_some_and(|b| diag.lp_refined >= b) {
            diag.lp_skipped += 1;
            pre.interval_bounds(None)
        } else {
            match pre.bounds_of(None) {
                Ok(b) => {
                    diag.lp_refined += 1;
                    b
                }
                Err(Error::SolverStalled { .. }) => {
                    diag.stalled_fallbacks += 1;
                    pre.interval_bounds(None)
                }
                Err(e) => return Err(e),
            }
        };
        let pad = if pre.has_constraints() { opts.tol } else { 0.0 };
        let iv = Interval::new(b.lower()[0] - pad, b.upper()[0] + pad);
        let y = if is_tanh { iv.tanh() } else { iv.sigmoid() };
        Ok(Hyperbox::from_intervals(&[y]))
    }

    /// Output bounds of a scalar-output controller over an input star: the
    /// body is propagated with relaxations and the final activation is
    /// bounded exactly.
    pub fn scalar_output_bounds(&self, s: &StarSet, opts: &PropagateOptions, diag: &mut Diagnostics) -> Result<Hyperbox> {
        let n = self.layers.len();
        if n == 0 {
            return invalid("empty network");
        }
        let pre = self.propagate_star_range(s, 0..n - 1, opts, diag)?;
        self.scalar_monotone_output_bounds(&pre, opts, diag)
    }
}
