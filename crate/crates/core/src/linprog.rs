//! Dense bounded-variable primal simplex.
//!
//! Problems have the form
//!
//! ```text
//! min / max  c^T x   s.t.  A x <= b,   l <= x <= u
//! ```
//!
//! where entries of `l` / `u` may be infinite. Every row receives a slack
//! variable; rows whose slack would start negative receive an artificial
//! variable and are repaired by a phase-1 pass minimising the sum of
//! artificials. Pricing is Dantzig's rule until a run of degenerate pivots
//! is observed, after which Bland's rule is used for the rest of the solve.
//!
//! [`BoundSolver`] keeps its tableau between objectives, so a sequence of
//! bound queries over the same constraint set only pays for phase 1 once.

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, Matrix};

/// Optimisation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    /// `m x p` matrix of `<=` rows.
    pub constraints: Matrix,
    pub rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub sense: Sense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Objective value in the problem's own sense; `±inf` when unbounded,
    /// `NaN` when infeasible.
    pub value: f64,
    pub witness: Vec<f64>,
    pub iterations: usize,
    /// Final basis, reusable through [`solve_with_basis`].
    pub basis: Option<Basis>,
}

/// A simplex basis expressed over structural variables `0..p` followed by
/// row slacks `p..p+m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Basis {
    pub basic: Vec<usize>,
    /// For every non-basic variable: whether it rests at its upper bound.
    pub at_upper: Vec<bool>,
}

/// Numeric settings. The defaults are what every caller in this crate uses.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    pub pivot_tol: f64,
    /// Consecutive degenerate pivots before switching to Bland's rule.
    pub degeneracy_threshold: usize,
    /// Hard cap on pivots per call; `None` picks `50 * (m + p) + 1000`.
    pub max_pivots: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-9,
            optimality_tol: 1e-10,
            pivot_tol: 1e-11,
            degeneracy_threshold: 50,
            max_pivots: None,
        }
    }
}

/// Solves one problem from a cold (slack) basis.
pub fn solve(p: &LpProblem) -> Result<LpSolution> {
    let mut solver = BoundSolver::new(&p.constraints, &p.rhs, &p.lower, &p.upper)?;
    solver.optimize(&p.objective, p.sense)
}

/// Solves starting from a previously returned basis. Falls back to a cold
/// start when the basis is singular or not primal feasible for `p`.
pub fn solve_with_basis(p: &LpProblem, basis: &Basis) -> Result<LpSolution> {
    let mut solver = BoundSolver::with_basis(&p.constraints, &p.rhs, &p.lower, &p.upper, basis)?;
    solver.optimize(&p.objective, p.sense)
}

/// Repeated optimisation over a fixed feasible region.
#[derive(Debug, Clone)]
pub struct BoundSolver {
    n_orig: usize,
    m: usize,
    /// Original index of each reduced structural column.
    free_cols: Vec<usize>,
    /// Values of the eliminated (fixed) variables, indexed by original column.
    fixed_values: Vec<Option<f64>>,
    orig_a: Matrix,
    orig_b: Vec<f64>,
    orig_lower: Vec<f64>,
    orig_upper: Vec<f64>,
    tableau: Option<Tableau>,
    opts: SolverOptions,
}

impl BoundSolver {
    pub fn new(a: &Matrix, b: &[f64], lower: &[f64], upper: &[f64]) -> Result<Self> {
        Self::with_options(a, b, lower, upper, SolverOptions::default())
    }

    pub fn with_options(
        a: &Matrix,
        b: &[f64],
        lower: &[f64],
        upper: &[f64],
        opts: SolverOptions,
    ) -> Result<Self> {
        let mut s = Self::setup(a, b, lower, upper, opts)?;
        s.tableau = s.cold_start()?;
        Ok(s)
    }

    fn with_basis(a: &Matrix, b: &[f64], lower: &[f64], upper: &[f64], basis: &Basis) -> Result<Self> {
        let mut s = Self::setup(a, b, lower, upper, SolverOptions::default())?;
        s.tableau = match s.warm_tableau(basis) {
            Some(t) => Some(t),
            None => s.cold_start()?,
        };
        Ok(s)
    }

    fn setup(a: &Matrix, b: &[f64], lower: &[f64], upper: &[f64], opts: SolverOptions) -> Result<Self> {
        let n = a.cols();
        let m = a.rows();
        if b.len() != m || lower.len() != n || upper.len() != n {
            return invalid(format!(
                "LP dimension mismatch: A is {m}x{n}, b={}, l={}, u={}",
                b.len(),
                lower.len(),
                upper.len()
            ));
        }
        if !a.is_finite() || b.iter().any(|v| !v.is_finite()) {
            return invalid("LP constraint data must be finite");
        }
        for j in 0..n {
            if lower[j].is_nan() || upper[j].is_nan() || lower[j] > upper[j] {
                return invalid(format!("variable {j} has bounds [{}, {}]", lower[j], upper[j]));
            }
            if lower[j] == f64::INFINITY || upper[j] == f64::NEG_INFINITY {
                return invalid(format!("variable {j} has an empty bound interval"));
            }
        }
        let mut fixed_values = vec![None; n];
        let mut free_cols = Vec::with_capacity(n);
        for j in 0..n {
            if lower[j] == upper[j] {
                fixed_values[j] = Some(lower[j]);
            } else {
                free_cols.push(j);
            }
        }
        Ok(Self {
            n_orig: n,
            m,
            free_cols,
            fixed_values,
            orig_a: a.clone(),
            orig_b: b.to_vec(),
            orig_lower: lower.to_vec(),
            orig_upper: upper.to_vec(),
            tableau: None,
            opts,
        })
    }

    fn reduced_rhs(&self) -> Vec<f64> {
        let mut rhs = self.orig_b.clone();
        for (j, fv) in self.fixed_values.iter().enumerate() {
            if let Some(v) = fv {
                if *v != 0.0 {
                    for (i, r) in rhs.iter_mut().enumerate() {
                        *r -= self.orig_a.get(i, j) * v;
                    }
                }
            }
        }
        rhs
    }

    fn reduced_a(&self) -> Matrix {
        let n = self.free_cols.len();
        let mut a = Matrix::zeros(self.m, n);
        for i in 0..self.m {
            let src = self.orig_a.row(i);
            let dst = a.row_mut(i);
            for (k, &j) in self.free_cols.iter().enumerate() {
                dst[k] = src[j];
            }
        }
        a
    }

    fn cold_start(&self) -> Result<Option<Tableau>> {
        let lower: Vec<f64> = self.free_cols.iter().map(|&j| self.orig_lower[j]).collect();
        let upper: Vec<f64> = self.free_cols.iter().map(|&j| self.orig_upper[j]).collect();
        let mut t = Tableau::cold(self.reduced_a(), self.reduced_rhs(), lower, upper, self.opts);
        if t.n_art > 0 {
            let feasible = t.phase_one()?;
            if !feasible {
                return Ok(None);
            }
        }
        Ok(Some(t))
    }

    fn warm_tableau(&self, basis: &Basis) -> Option<Tableau> {
        let n = self.n_orig;
        if basis.basic.len() != self.m || basis.at_upper.len() != n {
            return None;
        }
        // Translate original indices into the reduced space.
        let mut map = vec![usize::MAX; n];
        for (k, &j) in self.free_cols.iter().enumerate() {
            map[j] = k;
        }
        let nr = self.free_cols.len();
        let mut basic = Vec::with_capacity(self.m);
        for &v in &basis.basic {
            if v < n {
                if map[v] == usize::MAX {
                    return None;
                }
                basic.push(map[v]);
            } else if v < n + self.m {
                basic.push(nr + (v - n));
            } else {
                return None;
            }
        }
        let lower: Vec<f64> = self.free_cols.iter().map(|&j| self.orig_lower[j]).collect();
        let upper: Vec<f64> = self.free_cols.iter().map(|&j| self.orig_upper[j]).collect();
        let at_upper_reduced: Vec<bool> = self.free_cols.iter().map(|&j| basis.at_upper[j]).collect();
        Tableau::warm(self.reduced_a(), self.reduced_rhs(), lower, upper, &basic, &at_upper_reduced, self.opts)
    }

    pub fn is_feasible(&self) -> bool {
        self.tableau.is_some()
    }

    /// Optimises `objective` over the solver's region, starting from the
    /// basis left by the previous call.
    pub fn optimize(&mut self, objective: &[f64], sense: Sense) -> Result<LpSolution> {
        if objective.len() != self.n_orig {
            return invalid(format!(
                "objective has {} entries, expected {}",
                objective.len(),
                self.n_orig
            ));
        }
        if objective.iter().any(|c| !c.is_finite()) {
            return invalid("objective coefficients must be finite");
        }
        let n_orig = self.n_orig;
        let Some(t) = self.tableau.as_mut() else {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                value: f64::NAN,
                witness: Vec::new(),
                iterations: 0,
                basis: None,
            });
        };
        let sign = match sense {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        };
        let mut cost = vec![0.0; t.ncols];
        for (k, &j) in self.free_cols.iter().enumerate() {
            cost[k] = sign * objective[j];
        }
        let outcome = t.optimize(&cost)?;
        let mut witness = vec![0.0; n_orig];
        for (j, fv) in self.fixed_values.iter().enumerate() {
            if let Some(v) = fv {
                witness[j] = *v;
            }
        }
        for (k, &j) in self.free_cols.iter().enumerate() {
            witness[j] = t.x[k];
        }
        let iterations = t.last_pivots;
        if outcome == Outcome::Unbounded {
            let value = match sense {
                Sense::Minimize => f64::NEG_INFINITY,
                Sense::Maximize => f64::INFINITY,
            };
            return Ok(LpSolution { status: LpStatus::Unbounded, value, witness, iterations, basis: None });
        }
        let basis = self.export_basis();
        Ok(LpSolution {
            status: LpStatus::Optimal,
            value: dot(objective, &witness),
            witness,
            iterations,
            basis,
        })
    }

    fn export_basis(&self) -> Option<Basis> {
        let t = self.tableau.as_ref()?;
        let n = self.n_orig;
        let nr = self.free_cols.len();
        let mut basic = Vec::with_capacity(self.m);
        for &v in &t.basis {
            if v < nr {
                basic.push(self.free_cols[v]);
            } else if v < nr + self.m {
                basic.push(n + (v - nr));
            } else {
                // An artificial stayed basic on a redundant row.
                return None;
            }
        }
        let mut at_upper = vec![false; n];
        for (k, &j) in self.free_cols.iter().enumerate() {
            at_upper[j] = t.pos[k].is_none() && t.upper[k].is_finite() && t.x[k] == t.upper[k];
        }
        Some(Basis { basic, at_upper })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Optimal,
    Unbounded,
}

/// Column layout: structurals `0..n`, slacks `n..n+m` (+e_i), artificials
/// `n+m..` (-e_i on their row).
#[derive(Debug, Clone)]
struct Tableau {
    n: usize,
    m: usize,
    n_art: usize,
    ncols: usize,
    /// `B^-1 [A | I | -E]`, row-major `m x ncols`.
    a: Vec<f64>,
    orig_a: Matrix,
    b: Vec<f64>,
    art_row: Vec<usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    x: Vec<f64>,
    basis: Vec<usize>,
    pos: Vec<Option<usize>>,
    d: Vec<f64>,
    opts: SolverOptions,
    last_pivots: usize,
}

impl Tableau {
    fn blank(a: Matrix, b: Vec<f64>, mut lower: Vec<f64>, mut upper: Vec<f64>, n_art: usize, opts: SolverOptions) -> Self {
        let n = a.cols();
        let m = a.rows();
        let ncols = n + m + n_art;
        lower.extend(std::iter::repeat(0.0).take(m + n_art));
        upper.extend(std::iter::repeat(f64::INFINITY).take(m));
        upper.extend(std::iter::repeat(f64::INFINITY).take(n_art));
        Self {
            n,
            m,
            n_art,
            ncols,
            a: vec![0.0; m * ncols],
            orig_a: a,
            b,
            art_row: Vec::with_capacity(n_art),
            lower,
            upper,
            x: vec![0.0; ncols],
            basis: vec![0; m],
            pos: vec![None; ncols],
            d: vec![0.0; ncols],
            opts,
            last_pivots: 0,
        }
    }

    fn initial_nonbasic_value(l: f64, u: f64) -> f64 {
        if l.is_finite() {
            l
        } else if u.is_finite() {
            u
        } else {
            0.0
        }
    }

    fn cold(a: Matrix, b: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>, opts: SolverOptions) -> Self {
        let n = a.cols();
        let m = a.rows();
        let x_n: Vec<f64> = (0..n).map(|j| Self::initial_nonbasic_value(lower[j], upper[j])).collect();
        let resid: Vec<f64> = (0..m).map(|i| b[i] - dot(a.row(i), &x_n)).collect();
        let n_art = resid.iter().filter(|&&r| r < 0.0).count();
        let mut t = Self::blank(a, b, lower, upper, n_art, opts);
        t.x[..n].copy_from_slice(&x_n);
        let mut k = 0;
        for i in 0..m {
            let sign = if resid[i] < 0.0 { -1.0 } else { 1.0 };
            let row = &mut t.a[i * t.ncols..(i + 1) * t.ncols];
            for (dst, src) in row[..n].iter_mut().zip(t.orig_a.row(i)) {
                *dst = sign * src;
            }
            row[n + i] = sign;
            if resid[i] < 0.0 {
                let col = n + m + k;
                row[col] = 1.0;
                t.art_row.push(i);
                t.basis[i] = col;
                t.pos[col] = Some(i);
                t.x[col] = -resid[i];
                k += 1;
            } else {
                t.basis[i] = n + i;
                t.pos[n + i] = Some(i);
                t.x[n + i] = resid[i];
            }
        }
        t
    }

    fn warm(
        a: Matrix,
        b: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        basic: &[usize],
        at_upper: &[bool],
        opts: SolverOptions,
    ) -> Option<Self> {
        let n = a.cols();
        let mut t = Self::blank(a, b, lower, upper, 0, opts);
        for (i, &v) in basic.iter().enumerate() {
            if t.pos[v].is_some() {
                return None;
            }
            t.basis[i] = v;
            t.pos[v] = Some(i);
        }
        for j in 0..n {
            if t.pos[j].is_none() {
                t.x[j] = if at_upper[j] && t.upper[j].is_finite() {
                    t.upper[j]
                } else {
                    Self::initial_nonbasic_value(t.lower[j], t.upper[j])
                };
            }
        }
        if t.refactor().is_err() {
            return None;
        }
        let tol = t.opts.feasibility_tol;
        let ok = t.basis.iter().all(|&v| {
            let s = 1.0 + t.x[v].abs();
            t.x[v] >= t.lower[v] - tol * s && t.x[v] <= t.upper[v] + tol * s
        });
        ok.then_some(t)
    }

    /// Column `j` of `[A | I | -E]` as a dense vector.
    fn original_column(&self, j: usize) -> Vec<f64> {
        let mut col = vec![0.0; self.m];
        if j < self.n {
            for (i, c) in col.iter_mut().enumerate() {
                *c = self.orig_a.get(i, j);
            }
        } else if j < self.n + self.m {
            col[j - self.n] = 1.0;
        } else {
            col[self.art_row[j - self.n - self.m]] = -1.0;
        }
        col
    }

    /// Rebuilds `B^-1 [A | I | -E]` and the basic values from the original
    /// data by Gauss-Jordan elimination with partial pivoting.
    fn refactor(&mut self) -> Result<()> {
        let m = self.m;
        let nc = self.ncols;
        // Augmented [B | full] eliminated to [I | B^-1 full].
        let width = m + nc;
        let mut w = vec![0.0; m * width];
        for (i, &v) in self.basis.iter().enumerate() {
            let col = self.original_column(v);
            for (r, c) in col.into_iter().enumerate() {
                w[r * width + i] = c;
            }
        }
        for j in 0..nc {
            let col = self.original_column(j);
            for (r, c) in col.into_iter().enumerate() {
                w[r * width + m + j] = c;
            }
        }
        for k in 0..m {
            let (piv, best) = (k..m)
                .map(|r| (r, w[r * width + k].abs()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best < 1e-13 {
                return Err(Error::SolverStalled { iterations: self.last_pivots });
            }
            if piv != k {
                for c in 0..width {
                    w.swap(piv * width + c, k * width + c);
                }
            }
            let p = w[k * width + k];
            for c in 0..width {
                w[k * width + c] /= p;
            }
            let pivot_row: Vec<f64> = w[k * width..(k + 1) * width].to_vec();
            for r in 0..m {
                if r == k {
                    continue;
                }
                let f = w[r * width + k];
                if f != 0.0 {
                    for c in 0..width {
                        w[r * width + c] -= f * pivot_row[c];
                    }
                }
            }
        }
        for r in 0..m {
            self.a[r * nc..(r + 1) * nc].copy_from_slice(&w[r * width + m..(r + 1) * width]);
        }
        self.recompute_basic_values();
        Ok(())
    }

    /// `x_B = B^-1 (b - N x_N)`, using the slack block of the tableau as `B^-1`.
    fn recompute_basic_values(&mut self) {
        let (n, m, nc) = (self.n, self.m, self.ncols);
        let mut r = self.b.clone();
        for j in 0..nc {
            if self.pos[j].is_some() || self.x[j] == 0.0 {
                continue;
            }
            let xj = self.x[j];
            if j < n {
                for (i, ri) in r.iter_mut().enumerate() {
                    *ri -= self.orig_a.get(i, j) * xj;
                }
            } else if j < n + m {
                r[j - n] -= xj;
            } else {
                r[self.art_row[j - n - m]] += xj;
            }
        }
        for i in 0..m {
            let row = &self.a[i * nc..(i + 1) * nc];
            let v = dot(&row[n..n + m], &r);
            self.x[self.basis[i]] = v;
        }
    }

    fn compute_reduced_costs(&mut self, cost: &[f64]) {
        let nc = self.ncols;
        self.d.copy_from_slice(cost);
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.a[i * nc..(i + 1) * nc];
                for (dj, aij) in self.d.iter_mut().zip(row) {
                    *dj -= cb * aij;
                }
            }
        }
        for &v in &self.basis {
            self.d[v] = 0.0;
        }
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let nc = self.ncols;
        let p = self.a[r * nc + j];
        {
            let row = &mut self.a[r * nc..(r + 1) * nc];
            for v in row.iter_mut() {
                *v /= p;
            }
            row[j] = 1.0;
        }
        let prow: Vec<f64> = self.a[r * nc..(r + 1) * nc].to_vec();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.a[i * nc + j];
            if f != 0.0 {
                let row = &mut self.a[i * nc..(i + 1) * nc];
                for (v, pv) in row.iter_mut().zip(&prow) {
                    *v -= f * pv;
                }
                row[j] = 0.0;
            }
        }
        let dj = self.d[j];
        if dj != 0.0 {
            for (v, pv) in self.d.iter_mut().zip(&prow) {
                *v -= dj * pv;
            }
            self.d[j] = 0.0;
        }
        let leaving = self.basis[r];
        self.pos[leaving] = None;
        self.basis[r] = j;
        self.pos[j] = Some(r);
    }

    fn max_pivots(&self) -> usize {
        self.opts.max_pivots.unwrap_or(50 * (self.m + self.n) + 1000)
    }

    /// Primal simplex from the current (feasible) basis.
    fn run(&mut self, cost: &[f64]) -> Result<Outcome> {
        let nc = self.ncols;
        let tol = self.opts.feasibility_tol;
        let opt_tol = self.opts.optimality_tol;
        let piv_tol = self.opts.pivot_tol;
        let max_pivots = self.max_pivots();
        self.compute_reduced_costs(cost);
        let mut pivots = 0usize;
        let mut degenerate_run = 0usize;
        let mut bland = false;
        let mut since_refresh = 0usize;
        loop {
            if pivots >= max_pivots {
                self.last_pivots = pivots;
                return Err(Error::SolverStalled { iterations: pivots });
            }
            if since_refresh >= 400 {
                self.refactor()?;
                self.compute_reduced_costs(cost);
                since_refresh = 0;
            }
            // Pricing.
            let mut entering: Option<(usize, f64)> = None;
            let mut best = 0.0;
            for j in 0..nc {
                if self.pos[j].is_some() {
                    continue;
                }
                let (lj, uj) = (self.lower[j], self.upper[j]);
                if uj - lj <= 0.0 {
                    continue;
                }
                let dj = self.d[j];
                let dir = if dj < -opt_tol && self.x[j] < uj - tol {
                    1.0
                } else if dj > opt_tol && self.x[j] > lj + tol {
                    -1.0
                } else {
                    continue;
                };
                if bland {
                    entering = Some((j, dir));
                    break;
                }
                if dj.abs() > best {
                    best = dj.abs();
                    entering = Some((j, dir));
                }
            }
            let Some((j, dir)) = entering else {
                self.last_pivots = pivots;
                return Ok(Outcome::Optimal);
            };

            // Ratio test.
            let flip = self.upper[j] - self.lower[j];
            let mut t_best = f64::INFINITY;
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let alpha = dir * self.a[i * nc + j];
                let v = self.basis[i];
                let limit = if alpha > piv_tol {
                    let l = self.lower[v];
                    if l.is_finite() {
                        ((self.x[v] - l) / alpha).max(0.0)
                    } else {
                        continue;
                    }
                } else if alpha < -piv_tol {
                    let u = self.upper[v];
                    if u.is_finite() {
                        ((u - self.x[v]) / -alpha).max(0.0)
                    } else {
                        continue;
                    }
                } else {
                    continue;
                };
                let better = match leave {
                    None => true,
                    Some((ri, ra)) => {
                        if limit < t_best - 1e-12 {
                            true
                        } else if limit <= t_best + 1e-12 {
                            if bland {
                                v < self.basis[ri]
                            } else {
                                alpha.abs() > ra
                            }
                        } else {
                            false
                        }
                    }
                };
                if better {
                    t_best = limit;
                    leave = Some((i, alpha.abs()));
                }
            }

            if flip <= t_best {
                if !flip.is_finite() {
                    self.last_pivots = pivots;
                    return Ok(Outcome::Unbounded);
                }
                // Bound flip: no basis change.
                let step = dir * flip;
                for i in 0..self.m {
                    let a = self.a[i * nc + j];
                    if a != 0.0 {
                        self.x[self.basis[i]] -= a * step;
                    }
                }
                self.x[j] = if dir > 0.0 { self.upper[j] } else { self.lower[j] };
                pivots += 1;
                degenerate_run = 0;
                continue;
            }
            let (r, _) = leave.expect("finite step implies a blocking row");
            let step = dir * t_best;
            if t_best != 0.0 {
                for i in 0..self.m {
                    let a = self.a[i * nc + j];
                    if a != 0.0 {
                        self.x[self.basis[i]] -= a * step;
                    }
                }
                self.x[j] += step;
            }
            let leaving = self.basis[r];
            let alpha = dir * self.a[r * nc + j];
            self.x[leaving] = if alpha > 0.0 { self.lower[leaving] } else { self.upper[leaving] };
            self.pivot(r, j);
            pivots += 1;
            since_refresh += 1;
            if t_best <= 1e-12 {
                degenerate_run += 1;
                if degenerate_run >= self.opts.degeneracy_threshold {
                    bland = true;
                }
            } else {
                degenerate_run = 0;
            }
        }
    }

    fn phase_one(&mut self) -> Result<bool> {
        let mut cost = vec![0.0; self.ncols];
        let start = self.n + self.m;
        for c in &mut cost[start..] {
            *c = 1.0;
        }
        self.run(&cost)?;
        let infeas: f64 = self.x[start..].iter().sum();
        let scale = 1.0 + self.b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if infeas > self.opts.feasibility_tol * scale * 10.0 {
            return Ok(false);
        }
        // Fix artificials at zero and pivot basic ones out where possible.
        for k in start..self.ncols {
            self.upper[k] = 0.0;
            if self.pos[k].is_none() {
                self.x[k] = 0.0;
            }
        }
        let nc = self.ncols;
        for r in 0..self.m {
            let v = self.basis[r];
            if v < start {
                continue;
            }
            let row = &self.a[r * nc..(r + 1) * nc];
            let cand = (0..start)
                .filter(|&j| self.pos[j].is_none())
                .max_by(|&p, &q| row[p].abs().total_cmp(&row[q].abs()));
            if let Some(j) = cand {
                if row[j].abs() > 1e-7 {
                    self.pivot(r, j);
                    self.x[v] = 0.0;
                }
            }
        }
        self.recompute_basic_values();
        Ok(true)
    }

    fn max_violation(&self) -> f64 {
        let (n, m) = (self.n, self.m);
        let mut worst = 0.0f64;
        for i in 0..m {
            let lhs = dot(self.orig_a.row(i), &self.x[..n]);
            let s = 1.0 + self.b[i].abs();
            worst = worst.max((lhs - self.b[i]) / s);
        }
        for j in 0..n {
            let s = 1.0 + self.x[j].abs();
            worst = worst.max((self.lower[j] - self.x[j]) / s).max((self.x[j] - self.upper[j]) / s);
        }
        worst
    }

    fn optimize(&mut self, cost: &[f64]) -> Result<Outcome> {
        let outcome = self.run(cost)?;
        if outcome == Outcome::Optimal && self.max_violation() > self.opts.feasibility_tol * 10.0 {
            self.refactor()?;
            let outcome = self.run(cost)?;
            if self.max_violation() > 1e-8 {
                return Err(Error::SolverStalled { iterations: self.last_pivots });
            }
            return Ok(outcome);
        }
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(obj: Vec<f64>, rows: Vec<Vec<f64>>, rhs: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>, sense: Sense) -> LpProblem {
        let p = obj.len();
        let constraints = if rows.is_empty() { Matrix::zeros(0, p) } else { Matrix::from_rows(&rows).unwrap() };
        LpProblem { objective: obj, constraints, rhs, lower, upper, sense }
    }

    #[test]
    fn max_sum_with_cut() {
        let p = lp(vec![1.0, 1.0], vec![vec![1.0, 1.0]], vec![0.0], vec![-1.0; 2], vec![1.0; 2], Sense::Maximize);
        let s = solve(&p).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!(s.value.abs() < 1e-12);
    }

    #[test]
    fn fixed_variable() {
        let p = lp(vec![1.0], vec![], vec![], vec![3.0], vec![3.0], Sense::Minimize);
        let s = solve(&p).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_eq!(s.value, 3.0);
        assert_eq!(s.witness, vec![3.0]);
    }

    #[test]
    fn contradictory_bounds_and_row() {
        // a1 <= -2 as a row, a1 >= 1 as a bound.
        let p = lp(vec![1.0], vec![vec![1.0]], vec![-2.0], vec![1.0], vec![f64::INFINITY], Sense::Minimize);
        let s = solve(&p).unwrap();
        assert_eq!(s.status, LpStatus::Infeasible);
    }

    #[test]
    fn unbounded_direction() {
        let p = lp(vec![1.0, 0.0], vec![vec![-1.0, 1.0]], vec![1.0], vec![0.0, 0.0], vec![f64::INFINITY; 2], Sense::Maximize);
        let s = solve(&p).unwrap();
        assert_eq!(s.status, LpStatus::Unbounded);
        assert_eq!(s.value, f64::INFINITY);
    }

    #[test]
    fn free_variables_need_phase_one() {
        // min x + y  s.t. x + y >= 2 (as -x - y <= -2), x - y <= 1, x,y free
        let p = lp(
            vec![1.0, 1.0],
            vec![vec![-1.0, -1.0], vec![1.0, -1.0], vec![-1.0, 1.0]],
            vec![-2.0, 1.0, 1.0],
            vec![f64::NEG_INFINITY; 2],
            vec![f64::INFINITY; 2],
            Sense::Minimize,
        );
        let s = solve(&p).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.value - 2.0).abs() < 1e-9);
    }

    #[test]
    fn equality_as_two_inequalities() {
        // x + 2y = 4, min x, 0 <= x,y <= 3  -> y = 2 (max allowed 3), x = 0.
        let p = lp(
            vec![1.0, 0.0],
            vec![vec![1.0, 2.0], vec![-1.0, -2.0]],
            vec![4.0, -4.0],
            vec![0.0; 2],
            vec![3.0; 2],
            Sense::Minimize,
        );
        let s = solve(&p).unwrap();
        assert!((s.value - 0.0).abs() < 1e-9);
        assert!((s.witness[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn warm_start_reuses_basis() {
        let p = lp(
            vec![1.0, 2.0, -1.0],
            vec![vec![1.0, 1.0, 1.0], vec![-1.0, 2.0, 0.0], vec![0.0, -1.0, 3.0]],
            vec![2.0, 1.5, 2.0],
            vec![-1.0; 3],
            vec![1.0; 3],
            Sense::Maximize,
        );
        let cold = solve(&p).unwrap();
        let warm = solve_with_basis(&p, cold.basis.as_ref().unwrap()).unwrap();
        assert_eq!(warm.status, LpStatus::Optimal);
        assert!((warm.value - cold.value).abs() < 1e-10);
        assert_eq!(warm.iterations, 0);
    }

    #[test]
    fn bound_solver_sequence_matches_cold_solves() {
        let rows = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-2.0, 1.0]];
        let a = Matrix::from_rows(&rows).unwrap();
        let b = vec![1.0, 0.5, 1.0];
        let (l, u) = (vec![-2.0; 2], vec![2.0; 2]);
        let mut bs = BoundSolver::new(&a, &b, &l, &u).unwrap();
        for obj in [[1.0, 0.0], [0.0, 1.0], [1.0, -3.0], [-0.5, 2.0]] {
            for sense in [Sense::Minimize, Sense::Maximize] {
                let w = bs.optimize(&obj, sense).unwrap();
                let c = solve(&LpProblem {
                    objective: obj.to_vec(),
                    constraints: a.clone(),
                    rhs: b.clone(),
                    lower: l.clone(),
                    upper: u.clone(),
                    sense,
                })
                .unwrap();
                assert!((w.value - c.value).abs() < 1e-10, "{obj:?} {sense:?}");
            }
        }
    }

    #[test]
    fn rejects_bad_bounds() {
        let p = lp(vec![1.0], vec![], vec![], vec![2.0], vec![1.0], Sense::Minimize);
        assert!(matches!(solve(&p), Err(Error::InvalidArgument(_))));
    }
}
