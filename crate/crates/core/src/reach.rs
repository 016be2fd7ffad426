//! Closed-loop reachability: interval dynamics, the one-step operator
//! (state bounds, decoder image star, controller action bounds, dynamics,
//! re-wrap), reach tubes and parallel grid sweeps.

use crate::env::EnvModel;
use crate::error::{invalid, Error, Result};
use crate::interval::{Dual, Interval};
use crate::linalg::Matrix;
use crate::nn::{Diagnostics, Network, PropagateOptions};
use crate::star::{Hyperbox, StarSet};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Half-width of the latent box a latent-padded decoder is verified over.
pub const LATENT_BOUND: f64 = 0.8;

/// Uniform partition of an initial region, optionally subsampled by a
/// per-dimension stride (cell `i` of the strided grid is cell `i * stride`
/// of the full grid).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub delta: Vec<f64>,
    #[serde(default)]
    pub stride: Vec<usize>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, delta: Vec<f64>) -> Result<Self> {
        let g = Self { stride: vec![1; lower.len()], lower, upper, delta };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.lower.len();
        if n == 0 || self.upper.len() != n || self.delta.len() != n {
            return invalid("grid bounds and cell widths must have the same non-zero length");
        }
        if !self.stride.is_empty() && (self.stride.len() != n || self.stride.contains(&0)) {
            return invalid("grid stride must give one positive entry per dimension");
        }
        for i in 0..n {
            let (lo, hi, d) = (self.lower[i], self.upper[i], self.delta[i]);
            if !(d > 0.0) || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return invalid(format!("grid dimension {i}: range [{lo}, {hi}] with cell width {d}"));
            }
            let cells = (hi - lo) / d;
            if (cells - cells.round()).abs() > 0.005 * cells.round().max(1.0) {
                return invalid(format!("grid dimension {i}: width {d} does not tile [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    pub fn with_stride(mut self, stride: Vec<usize>) -> Result<Self> {
        self.stride = stride;
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn stride(&self, i: usize) -> usize {
        self.stride.get(i).copied().unwrap_or(1)
    }

    /// Cells per dimension of the unstrided grid.
    pub fn full_counts(&self) -> Vec<usize> {
        (0..self.dim()).map(|i| ((self.upper[i] - self.lower[i]) / self.delta[i]).round() as usize).collect()
    }

    /// Cells per dimension after striding.
    pub fn shape(&self) -> Vec<usize> {
        self.full_counts().iter().enumerate().map(|(i, &c)| c.div_ceil(self.stride(i))).collect()
    }

    pub fn num_cells(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn region(&self) -> Hyperbox {
        Hyperbox::new(self.lower.clone(), self.upper.clone()).expect("validated grid")
    }

    /// Multi-index of linear cell `k` (last dimension fastest).
    pub fn index(&self, mut k: usize) -> Vec<usize> {
        let shape = self.shape();
        let mut idx = vec![0; shape.len()];
        for i in (0..shape.len()).rev() {
            idx[i] = k % shape[i];
            k /= shape[i];
        }
        idx
    }

    pub fn cell(&self, k: usize) -> Hyperbox {
        let idx = self.index(k);
        let counts = self.full_counts();
        let mut lo = Vec::with_capacity(idx.len());
        let mut hi = Vec::with_capacity(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            let f = j * self.stride(i);
            lo.push(self.lower[i] + f as f64 * self.delta[i]);
            hi.push(if f + 1 == counts[i] { self.upper[i] } else { self.lower[i] + (f + 1) as f64 * self.delta[i] });
        }
        Hyperbox::new(lo, hi).expect("ordered cell")
    }

    pub fn cells(&self) -> impl Iterator<Item = Hyperbox> + '_ {
        (0..self.num_cells()).map(|k| self.cell(k))
    }

    /// Linear index of a selected cell containing `x`, if any.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let counts = self.full_counts();
        let shape = self.shape();
        let mut k = 0;
        for i in 0..self.dim() {
            if !(x[i] >= self.lower[i] && x[i] <= self.upper[i]) {
                return None;
            }
            let f = (((x[i] - self.lower[i]) / self.delta[i]).floor() as usize).min(counts[i] - 1);
            if f % self.stride(i) != 0 {
                return None;
            }
            k = k * shape[i] + f / self.stride(i);
        }
        Some(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    VerifiedGoal,
    NotVerified,
    Infeasible,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::VerifiedGoal => "verified-goal",
            Verdict::NotVerified => "not-verified",
            Verdict::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReachOptions {
    pub horizon: usize,
    /// Stop with not-verified once a state-box width exceeds this multiple of
    /// the state-space width.
    pub blowup_factor: f64,
    /// Keep the star between steps (linearised dynamics plus a remainder
    /// box) instead of re-wrapping the state bounds as a fresh box star.
    pub carry_star: bool,
    pub propagate: PropagateOptions,
    /// Keep the per-step stars in the tube.
    pub keep_stars: bool,
}

impl Default for ReachOptions {
    fn default() -> Self {
        Self { horizon: 20, blowup_factor: 10.0, carry_star: false, propagate: PropagateOptions::default(), keep_stars: false }
    }
}

#[derive(Debug, Clone)]
pub struct ReachTube {
    pub cell: usize,
    /// `S_0 ... S_T` as full-state boxes; shorter when the computation stopped early.
    pub boxes: Vec<Hyperbox>,
    /// Action bounds applied at each step.
    pub actions: Vec<Interval>,
    pub verdict: Verdict,
    pub diagnostic: Option<String>,
    pub stars: Vec<StarSet>,
    pub seconds: f64,
    pub lp_refined: usize,
    pub lp_skipped: usize,
}

impl ReachTube {
    pub fn final_box(&self) -> &Hyperbox {
        self.boxes.last().expect("tube has an initial box")
    }

    /// Whether the tube reached the full horizon.
    pub fn is_complete(&self, horizon: usize) -> bool {
        self.boxes.len() == horizon + 1
    }
}

/// Sound enclosure of `{f(s, u) | s in s_box, u in u_box}`: the natural
/// interval extension intersected with the mean-value form.
pub fn dyn_overapprox(env: &EnvModel, s_box: &Hyperbox, u_box: Interval) -> Result<Hyperbox> {
    let n = env.state_dim();
    if s_box.dim() != n {
        return invalid(format!("state box has dimension {}, expected {n}", s_box.dim()));
    }
    if !s_box.is_finite() || !u_box.is_finite() {
        return Err(Error::NumericalDomain("non-finite state or action bounds".into()));
    }
    let (ulo, uhi) = env.action_range();
    let u_box = u_box.clip(ulo, uhi);
    let s_iv = s_box.intervals();
    let natural = env.dynamics(&s_iv, u_box);
    let mv = mean_value_form(env, &s_iv, u_box);
    let mut out = Vec::with_capacity(n);
    for (i, nat) in natural.into_iter().enumerate() {
        let best = match mv.as_ref().and_then(|m| m[i]) {
            Some(m) => nat.intersect(&m).unwrap_or(nat),
            None => nat,
        };
        out.push(best);
    }
    let b = Hyperbox::from_intervals(&out);
    if !b.is_finite() {
        return Err(Error::NumericalDomain(format!("dynamics enclosure is not finite: {b:?}")));
    }
    Ok(b)
}

/// `f(c) + J(X) (X - c)` per output, `None` where the output is not smooth.
fn mean_value_form(env: &EnvModel, s: &[Interval], u: Interval) -> Option<Vec<Option<Interval>>> {
    const N: usize = 5;
    let n = s.len();
    if n + 1 > N {
        return None;
    }
    let mut vars: Vec<Dual<N>> = s.iter().enumerate().map(|(i, &iv)| Dual::variable(iv, i)).collect();
    vars.truncate(n);
    let du = Dual::variable(u, n);
    let jac = env.dynamics(&vars, du);
    let centre: Vec<Interval> = s.iter().map(|iv| Interval::point(iv.mid())).collect();
    let uc = Interval::point(u.mid());
    let fc = env.dynamics(&centre, uc);
    let mut offsets: Vec<Interval> = s.iter().zip(&centre).map(|(&x, &c)| x - c).collect();
    offsets.push(u - uc);
    Some(
        jac.iter()
            .zip(fc)
            .map(|(d, f)| {
                d.smooth.then(|| (0..=n).fold(f, |acc, j| acc + d.d[j] * offsets[j])).filter(Interval::is_finite)
            })
            .collect(),
    )
}

/// Linearisation of the dynamics around the box centre, for carry-star mode:
/// `f(s, u) in f(c) + A (s - c_s) + R` for all `s` in the box and `u` in `u_box`.
fn linearize(env: &EnvModel, s_box: &Hyperbox, u_box: Interval) -> Option<(Matrix, Vec<f64>, Hyperbox)> {
    const N: usize = 5;
    let n = env.state_dim();
    let s: Vec<Interval> = s_box.intervals();
    let vars: Vec<Dual<N>> = s.iter().enumerate().map(|(i, &iv)| Dual::variable(iv, i)).collect();
    let jac = env.dynamics(&vars, Dual::variable(u_box, n));
    if jac.iter().any(|d| !d.smooth) {
        return None;
    }
    let c: Vec<f64> = s.iter().map(Interval::mid).collect();
    let fc = env.dynamics(&c.iter().map(|&v| Interval::point(v)).collect::<Vec<_>>(), Interval::point(u_box.mid()));
    let mut a = Matrix::zeros(n, n);
    let mut rem = Vec::with_capacity(n);
    for i in 0..n {
        // f(s) - f(c) - A (s - c) = (J - A)(s - c) + J_u (u - u_c)
        let mut r = fc[i];
        for j in 0..n {
            let aij = jac[i].d[j].mid();
            a.set(i, j, aij);
            r = r + (jac[i].d[j] - Interval::point(aij)) * (s[j] - Interval::point(c[j]));
        }
        r = r + jac[i].d[n] * (u_box - Interval::point(u_box.mid()));
        // Also absorb rounding of the affine map A (s - c) itself.
        let ac: f64 = (0..n).map(|j| a.get(i, j) * c[j]).sum();
        let mag: f64 = (0..n).map(|j| (a.get(i, j) * c[j]).abs()).sum();
        r = r - Interval::point(ac).inflate(1e-12 * (1.0 + mag));
        if !r.is_finite() {
            return None;
        }
        rem.push(r);
    }
    Some((a, vec![0.0; n], Hyperbox::from_intervals(&rem)))
}

/// Everything the one-step operator needs besides the state set.
#[derive(Clone, Copy)]
pub struct ClosedLoop<'a> {
    pub env: &'a EnvModel,
    pub decoder: &'a Network,
    pub controller: &'a Network,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub next: StarSet,
    pub next_box: Hyperbox,
    pub action: Interval,
}

impl ClosedLoop<'_> {
    /// The image star a decoder produces over the verified components of `s`
    /// (plus the latent box for latent-padded decoders).
    pub fn image_star(&self, s: &StarSet, opts: &PropagateOptions, diag: &mut Diagnostics) -> Result<StarSet> {
        let obs = s.project(self.env.verified_dims())?;
        let latent = self.decoder.input_shape().len().checked_sub(obs.dim()).ok_or_else(|| {
            Error::InvalidArgument("decoder input is smaller than the verified state".into())
        })?;
        let input = if latent > 0 {
            obs.product_box(&Hyperbox::new(vec![-LATENT_BOUND; latent], vec![LATENT_BOUND; latent])?)?
        } else {
            obs
        };
        self.decoder.propagate_star_range(&input, 0..self.decoder.layers().len(), opts, diag)
    }

    /// One application of the closed-loop operator.
    pub fn phi_step(&self, s: &StarSet, opts: &ReachOptions, diag: &mut Diagnostics) -> Result<StepResult> {
        if !s.is_feasible()? {
            return Err(Error::InfeasibleStar);
        }
        let s_box = s.bounds_of(None)?;
        let image = self.image_star(s, &opts.propagate, diag)?;
        let u = self.controller.scalar_output_bounds(&image, &opts.propagate, diag)?;
        let (ulo, uhi) = self.env.action_range();
        let action = u.interval(0).clip(ulo, uhi);
        let next_box = dyn_overapprox(self.env, &s_box, action)?;
        let carried = if opts.carry_star { linearize(self.env, &s_box, action) } else { None };
        let next = match carried {
            Some((a, b, rem)) => s.affine_map(&a, &b)?.minkowski_box(&rem)?,
            None => StarSet::from_box(&next_box)?,
        };
        Ok(StepResult { next, next_box, action })
    }

    /// Iterates the operator `horizon` times from `cell` (verified components).
    pub fn reach_tube(&self, cell_id: usize, cell: &Hyperbox, opts: &ReachOptions) -> ReachTube {
        let start = Instant::now();
        let mut diag = Diagnostics::default();
        let s0 = self.env.embed_box(cell);
        let mut tube = ReachTube {
            cell: cell_id,
            boxes: vec![s0.clone()],
            actions: Vec::with_capacity(opts.horizon),
            verdict: Verdict::NotVerified,
            diagnostic: None,
            stars: Vec::new(),
            seconds: 0.0,
            lp_refined: 0,
            lp_skipped: 0,
        };
        let space = self.env.state_space();
        let result = (|| -> Result<()> {
            let mut s = StarSet::from_box(&s0)?;
            if self.env.unsafe_intersects_box(&s0) {
                return Err(Error::InvalidArgument("initial cell meets the unsafe region".into()));
            }
            for t in 0..opts.horizon {
                if opts.keep_stars {
                    tube.stars.push(s.clone());
                }
                let step = self.phi_step(&s, opts, &mut diag)?;
                let b = if opts.carry_star { step.next.bounds_of(None)?.intersect_with(&step.next_box) } else { step.next_box };
                tube.actions.push(step.action);
                tube.boxes.push(b.clone());
                if let Some(i) = (0..b.dim()).find(|&i| b.width(i) > opts.blowup_factor * space.width(i)) {
                    return Err(Error::NumericalDomain(format!("blow-up in state {i} at step {}", t + 1)));
                }
                if self.env.unsafe_intersects_box(&b) {
                    return Err(Error::InvalidArgument(format!("reach set meets the unsafe region at step {}", t + 1)));
                }
                s = step.next;
            }
            if opts.keep_stars {
                tube.stars.push(s);
            }
            Ok(())
        })();
        match result {
            Ok(()) => {
                tube.verdict =
                    if self.env.goal_contains_box(tube.final_box()) { Verdict::VerifiedGoal } else { Verdict::NotVerified };
            }
            Err(Error::InfeasibleStar) => {
                tube.verdict = Verdict::Infeasible;
                tube.diagnostic = Some("empty state set".into());
            }
            Err(e) => {
                tube.verdict = Verdict::NotVerified;
                tube.diagnostic = Some(e.to_string());
            }
        }
        tube.seconds = start.elapsed().as_secs_f64();
        tube.lp_refined = diag.lp_refined;
        tube.lp_skipped = diag.lp_skipped;
        tube
    }

    /// One tube per grid cell. Cells are split into contiguous blocks, one
    /// per worker, so the result does not depend on `workers`.
    pub fn sweep_grid(&self, grid: &GridSpec, opts: &ReachOptions, workers: usize) -> SafetyMap {
        let n = grid.num_cells();
        let tubes = parallel_map(n, workers, |k| {
            let tube = self.reach_tube(k, &grid.cell(k), opts);
            log::debug!("cell {k}/{n}: {} in {:.3}s", tube.verdict.name(), tube.seconds);
            tube
        });
        SafetyMap { grid: grid.clone(), horizon: opts.horizon, tubes }
    }
}

impl Hyperbox {
    /// Coordinate-wise intersection, falling back to `other` where empty.
    pub fn intersect_with(&self, other: &Hyperbox) -> Hyperbox {
        let iv: Vec<Interval> =
            self.intervals().iter().zip(other.intervals()).map(|(a, b)| a.intersect(&b).unwrap_or(b)).collect();
        Hyperbox::from_intervals(&iv)
    }
}

/// `f(0..n)` computed on `workers` threads over contiguous blocks, in order.
pub fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let block = n.div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| scope.spawn(move || (w * block..((w + 1) * block).min(n)).map(f).collect::<Vec<T>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Per-cell verdicts of a sweep together with the tubes behind them.
#[derive(Debug, Clone)]
pub struct SafetyMap {
    pub grid: GridSpec,
    pub horizon: usize,
    pub tubes: Vec<ReachTube>,
}

impl SafetyMap {
    pub fn verdicts(&self) -> Vec<Verdict> {
        self.tubes.iter().map(|t| t.verdict).collect()
    }

    pub fn verified_count(&self) -> usize {
        self.tubes.iter().filter(|t| t.verdict == Verdict::VerifiedGoal).count()
    }

    pub fn total_seconds(&self) -> f64 {
        self.tubes.iter().map(|t| t.seconds).sum()
    }
}
