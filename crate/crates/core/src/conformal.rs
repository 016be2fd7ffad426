//! Split conformal bounds on the gap between world-model and real-camera
//! trajectories, and their use to inflate reach tubes.
//!
//! A score is the largest per-step L1 distance between paired trajectories,
//! measured on the verified state components. With `k` calibration scores
//! the bound is the `ceil((k + 1)(1 - alpha))`-th smallest one; when that
//! rank is `k + 1` the bound is infinite.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Camera, EnvModel, Source, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::formats::{network_hash, sha256_hex};
use crate::nn::Network;
use crate::reach::{parallel_map, GridSpec, ReachTube, SafetyMap, Verdict};
use crate::star::Hyperbox;
use crate::training::{item_rng, uniform_in};

pub const CERTIFICATE_VERSION: u32 = 1;

/// Which tube steps are widened by the conformal bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InflateMode {
    /// Only the final box, which is what the goal check reads.
    #[default]
    Final,
    /// Every box, so unsafe-set checks also see the widened sets.
    All,
}

impl FromStr for InflateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(InflateMode::Final),
            "all" => Ok(InflateMode::All),
            _ => invalid(format!("inflate mode must be final or all, got {s:?}")),
        }
    }
}

/// Max over steps of the L1 distance on the verified components.
pub fn score(env: &EnvModel, real: &Trajectory, wm: &Trajectory) -> Result<f64> {
    if real.source != Source::RealCamera || wm.source != Source::WorldModel {
        return Err(Error::InvalidPairing("expected a real-camera and a world-model trajectory".into()));
    }
    if real.states.len() != wm.states.len() {
        return Err(Error::InvalidPairing(format!(
            "horizons differ: {} vs {}",
            real.horizon(),
            wm.horizon()
        )));
    }
    if real.initial() != wm.initial() {
        return Err(Error::InvalidPairing("trajectories start from different states".into()));
    }
    let dims = env.verified_dims();
    Ok(real
        .states
        .iter()
        .zip(&wm.states)
        .map(|(a, b)| dims.iter().map(|&i| (a[i] - b[i]).abs()).sum::<f64>())
        .fold(0.0, f64::max))
}

/// 1-based rank `ceil((k + 1)(1 - alpha))`; a value of `k + 1` selects the
/// infinite sentinel.
pub fn rank(k: usize, alpha: f64) -> Result<usize> {
    if k == 0 {
        return invalid("need at least one calibration score");
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    let x = (k as f64 + 1.0) * (1.0 - alpha);
    // Products such as 20 * 0.95 land a hair above the integer they denote.
    let r = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    Ok((r as usize).clamp(1, k + 1))
}

/// The conformal bound from ascending scores; `None` stands for `+inf`.
pub fn quantile(sorted: &[f64], alpha: f64) -> Result<Option<f64>> {
    let r = rank(sorted.len(), alpha)?;
    Ok(sorted.get(r - 1).copied())
}

/// Uniform distribution over the union of the cells of a grid.
///
/// Cells of one grid share a volume, so drawing a cell uniformly and then a
/// point uniformly inside it is uniform on the union.
#[derive(Debug, Clone)]
pub struct InitialDistribution<'a> {
    pub env: &'a EnvModel,
    pub grid: &'a GridSpec,
}

impl InitialDistribution<'_> {
    /// A full state and the cell it was drawn from.
    pub fn sample(&self, rng: &mut impl Rng) -> (Vec<f64>, usize) {
        let cell = rng.gen_range(0..self.grid.num_cells());
        let b = self.grid.cell(cell);
        (self.env.embed(&uniform_in(rng, b.lower(), b.upper())), cell)
    }

    pub fn descriptor(&self) -> String {
        serde_json::to_string(self.grid).expect("grid serializes")
    }
}

pub fn env_hash(env: &EnvModel) -> String {
    sha256_hex(serde_json::to_string(env).expect("environment serializes").as_bytes())
}

/// Real-camera and world-model trajectories from the same initial state.
pub fn paired_rollout(
    env: &EnvModel,
    decoder: &Network,
    controller: &Network,
    s0: &[f64],
    horizon: usize,
) -> Result<(Trajectory, Trajectory)> {
    Ok((
        env.rollout(controller, Camera::Real, s0, horizon)?,
        env.rollout(controller, Camera::Decoder(decoder), s0, horizon)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCertificate {
    pub version: u32,
    pub alpha: f64,
    pub k: usize,
    pub horizon: usize,
    /// 1-based rank of the selected score; `k + 1` means unbounded.
    pub rank: usize,
    /// Ascending calibration scores; the `+inf` sentinel is implicit.
    pub scores: Vec<f64>,
    /// `None` when the rank selects the sentinel.
    pub quantile: Option<f64>,
    pub env: String,
    pub env_hash: String,
    pub decoder_hash: String,
    pub controller_hash: String,
    /// Grid whose cells make up the initial distribution.
    pub initial: GridSpec,
    pub seed: u64,
}

impl ConformalCertificate {
    /// The bound as a number, `+inf` when unbounded.
    pub fn delta(&self) -> f64 {
        self.quantile.unwrap_or(f64::INFINITY)
    }

    /// The same scores at another miscoverage level.
    pub fn requantize(&self, alpha: f64) -> Result<Self> {
        Ok(Self { alpha, rank: rank(self.k, alpha)?, quantile: quantile(&self.scores, alpha)?, ..self.clone() })
    }

    /// Refuses use with networks or dynamics other than the calibrated ones.
    pub fn check_provenance(&self, env: &EnvModel, decoder: &Network, controller: &Network) -> Result<()> {
        let checks = [
            ("environment", &self.env_hash, env_hash(env)),
            ("decoder", &self.decoder_hash, network_hash(decoder)),
            ("controller", &self.controller_hash, network_hash(controller)),
        ];
        for (what, want, got) in checks {
            if *want != got {
                return Err(Error::ProvenanceMismatch(format!(
                    "certificate was calibrated for {what} {}, got {}",
                    &want[..want.len().min(12)],
                    &got[..got.len().min(12)]
                )));
            }
        }
        Ok(())
    }
}

/// Scores `k` paired rollouts from the initial distribution. Trajectory `i`
/// uses its own random stream, so the result does not depend on `workers`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    env: &EnvModel,
    decoder: &Network,
    controller: &Network,
    initial: &GridSpec,
    k: usize,
    alpha: f64,
    horizon: usize,
    seed: u64,
    workers: usize,
) -> Result<ConformalCertificate> {
    let r = rank(k, alpha)?;
    initial.validate()?;
    let d0 = InitialDistribution { env, grid: initial };
    let scores = parallel_map(k, workers, |i| {
        let (s0, _) = d0.sample(&mut item_rng(seed, i as u64));
        let (real, wm) = paired_rollout(env, decoder, controller, &s0, horizon)?;
        score(env, &real, &wm)
    });
    let mut scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    scores.sort_by(f64::total_cmp);
    Ok(ConformalCertificate {
        version: CERTIFICATE_VERSION,
        alpha,
        k,
        horizon,
        rank: r,
        quantile: scores.get(r - 1).copied(),
        scores,
        env: env.kind().name().to_string(),
        env_hash: env_hash(env),
        decoder_hash: network_hash(decoder),
        controller_hash: network_hash(controller),
        initial: initial.clone(),
        seed,
    })
}

/// Widens the verified components of a box by `delta`. This box contains
/// the L1 ball of radius `delta` around every point of the original.
pub fn inflate_box(env: &EnvModel, b: &Hyperbox, delta: f64) -> Hyperbox {
    let mut iv = b.intervals();
    for &i in env.verified_dims() {
        iv[i] = iv[i].inflate(delta);
    }
    Hyperbox::from_intervals(&iv)
}

/// The tube with its final box (or every box) widened by `delta` and the
/// verdict recomputed. Tubes that stopped early stay not-verified.
pub fn inflate(env: &EnvModel, tube: &ReachTube, delta: f64, mode: InflateMode) -> ReachTube {
    let mut out = tube.clone();
    if tube.verdict == Verdict::Infeasible {
        return out;
    }
    if !delta.is_finite() {
        out.verdict = Verdict::NotVerified;
        out.diagnostic = Some("conformal bound is infinite".into());
        return out;
    }
    if delta == 0.0 {
        return out;
    }
    let last = out.boxes.len() - 1;
    for (t, b) in out.boxes.iter_mut().enumerate() {
        if t == last || (mode == InflateMode::All && t > 0) {
            *b = inflate_box(env, b, delta);
        }
    }
    if tube.verdict == Verdict::VerifiedGoal {
        let checked = if mode == InflateMode::All { &out.boxes[1..] } else { &out.boxes[last..] };
        if checked.iter().any(|b| env.unsafe_intersects_box(b)) {
            out.verdict = Verdict::NotVerified;
            out.diagnostic = Some("inflated reach set meets the unsafe region".into());
        } else if !env.goal_contains_box(out.final_box()) {
            out.verdict = Verdict::NotVerified;
            out.diagnostic = Some("inflated final box leaves the goal".into());
        }
    }
    out
}

pub fn inflate_map(env: &EnvModel, map: &SafetyMap, delta: f64, mode: InflateMode) -> SafetyMap {
    SafetyMap { tubes: map.tubes.iter().map(|t| inflate(env, t, delta, mode)).collect(), ..map.clone() }
}

/// Fresh-sample check of the certificate and of tube containment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub n_test: usize,
    /// Test trajectories whose score is at most the bound.
    pub covered: usize,
    pub score_coverage: f64,
    /// Covered trajectories whose final real state lies in the inflated final box of their cell.
    pub final_contained: usize,
    /// Covered trajectories whose every real state lies in the step-wise inflated tube.
    pub tube_contained: usize,
    /// Covered trajectories whose cell tube stopped before the horizon.
    pub incomplete_tubes: usize,
}

impl CoverageReport {
    /// Fraction of covered trajectories inside their inflated final box.
    pub fn final_containment(&self) -> f64 {
        let n = self.covered - self.incomplete_tubes;
        if n == 0 {
            1.0
        } else {
            self.final_contained as f64 / n as f64
        }
    }

    pub fn tube_containment(&self) -> f64 {
        let n = self.covered - self.incomplete_tubes;
        if n == 0 {
            1.0
        } else {
            self.tube_contained as f64 / n as f64
        }
    }
}

fn contains_verified(env: &EnvModel, b: &Hyperbox, s: &[f64]) -> bool {
    env.verified_dims().iter().all(|&i| b.interval(i).contains(s[i]))
}

/// Draws `n_test` fresh initial states from the certificate's distribution,
/// scores them and, given the (non-inflated) safety map over the same grid,
/// checks the real trajectories against the inflated tubes of their cells.
#[allow(clippy::too_many_arguments)]
pub fn validate_coverage(
    env: &EnvModel,
    decoder: &Network,
    controller: &Network,
    cert: &ConformalCertificate,
    map: Option<&SafetyMap>,
    n_test: usize,
    seed: u64,
    workers: usize,
) -> Result<CoverageReport> {
    cert.check_provenance(env, decoder, controller)?;
    if let Some(m) = map {
        if m.grid != cert.initial || m.horizon != cert.horizon {
            return invalid("safety map grid or horizon differs from the certificate");
        }
    }
    let delta = cert.delta();
    let d0 = InitialDistribution { env, grid: &cert.initial };
    let rows = parallel_map(n_test, workers, |i| -> Result<(bool, bool, bool, bool)> {
        let (s0, cell) = d0.sample(&mut item_rng(seed, i as u64));
        let (real, wm) = paired_rollout(env, decoder, controller, &s0, cert.horizon)?;
        let covered = score(env, &real, &wm)? <= delta;
        let (mut fin, mut all, mut incomplete) = (false, false, false);
        if let (true, Some(m)) = (covered, map) {
            let tube = &m.tubes[cell];
            if !tube.is_complete(cert.horizon) {
                incomplete = true;
            } else if delta.is_finite() {
                let boxes = &inflate(env, tube, delta, InflateMode::All).boxes;
                fin = contains_verified(env, &boxes[cert.horizon], real.last());
                all = real.states.iter().zip(boxes).all(|(s, b)| contains_verified(env, b, s));
            } else {
                (fin, all) = (true, true);
            }
        }
        Ok((covered, fin, all, incomplete))
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let count = |f: fn(&(bool, bool, bool, bool)) -> bool| rows.iter().filter(|r| f(r)).count();
    let covered = count(|r| r.0);
    Ok(CoverageReport {
        n_test,
        covered,
        score_coverage: if n_test == 0 { 1.0 } else { covered as f64 / n_test as f64 },
        final_contained: count(|r| r.1),
        tube_contained: count(|r| r.2),
        incomplete_tubes: count(|r| r.3),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvKind;
    use crate::interval::Interval;
    use crate::nn::arch::{self, OutputActivation};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj(states: Vec<Vec<f64>>, source: Source) -> Trajectory {
        let actions = vec![0.0; states.len() - 1];
        Trajectory { states, actions, source }
    }

    #[test]
    fn score_examples() {
        let env = EnvModel::new(EnvKind::Pendulum, 8, 8);
        let real = traj(vec![vec![1.0, 0.0], vec![1.2, 0.1], vec![0.5, 0.3]], Source::RealCamera);
        let same = Trajectory { source: Source::WorldModel, ..real.clone() };
        assert_eq!(score(&env, &real, &same).unwrap(), 0.0);
        // Per-step L1 gaps 0, 0.3, 0.7, 0.4.
        let a = traj(vec![vec![0.0, 0.0], vec![0.1, 0.2], vec![0.5, -0.2], vec![0.0, 0.4]], Source::RealCamera);
        let b = traj(vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]], Source::WorldModel);
        assert!((score(&env, &a, &b).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn score_reads_only_verified_components() {
        let env = EnvModel::new(EnvKind::CartPole, 8, 8);
        let a = traj(vec![vec![0.0; 4], vec![0.0, 5.0, 0.2, -5.0]], Source::RealCamera);
        let b = traj(vec![vec![0.0; 4], vec![0.0, 0.0, -0.3, 0.0]], Source::WorldModel);
        assert!((score(&env, &a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mismatched_pairs_are_rejected() {
        let env = EnvModel::new(EnvKind::Pendulum, 8, 8);
        let a = traj(vec![vec![1.0, 0.0], vec![1.0, 0.0]], Source::RealCamera);
        let b = traj(vec![vec![1.0, 0.1], vec![1.0, 0.0]], Source::WorldModel);
        let c = traj(vec![vec![1.0, 0.0]], Source::WorldModel);
        let d = Trajectory { source: Source::RealCamera, ..b.clone() };
        for (x, y) in [(&a, &b), (&a, &c), (&a, &d)] {
            assert!(matches!(score(&env, x, y), Err(Error::InvalidPairing(_))));
        }
    }

    #[test]
    fn rank_formula() {
        assert_eq!(rank(19, 0.05).unwrap(), 19);
        assert_eq!(rank(5, 0.05).unwrap(), 6);
        assert_eq!(rank(500, 0.05).unwrap(), 476);
        assert_eq!(rank(100, 0.1).unwrap(), 91);
        let scores: Vec<f64> = (1..=19).map(f64::from).collect();
        assert_eq!(quantile(&scores, 0.05).unwrap(), Some(19.0));
        assert_eq!(quantile(&scores[..5], 0.05).unwrap(), None);
        assert!(rank(0, 0.1).is_err() && rank(3, 0.0).is_err() && rank(3, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn quantile_matches_direct_selection(
            mut s in prop::collection::vec(0.0f64..10.0, 1..60),
            alpha in 0.01f64..0.99,
        ) {
            s.sort_by(f64::total_cmp);
            let k = s.len();
            // Oracle: smallest r with r >= (k + 1)(1 - alpha), by exact rational search.
            let need = (k as f64 + 1.0) * (1.0 - alpha);
            let r = (1..=k + 1).find(|&r| r as f64 >= need - 1e-9).unwrap();
            let mut with_sentinel = s.clone();
            with_sentinel.push(f64::INFINITY);
            let got = quantile(&s, alpha).unwrap().unwrap_or(f64::INFINITY);
            prop_assert_eq!(got, with_sentinel[r - 1]);
        }
    }

    #[test]
    fn marginal_coverage_over_repeated_splits() {
        // Exchangeable scores: 200 splits of k = 100 calibration and 100 test draws.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut total = 0.0;
        for _ in 0..200 {
            let mut cal: Vec<f64> = (0..100).map(|_| rng.gen::<f64>().powi(3)).collect();
            cal.sort_by(f64::total_cmp);
            let q = quantile(&cal, 0.1).unwrap().unwrap();
            total += (0..100).filter(|_| rng.gen::<f64>().powi(3) <= q).count() as f64 / 100.0;
        }
        let mean = total / 200.0;
        assert!((0.88..=0.95).contains(&mean), "mean coverage {mean}");
    }

    fn tube(boxes: Vec<Hyperbox>, verdict: Verdict) -> ReachTube {
        ReachTube {
            cell: 0,
            actions: vec![Interval::point(0.0); boxes.len() - 1],
            boxes,
            verdict,
            diagnostic: None,
            stars: Vec::new(),
            seconds: 0.0,
            lp_refined: 0,
            lp_skipped: 0,
        }
    }

    #[test]
    fn inflation_can_revoke_a_goal_verdict() {
        let env = EnvModel::new(EnvKind::MountainCar, 8, 8);
        let mut env_goal = env.clone();
        if let crate::env::Physics::MountainCar(p) = &mut env_goal.physics {
            p.goal_position = 0.3;
        }
        let b0 = Hyperbox::new(vec![-0.5, 0.0], vec![-0.4, 0.01]).unwrap();
        let b1 = Hyperbox::new(vec![0.4, 0.0], vec![0.45, 0.01]).unwrap();
        let t = tube(vec![b0.clone(), b1.clone()], Verdict::VerifiedGoal);
        let same = inflate(&env_goal, &t, 0.0, InflateMode::Final);
        assert_eq!(same.boxes, t.boxes);
        assert_eq!(same.verdict, Verdict::VerifiedGoal);
        // Goal x >= 0.5: [0.4, 0.45] widened by 0.1 is [0.3, 0.55].
        let mut env_half = env.clone();
        if let crate::env::Physics::MountainCar(p) = &mut env_half.physics {
            p.goal_position = 0.5;
        }
        let out = inflate(&env_half, &tube(vec![b0.clone(), b1.clone()], Verdict::NotVerified), 0.1, InflateMode::Final);
        assert!((out.final_box().lower()[0] - 0.3).abs() < 1e-12 && (out.final_box().upper()[0] - 0.55).abs() < 1e-12);
        assert_eq!(out.verdict, Verdict::NotVerified);
        assert_eq!(out.boxes[0], b0);
        assert!(b1.is_subset_of(out.final_box()));
        let revoked = inflate(&env_goal, &t, 0.15, InflateMode::Final);
        assert_eq!(revoked.verdict, Verdict::NotVerified);
        assert_eq!(inflate(&env_goal, &t, f64::INFINITY, InflateMode::Final).verdict, Verdict::NotVerified);
        let all = inflate(&env_goal, &tube(vec![b0.clone(), b1.clone(), b1], Verdict::VerifiedGoal), 0.05, InflateMode::All);
        assert_eq!(all.boxes[0], b0);
        assert!((all.boxes[1].lower()[0] - 0.35).abs() < 1e-12);
    }

    fn nets(env: &EnvModel, seed: u64) -> (Network, Network) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = arch::decoder(env.verified_dims().len(), env.height, env.width).unwrap();
        d.init_fan_in_uniform(&mut rng);
        let mut c = arch::controller(env.height, env.width, OutputActivation::Tanh).unwrap();
        c.init_fan_in_uniform(&mut rng);
        (d, c)
    }

    #[test]
    fn calibration_is_deterministic_and_worker_invariant() {
        let env = EnvModel::new(EnvKind::Pendulum, 8, 8);
        let (d, c) = nets(&env, 1);
        let grid = env.reference_grid().with_stride(env.desk_stride()).unwrap();
        let a = calibrate(&env, &d, &c, &grid, 19, 0.05, 5, 7, 1).unwrap();
        let b = calibrate(&env, &d, &c, &grid, 19, 0.05, 5, 7, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rank, 19);
        assert_eq!(a.quantile, a.scores.last().copied());
        assert!(a.scores.windows(2).all(|w| w[0] <= w[1]) && a.scores[0] >= 0.0);
        let small = calibrate(&env, &d, &c, &grid, 5, 0.05, 5, 7, 1).unwrap();
        assert_eq!(small.quantile, None);
        assert_eq!(small.delta(), f64::INFINITY);
        assert_eq!(a.requantize(0.5).unwrap().quantile, Some(a.scores[9]));
    }

    #[test]
    fn certificates_refuse_other_networks() {
        let env = EnvModel::new(EnvKind::Pendulum, 8, 8);
        let (d, c) = nets(&env, 1);
        let (d2, _) = nets(&env, 2);
        let grid = env.reference_grid().with_stride(env.desk_stride()).unwrap();
        let cert = calibrate(&env, &d, &c, &grid, 3, 0.5, 2, 0, 1).unwrap();
        assert!(cert.check_provenance(&env, &d, &c).is_ok());
        assert!(matches!(cert.check_provenance(&env, &d2, &c), Err(Error::ProvenanceMismatch(_))));
        let other = EnvModel::new(EnvKind::Pendulum, 16, 16);
        assert!(cert.check_provenance(&other, &d, &c).is_err());
    }

    #[test]
    fn infinite_bound_covers_everything() {
        let env = EnvModel::new(EnvKind::MountainCar, 8, 8);
        let (d, c) = nets(&env, 4);
        let grid = env.reference_grid().with_stride(env.desk_stride()).unwrap();
        let cert = calibrate(&env, &d, &c, &grid, 5, 0.05, 4, 1, 1).unwrap();
        let rep = validate_coverage(&env, &d, &c, &cert, None, 50, 99, 1).unwrap();
        assert_eq!(rep.score_coverage, 1.0);
    }

    #[test]
    fn half_miscoverage_covers_about_half() {
        let env = EnvModel::new(EnvKind::Pendulum, 8, 8);
        let (d, c) = nets(&env, 5);
        let grid = env.reference_grid().with_stride(env.desk_stride()).unwrap();
        let cert = calibrate(&env, &d, &c, &grid, 500, 0.5, 10, 3, 1).unwrap();
        let rep = validate_coverage(&env, &d, &c, &cert, None, 500, 4, 1).unwrap();
        assert!((rep.score_coverage - 0.5).abs() <= 0.07, "coverage {}", rep.score_coverage);
    }
}
