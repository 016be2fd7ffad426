//! Paired (state, image) datasets, the dual-objective decoder loss, Adam, and
//! the two training loops: the decoder (world model) and the behavioral
//! cloning of image controllers from the analytic experts.

use crate::env::{Camera, EnvModel};
use crate::error::{invalid, Error, Result};
use crate::nn::arch;
use crate::nn::{Network, ParamGrads};
use crate::reach::LATENT_BOUND;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub height: usize,
    pub width: usize,
    /// Pixel weight where the true image is dark (`<= beta`).
    pub w_high: f64,
    pub w_low: f64,
    pub beta: f64,
    /// Weight of the controller-difference term.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dataset_size: usize,
    /// Extra latent inputs fed with uniform noise during training (0 for the
    /// deterministic decoder).
    pub latent_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            w_high: 10.0,
            w_low: 1.0,
            beta: 20.0 / 255.0,
            lambda: 1e-3,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            dataset_size: 10_000,
            latent_dim: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_high >= self.w_low && self.w_low > 0.0) {
            return invalid(format!("need w_high >= w_low > 0, got {} and {}", self.w_high, self.w_low));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return invalid(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return invalid(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return invalid("learning rate and batch size must be positive");
        }
        if self.dataset_size == 0 {
            return invalid("dataset size must be at least 1");
        }
        Ok(())
    }
}

/// States (verified components) with the images the real camera produces for them.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub height: usize,
    pub width: usize,
    pub states: Vec<Vec<f64>>,
    pub images: Vec<Vec<f64>>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }
}

/// Random stream `i` of a master seed; item `i` of a dataset uses stream `i`.
pub(crate) fn item_rng(seed: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng
}

pub(crate) fn uniform_in(rng: &mut impl Rng, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    lo.iter().zip(hi).map(|(&l, &h)| if h > l { rng.gen_range(l..=h) } else { l }).collect()
}

/// `n` states drawn uniformly from the observation box, rendered by the real camera.
pub fn generate_dataset(env: &EnvModel, n: usize, seed: u64) -> Result<PairedDataset> {
    if n == 0 {
        return invalid("dataset size must be at least 1");
    }
    let space = env.observation_space();
    let states: Vec<Vec<f64>> =
        (0..n).map(|i| uniform_in(&mut item_rng(seed, i as u64), space.lower(), space.upper())).collect();
    let images = states.iter().map(|s| env.render_observed(s)).collect();
    Ok(PairedDataset { height: env.height, width: env.width, states, images })
}

fn pixel_weight(truth: f64, cfg: &TrainConfig) -> f64 {
    if truth <= cfg.beta {
        cfg.w_high
    } else {
        cfg.w_low
    }
}

/// `(1 / HW) sum w_ij (pred_ij - truth_ij)^2` with weights keyed on the true image.
pub fn weighted_mse(truth: &[f64], pred: &[f64], cfg: &TrainConfig) -> f64 {
    let s: f64 = truth.iter().zip(pred).map(|(&t, &p)| pixel_weight(t, cfg) * (p - t) * (p - t)).sum();
    s / truth.len() as f64
}

pub fn weighted_mse_grad(truth: &[f64], pred: &[f64], cfg: &TrainConfig) -> Vec<f64> {
    let k = 2.0 / truth.len() as f64;
    truth.iter().zip(pred).map(|(&t, &p)| k * pixel_weight(t, cfg) * (p - t)).collect()
}

/// `||C(pred) - C(truth)||^2`.
pub fn controller_diff_loss(controller: &Network, truth: &[f64], pred: &[f64]) -> Result<f64> {
    let (a, b) = (controller.forward(pred)?, controller.forward(truth)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Controller-difference loss against a precomputed `C(truth)`, with its
/// gradient w.r.t. `pred`. The controller is not modified.
pub fn controller_diff_grad(controller: &Network, target: &[f64], pred: &[f64]) -> Result<(f64, Vec<f64>)> {
    let trace = controller.forward_trace(pred)?;
    let out = trace.last().expect("trace has an output");
    let diff: Vec<f64> = out.iter().zip(target).map(|(a, b)| a - b).collect();
    let loss = diff.iter().map(|d| d * d).sum();
    let g_out: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
    Ok((loss, controller.backward(&trace, &g_out, None)?))
}

/// `weighted_mse + lambda * controller_diff_loss`.
pub fn total_loss(truth: &[f64], pred: &[f64], controller: &Network, cfg: &TrainConfig) -> Result<f64> {
    let mse = weighted_mse(truth, pred, cfg);
    if cfg.lambda == 0.0 {
        return Ok(mse);
    }
    Ok(mse + cfg.lambda * controller_diff_loss(controller, truth, pred)?)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: ParamGrads,
    v: ParamGrads,
}

impl Adam {
    pub fn new(net: &Network, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: ParamGrads::zeros_like(net),
            v: ParamGrads::zeros_like(net),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &ParamGrads) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.learning_rate, self.eps);
        let (m, v) = (&mut self.m.0, &mut self.v.0);
        net.for_each_param_mut(|i, w, b| {
            let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                for j in 0..p.len() {
                    m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                    v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                    p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                }
            };
            update(w, &grads.0[i].0, &mut m[i].0, &mut v[i].0);
            update(b, &grads.0[i].1, &mut m[i].1, &mut v[i].1);
        });
    }
}

/// Per-epoch averages of the decoder objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub mse: f64,
    pub ctrl: f64,
}

/// Affine input normalisation `x' = (x - mean) / scale` used while training.
#[derive(Debug, Clone)]
struct InputNorm {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl InputNorm {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    /// Folds the normalisation into the first dense layer so the network takes raw inputs.
    fn fold_into(&self, net: &Network) -> Network {
        let mut out = net.clone();
        let n = self.mean.len();
        let mut done = false;
        out.for_each_param_mut(|_, w, b| {
            if done {
                return;
            }
            done = true;
            for (r, br) in b.iter_mut().enumerate() {
                let row = &mut w[r * n..(r + 1) * n];
                for c in 0..n {
                    row[c] /= self.scale[c];
                    *br -= row[c] * self.mean[c];
                }
            }
        });
        out
    }
}

fn decoder_norm(env_space: &crate::star::Hyperbox, latent_dim: usize) -> InputNorm {
    let mut mean = env_space.midpoint();
    let mut scale: Vec<f64> = (0..env_space.dim()).map(|i| 0.5 * env_space.width(i).max(1e-12)).collect();
    mean.extend(std::iter::repeat(0.0).take(latent_dim));
    scale.extend(std::iter::repeat(LATENT_BOUND).take(latent_dim));
    InputNorm { mean, scale }
}

fn dataset_box(data: &PairedDataset) -> crate::star::Hyperbox {
    let d = data.state_dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for s in &data.states {
        for i in 0..d {
            lo[i] = lo[i].min(s[i]);
            hi[i] = hi[i].max(s[i]);
        }
    }
    crate::star::Hyperbox::new(lo, hi).expect("finite dataset states")
}

/// Trains a decoder of the standard topology on `data`; the controller is frozen.
/// Returns the network (taking raw states) and per-epoch losses.
pub fn train_decoder(
    cfg: &TrainConfig,
    data: &PairedDataset,
    controller: &Network,
    seed: u64,
) -> Result<(Network, Vec<EpochLoss>)> {
    cfg.validate()?;
    if data.is_empty() {
        return invalid("empty dataset");
    }
    if data.height != cfg.height || data.width != cfg.width {
        return invalid(format!(
            "dataset images are {}x{}, config expects {}x{}",
            data.height, data.width, cfg.height, cfg.width
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dec = arch::decoder(data.state_dim() + cfg.latent_dim, cfg.height, cfg.width)?;
    dec.init_fan_in_uniform(&mut rng);
    // Start the output layer at the mean intensity so the final clamp is not saturated.
    let mean_px = data.images.iter().flatten().sum::<f64>() / (data.len() * cfg.height * cfg.width) as f64;
    let last = dec.layers().iter().rposition(|l| l.params().is_some()).expect("decoder has parameters");
    dec.for_each_param_mut(|i, _, b| {
        if i == last {
            b.fill(mean_px);
        }
    });
    let norm = decoder_norm(&dataset_box(data), cfg.latent_dim);
    let targets: Vec<Vec<f64>> = if cfg.lambda > 0.0 {
        data.images.iter().map(|img| controller.forward(img)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut adam = Adam::new(&dec, cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut checkpoint = (0, dec.clone());
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_mse, mut sum_ctrl) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = ParamGrads::zeros_like(&dec);
            for &k in batch {
                let mut x = data.states[k].clone();
                x.extend((0..cfg.latent_dim).map(|_| rng.gen_range(-LATENT_BOUND..=LATENT_BOUND)));
                let trace = dec.forward_trace(&norm.apply(&x))?;
                let pred = trace.last().expect("trace has an output");
                let truth = &data.images[k];
                sum_mse += weighted_mse(truth, pred, cfg);
                let mut g = weighted_mse_grad(truth, pred, cfg);
                if cfg.lambda > 0.0 {
                    let (l, gc) = controller_diff_grad(controller, &targets[k], pred)?;
                    sum_ctrl += l;
                    g.iter_mut().zip(&gc).for_each(|(a, b)| *a += cfg.lambda * b);
                }
                dec.backward(&trace, &g, Some(&mut grads))?;
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(diverged(epoch, checkpoint, &norm));
            }
            adam.step(&mut dec, &grads);
        }
        let n = data.len() as f64;
        let e = EpochLoss { epoch, mse: sum_mse / n, ctrl: sum_ctrl / n, total: (sum_mse + cfg.lambda * sum_ctrl) / n };
        if !e.total.is_finite() || !dec.params_finite() {
            return Err(diverged(epoch, checkpoint, &norm));
        }
        if history.last().is_some_and(|p: &EpochLoss| e.total > p.total) {
            log::debug!("epoch {epoch}: loss rose from {:.6} to {:.6}", history.last().unwrap().total, e.total);
        }
        log::info!("epoch {epoch}: total {:.6} (mse {:.6}, ctrl {:.6})", e.total, e.mse, e.ctrl);
        history.push(e);
        checkpoint = (epoch, dec.clone());
    }
    Ok((norm.fold_into(&dec), history))
}

fn diverged(epoch: usize, checkpoint: (usize, Network), norm: &InputNorm) -> Error {
    Error::TrainingDiverged { epoch, checkpoint_epoch: checkpoint.0, checkpoint: Box::new(norm.fold_into(&checkpoint.1)) }
}

/// Behavioral cloning settings for the image controllers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloneConfig {
    /// States drawn uniformly from the observation box.
    pub uniform_samples: usize,
    /// Expert rollouts from the initial region added to the first round.
    pub expert_rollouts: usize,
    /// Aggregation rounds: roll out the current controller, label visited
    /// states with the expert, retrain.
    pub dagger_rounds: usize,
    pub rollouts_per_round: usize,
    pub horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for CloneConfig {
    fn default() -> Self {
        Self {
            uniform_samples: 4000,
            expert_rollouts: 200,
            dagger_rounds: 2,
            rollouts_per_round: 200,
            horizon: 20,
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-3,
        }
    }
}

/// Clones the env's analytic expert into an image controller. Initial
/// states for rollouts are drawn from `initial` (verified components).
pub fn train_controller(
    env: &EnvModel,
    initial: &crate::star::Hyperbox,
    cfg: &CloneConfig,
    seed: u64,
) -> Result<(Network, Vec<f64>)> {
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return invalid("batch size and learning rate must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctrl = arch::controller(env.height, env.width, env.output_activation())?;
    ctrl.init_kaiming(&mut rng);
    let space = env.observation_space();
    let mut obs: Vec<Vec<f64>> = (0..cfg.uniform_samples).map(|_| uniform_in(&mut rng, space.lower(), space.upper())).collect();
    for _ in 0..cfg.expert_rollouts {
        let s0 = env.embed(&uniform_in(&mut rng, initial.lower(), initial.upper()));
        let t = env.expert_rollout(&s0, cfg.horizon)?;
        obs.extend(t.states.iter().map(|s| env.observe(s)));
    }
    let mut images: Vec<Vec<f64>> = obs.iter().map(|s| env.render_observed(s)).collect();
    let mut labels: Vec<f64> = obs.iter().map(|s| env.expert_action(&env.embed(s))).collect();
    let mut adam = Adam::new(&ctrl, cfg.learning_rate);
    let mut losses = Vec::new();
    for round in 0..=cfg.dagger_rounds {
        if round > 0 {
            for _ in 0..cfg.rollouts_per_round {
                let s0 = env.embed(&uniform_in(&mut rng, initial.lower(), initial.upper()));
                let t = env.rollout(&ctrl, Camera::Real, &s0, cfg.horizon)?;
                for s in &t.states {
                    // The expert labels the full state, so rates the camera cannot see still count.
                    images.push(env.render(s));
                    labels.push(env.expert_action(s));
                }
            }
        }
        let mut order: Vec<usize> = (0..images.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut grads = ParamGrads::zeros_like(&ctrl);
                for &k in batch {
                    let trace = ctrl.forward_trace(&images[k])?;
                    let d = trace.last().expect("output")[0] - labels[k];
                    sum += d * d;
                    ctrl.backward(&trace, &[2.0 * d], Some(&mut grads))?;
                }
                grads.scale(1.0 / batch.len() as f64);
                adam.step(&mut ctrl, &grads);
            }
            let l = sum / images.len() as f64;
            if !l.is_finite() || !ctrl.params_finite() {
                return Err(Error::NumericalDomain(format!("controller cloning diverged in round {round}")));
            }
            log::info!("clone round {round} epoch {epoch}: mse {l:.6} over {} samples", images.len());
            losses.push(l);
        }
    }
    Ok((ctrl, losses))
}

/// Fraction of a `k x k` probe grid over `initial` from which the controller
/// reaches the goal with the real camera.
pub fn probe_success(env: &EnvModel, controller: &Network, initial: &crate::star::Hyperbox, k: usize, horizon: usize) -> Result<f64> {
    let mut ok = 0;
    for i in 0..k {
        for j in 0..k {
            let obs = [
                initial.lower()[0] + (i as f64 + 0.5) / k as f64 * initial.width(0),
                initial.lower()[1] + (j as f64 + 0.5) / k as f64 * initial.width(1),
            ];
            let t = env.rollout(controller, Camera::Real, &env.embed(&obs), horizon)?;
            ok += env.trajectory_succeeds(&t) as usize;
        }
    }
    Ok(ok as f64 / (k * k) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvKind;
    use crate::nn::arch::OutputActivation;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn dataset_is_deterministic_and_in_the_box() {
        let env = EnvModel::new(EnvKind::MountainCar, 16, 16);
        let a = generate_dataset(&env, 1, 7).unwrap();
        assert_eq!(a, generate_dataset(&env, 1, 7).unwrap());
        let b = generate_dataset(&env, 200, 3).unwrap();
        assert_eq!(b.len(), 200);
        let space = env.observation_space();
        assert!(b.states.iter().all(|s| space.contains(s, 0.0)));
        assert!(b.states.iter().zip(&b.images).all(|(s, i)| env.render_observed(s) == *i));
        assert!(generate_dataset(&env, 0, 3).is_err());
    }

    #[test]
    fn weighted_mse_examples() {
        let c = TrainConfig { beta: 0.5, w_high: 4.0, w_low: 1.0, ..cfg() };
        assert_eq!(weighted_mse(&[0.0, 1.0], &[0.5, 1.0], &c), 0.5);
        assert_eq!(weighted_mse(&[0.0, 1.0], &[0.0, 1.0], &c), 0.0);
        let c2 = TrainConfig { w_high: 8.0, w_low: 2.0, ..c.clone() };
        let (i, p) = ([0.2, 0.7, 0.5], [0.1, 0.9, 0.0]);
        assert!((weighted_mse(&i, &p, &c2) - 2.0 * weighted_mse(&i, &p, &c)).abs() < 1e-15);
        // Pixels at exactly beta take the high weight.
        assert!((weighted_mse(&[0.5], &[0.6], &c) - 0.04).abs() < 1e-15);
        assert!(TrainConfig { w_high: 0.5, ..cfg() }.validate().is_err());
        assert!(TrainConfig { beta: 1.5, ..cfg() }.validate().is_err());
    }

    fn tiny_controller(seed: u64) -> Network {
        let mut c = arch::controller(8, 8, OutputActivation::Sigmoid).unwrap();
        c.init_kaiming(&mut ChaCha8Rng::seed_from_u64(seed));
        c
    }

    #[test]
    fn controller_diff_loss_examples() {
        let c = tiny_controller(1);
        let img: Vec<f64> = (0..64).map(|i| (i as f64 * 0.1).sin().abs()).collect();
        assert_eq!(controller_diff_loss(&c, &img, &img).unwrap(), 0.0);
        let (l, _) = controller_diff_grad(&c, &[0.5], &img).unwrap();
        let a = c.forward(&img).unwrap()[0];
        assert!((l - (a - 0.5).powi(2)).abs() < 1e-15);
        // Scalar actions 0.2 and 0.5.
        assert!(((0.2f64 - 0.5).powi(2) - 0.09).abs() < 1e-15);
    }

    #[test]
    fn controller_diff_gradient_matches_finite_differences() {
        let c = tiny_controller(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pred: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let target = c.forward(&truth).unwrap();
        let (_, g) = controller_diff_grad(&c, &target, &pred).unwrap();
        let h = 1e-6;
        for j in (0..64).step_by(5) {
            let mut p = pred.clone();
            p[j] += h;
            let up = controller_diff_loss(&c, &truth, &p).unwrap();
            p[j] -= 2.0 * h;
            let dn = controller_diff_loss(&c, &truth, &p).unwrap();
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-4 * fd.abs().max(g[j].abs()).max(1e-6), "pixel {j}: {fd} vs {}", g[j]);
        }
    }

    proptest! {
        #[test]
        fn loss_decomposes_linearly_in_lambda(seed in 0u64..1000, lambda in 0.0..1.0f64) {
            let c = tiny_controller(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            let pred: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            let with = total_loss(&truth, &pred, &c, &TrainConfig { lambda, ..cfg() }).unwrap();
            let without = total_loss(&truth, &pred, &c, &TrainConfig { lambda: 0.0, ..cfg() }).unwrap();
            prop_assert_eq!(without, weighted_mse(&truth, &pred, &cfg()));
            let expected = lambda * controller_diff_loss(&c, &truth, &pred).unwrap();
            prop_assert!(((with - without) - expected).abs() <= 1e-15 * with.abs().max(1.0));
            prop_assert_eq!(total_loss(&truth, &truth, &c, &TrainConfig { lambda, ..cfg() }).unwrap(), 0.0);
        }

        #[test]
        fn crossing_beta_switches_the_weight(t in 0.0..1.0f64, beta in 0.05..0.95f64) {
            let c = TrainConfig { beta, ..cfg() };
            let below = weighted_mse(&[beta], &[beta + t], &c);
            let above = weighted_mse(&[beta + 1e-9], &[beta + 1e-9 + t], &c);
            prop_assert!((below - 10.0 * t * t).abs() < 1e-12);
            prop_assert!((above - t * t).abs() < 1e-9);
        }
    }

    #[test]
    fn folding_the_normalisation_preserves_outputs() {
        let mut net = arch::decoder(2, 8, 8).unwrap();
        net.init_kaiming(&mut ChaCha8Rng::seed_from_u64(4));
        let norm = InputNorm { mean: vec![0.3, -2.0], scale: vec![0.5, 4.0] };
        let folded = norm.fold_into(&net);
        let x = [0.7, 1.5];
        let a = net.forward(&norm.apply(&x)).unwrap();
        let b = folded.forward(&x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    fn small_data(n: usize) -> (EnvModel, PairedDataset) {
        let env = EnvModel::new(EnvKind::Pendulum, 8, 8);
        let data = generate_dataset(&env, n, 5).unwrap();
        (env, data)
    }

    #[test]
    fn training_is_seed_deterministic_and_lambda_sensitive() {
        let (_, data) = small_data(16);
        let c = tiny_controller(6);
        let cfg = TrainConfig { height: 8, width: 8, epochs: 3, batch_size: 4, ..cfg() };
        let (a, _) = train_decoder(&cfg, &data, &c, 9).unwrap();
        let (b, _) = train_decoder(&cfg, &data, &c, 9).unwrap();
        assert_eq!(a, b);
        let (z, _) = train_decoder(&TrainConfig { lambda: 0.0, ..cfg.clone() }, &data, &c, 9).unwrap();
        assert_ne!(a, z);
    }

    #[test]
    fn decoder_memorises_eight_pairs() {
        let env = EnvModel::new(EnvKind::Pendulum, 32, 32);
        let data = generate_dataset(&env, 8, 5).unwrap();
        let mut c = arch::controller(32, 32, OutputActivation::Tanh).unwrap();
        c.init_kaiming(&mut ChaCha8Rng::seed_from_u64(6));
        let cfg = TrainConfig { epochs: 2000, batch_size: 1, learning_rate: 1e-3, ..cfg() };
        let (dec, hist) = train_decoder(&cfg, &data, &c, 1).unwrap();
        let mse: f64 = data
            .states
            .iter()
            .zip(&data.images)
            .map(|(s, i)| weighted_mse(i, &dec.forward(s).unwrap(), &cfg))
            .sum::<f64>()
            / 8.0;
        assert!(mse < 1e-3, "final weighted mse {mse}");
        assert!(hist.last().unwrap().total < hist[0].total);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut net = Network::new(
            crate::star::Shape::Flat(1),
            vec![crate::nn::Layer::dense(crate::linalg::Matrix::from_vec(1, 1, vec![0.0]).unwrap(), vec![0.0])],
        )
        .unwrap();
        let mut adam = Adam::new(&net, 0.05);
        for _ in 0..2000 {
            // Loss (w - 3)^2 + (b + 1)^2.
            let (w, b) = net.layers()[0].params().map(|(w, b)| (w[0], b[0])).unwrap();
            let g = ParamGrads(vec![(vec![2.0 * (w - 3.0)], vec![2.0 * (b + 1.0)])]);
            adam.step(&mut net, &g);
        }
        let (w, b) = net.layers()[0].params().map(|(w, b)| (w[0], b[0])).unwrap();
        assert!((w - 3.0).abs() < 1e-3 && (b + 1.0).abs() < 1e-3);
    }
}
