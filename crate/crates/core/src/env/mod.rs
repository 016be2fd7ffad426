//! CartPole, MountainCar and Pendulum: discrete-time dynamics, procedural
//! cameras, analytic experts and concrete closed-loop rollouts.
//!
//! Dynamics are written once over [`Scalar`] so the simulator, the interval
//! natural extension and the mean-value form all evaluate the same
//! operation sequence. CartPole keeps Gym's four-dimensional state; only
//! `(x, theta)` is imaged and verified, and the rates start at configured
//! nominal values.

pub mod raster;
mod scalar;

pub use scalar::Scalar;

use crate::error::{invalid, Error, Result};
use crate::nn::arch::OutputActivation;
use crate::nn::Network;
use crate::reach::GridSpec;
use crate::star::Hyperbox;
use raster::Primitive;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    CartPole,
    MountainCar,
    Pendulum,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::CartPole, EnvKind::MountainCar, EnvKind::Pendulum];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::CartPole => "cartpole",
            EnvKind::MountainCar => "mountaincar",
            EnvKind::Pendulum => "pendulum",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cartpole" => Ok(EnvKind::CartPole),
            "mountaincar" => Ok(EnvKind::MountainCar),
            "pendulum" => Ok(EnvKind::Pendulum),
            _ => invalid(format!("unknown environment {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartPoleParams {
    pub gravity: f64,
    pub mass_cart: f64,
    pub mass_pole: f64,
    /// Half the pole length.
    pub half_length: f64,
    pub force_mag: f64,
    pub tau: f64,
    pub x_threshold: f64,
    /// Goal: `|theta_T| <= goal_theta`.
    pub goal_theta: f64,
    /// `(x_dot, theta_dot)` at the start of every rollout and reach tube.
    pub nominal_rates: [f64; 2],
    pub expert_k_theta: f64,
    pub expert_k_x: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            mass_cart: 1.0,
            mass_pole: 0.1,
            half_length: 0.5,
            force_mag: 10.0,
            tau: 0.02,
            x_threshold: 2.4,
            goal_theta: 12.0 * PI / 180.0,
            nominal_rates: [0.0, 0.0],
            expert_k_theta: 30.0,
            expert_k_x: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MountainCarParams {
    pub power: f64,
    pub gravity: f64,
    pub max_speed: f64,
    pub min_position: f64,
    pub max_position: f64,
    /// Goal: `x_T >= goal_position`.
    pub goal_position: f64,
}

impl Default for MountainCarParams {
    fn default() -> Self {
        Self { power: 0.0015, gravity: 0.0025, max_speed: 0.07, min_position: -1.2, max_position: 0.6, goal_position: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumParams {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_speed: f64,
    pub max_torque: f64,
    /// Goal: `theta_T` within this distance of `2 pi k` for some integer `k`.
    pub goal_tolerance: f64,
    pub expert_energy_target: f64,
    pub expert_energy_gain: f64,
    pub expert_kp: f64,
    pub expert_kd: f64,
    /// Wrapped angle below which the expert switches from pumping to PD.
    pub expert_capture: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_speed: 8.0,
            max_torque: 2.0,
            goal_tolerance: 0.15,
            expert_energy_target: 4.0,
            expert_energy_gain: 1.0,
            expert_kp: 10.0,
            expert_kd: 2.0,
            expert_capture: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Physics {
    CartPole(CartPoleParams),
    MountainCar(MountainCarParams),
    Pendulum(PendulumParams),
}

/// An environment: physics, camera resolution and the safety specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvModel {
    pub physics: Physics,
    pub height: usize,
    pub width: usize,
    /// Also require every reachable set to avoid the unsafe region (CartPole only).
    pub check_unsafe: bool,
}

/// Which camera produced the images a trajectory was driven by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    RealCamera,
    WorldModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<f64>,
    pub source: Source,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn initial(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Camera<'a> {
    Real,
    /// Observed state (padded with zeros up to the decoder input) to image.
    Decoder(&'a Network),
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

impl EnvModel {
    pub fn new(kind: EnvKind, height: usize, width: usize) -> Self {
        let physics = match kind {
            EnvKind::CartPole => Physics::CartPole(CartPoleParams::default()),
            EnvKind::MountainCar => Physics::MountainCar(MountainCarParams::default()),
            EnvKind::Pendulum => Physics::Pendulum(PendulumParams::default()),
        };
        Self { physics, height, width, check_unsafe: false }
    }

    pub fn kind(&self) -> EnvKind {
        match self.physics {
            Physics::CartPole(_) => EnvKind::CartPole,
            Physics::MountainCar(_) => EnvKind::MountainCar,
            Physics::Pendulum(_) => EnvKind::Pendulum,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.physics {
            Physics::CartPole(_) => 4,
            _ => 2,
        }
    }

    /// State components that are imaged, gridded and verified.
    pub fn verified_dims(&self) -> &'static [usize] {
        match self.physics {
            Physics::CartPole(_) => &[0, 2],
            _ => &[0, 1],
        }
    }

    pub fn observe(&self, s: &[f64]) -> Vec<f64> {
        self.verified_dims().iter().map(|&i| s[i]).collect()
    }

    /// Full state from verified components, filling the rest with nominal values.
    pub fn embed(&self, obs: &[f64]) -> Vec<f64> {
        match &self.physics {
            Physics::CartPole(p) => vec![obs[0], p.nominal_rates[0], obs[1], p.nominal_rates[1]],
            _ => obs.to_vec(),
        }
    }

    pub fn embed_box(&self, b: &Hyperbox) -> Hyperbox {
        Hyperbox::new(self.embed(b.lower()), self.embed(b.upper())).expect("embedding preserves ordering")
    }

    /// Region the training data is drawn from and the reach sets are expected to stay near.
    pub fn state_space(&self) -> Hyperbox {
        let (lo, hi) = match &self.physics {
            Physics::CartPole(p) => (vec![-p.x_threshold, -3.0, -0.3, -3.0], vec![p.x_threshold, 3.0, 0.3, 3.0]),
            // The verification grid reaches v = 0.08, slightly past the speed limit.
            Physics::MountainCar(p) => (vec![p.min_position, -0.08], vec![p.max_position, 0.08]),
            Physics::Pendulum(p) => (vec![-1.0, -p.max_speed], vec![7.5, p.max_speed]),
        };
        Hyperbox::new(lo, hi).expect("static state space")
    }

    pub fn observation_space(&self) -> Hyperbox {
        self.state_space().project(self.verified_dims())
    }

    pub fn action_range(&self) -> (f64, f64) {
        match self.physics {
            Physics::CartPole(_) => (0.0, 1.0),
            _ => (-1.0, 1.0),
        }
    }

    pub fn output_activation(&self) -> OutputActivation {
        match self.physics {
            Physics::CartPole(_) => OutputActivation::Sigmoid,
            _ => OutputActivation::Tanh,
        }
    }

    /// The initial-state grid over the verified components.
    pub fn reference_grid(&self) -> GridSpec {
        let (lo, hi, d) = match self.physics {
            Physics::CartPole(_) => ([0.0, 0.06], [0.6, 0.12], [0.01, 0.001]),
            Physics::MountainCar(_) => ([-0.2, 0.0], [0.6, 0.08], [0.01, 0.001]),
            Physics::Pendulum(_) => ([1.0, 4.5], [2.0, 5.0], [0.01, 0.01]),
        };
        GridSpec::new(lo.to_vec(), hi.to_vec(), d.to_vec()).expect("static grid")
    }

    /// Strides selecting an evenly spread 10x10 sub-grid of the reference grid.
    pub fn desk_stride(&self) -> Vec<usize> {
        match self.physics {
            Physics::CartPole(_) => vec![6, 6],
            Physics::MountainCar(_) => vec![8, 8],
            Physics::Pendulum(_) => vec![10, 5],
        }
    }

    /// One step of the dynamics over any scalar type. `u` is in the native action range.
    pub fn dynamics<S: Scalar>(&self, s: &[S], u: S) -> Vec<S> {
        match &self.physics {
            Physics::CartPole(p) => {
                let (x, xd, th, thd) = (s[0], s[1], s[2], s[3]);
                let total = p.mass_cart + p.mass_pole;
                let pml = p.mass_pole * p.half_length;
                let force = (u.scale(2.0) - S::cst(1.0)).scale(p.force_mag);
                let (sn, cs) = (th.sin(), th.cos());
                let temp = (force + (thd.sqr() * sn).scale(pml)).scale(1.0 / total);
                let denom = (S::cst(4.0 / 3.0) - cs.sqr().scale(p.mass_pole / total)).scale(p.half_length);
                let thacc = (sn.scale(p.gravity) - cs * temp) / denom;
                let xacc = temp - (thacc * cs).scale(pml / total);
                vec![x + xd.scale(p.tau), xd + xacc.scale(p.tau), th + thd.scale(p.tau), thd + thacc.scale(p.tau)]
            }
            Physics::MountainCar(p) => {
                let v = s[1] + u.clip(-1.0, 1.0).scale(p.power) - s[0].scale(3.0).cos().scale(p.gravity);
                let v = v.clip(-p.max_speed, p.max_speed);
                let x = (s[0] + v).clip(p.min_position, p.max_position);
                vec![x, S::wall_reset(x, v, p.min_position)]
            }
            Physics::Pendulum(p) => {
                let a_grav = 3.0 * p.gravity / (2.0 * p.length);
                let a_torque = 3.0 * p.max_torque / (p.mass * p.length * p.length);
                let w = s[1] + (s[0].sin().scale(a_grav) + u.scale(a_torque)).scale(p.dt);
                let w = w.clip(-p.max_speed, p.max_speed);
                vec![s[0] + w.scale(p.dt), w]
            }
        }
    }

    pub fn step(&self, s: &[f64], u: f64) -> Result<Vec<f64>> {
        if s.len() != self.state_dim() {
            return invalid(format!("{} state has {} components, got {}", self.kind(), self.state_dim(), s.len()));
        }
        if !u.is_finite() || s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDomain(format!("non-finite state {s:?} or action {u}")));
        }
        let (lo, hi) = self.action_range();
        let uc = u.clamp(lo, hi);
        if uc != u {
            log::debug!("{}: action {u} clamped to {uc}", self.kind());
        }
        let next = self.dynamics(s, uc);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDomain(format!("step from {s:?} produced {next:?}")));
        }
        Ok(next)
    }

    /// Shapes of the scene in the 32-pixel reference frame. Depends on the verified components only.
    fn scene(&self, s: &[f64]) -> Vec<Primitive> {
        match &self.physics {
            Physics::CartPole(p) => {
                let cx = 16.0 + s[0] * 32.0 / (2.5 * p.x_threshold);
                let (sn, cs) = (s[2].sin(), s[2].cos());
                let base = (cx, 20.5);
                vec![
                    Primitive::Rect { center: (cx, 22.0), half: (2.5, 1.5) },
                    Primitive::Capsule { a: base, b: (cx + 14.0 * sn, 20.5 - 14.0 * cs), radius: 0.8 },
                ]
            }
            Physics::MountainCar(p) => {
                let span = p.max_position - p.min_position;
                let col = (s[0] - p.min_position) / span * 28.0 + 2.0;
                let row = 17.0 - 7.0 * (3.0 * s[0]).sin();
                vec![
                    Primitive::Circle { center: (col, row), radius: 2.0 },
                    Primitive::Rect { center: (16.0 + s[1] / p.max_speed * 13.0, 30.0), half: (1.0, 1.5) },
                ]
            }
            Physics::Pendulum(p) => {
                let pivot = (16.0, 14.0);
                let (sn, cs) = (s[0].sin(), s[0].cos());
                vec![
                    Primitive::Capsule { a: pivot, b: (16.0 + 11.0 * sn, 14.0 - 11.0 * cs), radius: 1.2 },
                    Primitive::Rect { center: (16.0 + s[1] / p.max_speed * 13.0, 30.0), half: (1.0, 1.5) },
                ]
            }
        }
    }

    /// The real camera: a row-major `height x width` image in `[0, 1]`.
    pub fn render(&self, s: &[f64]) -> Vec<f64> {
        raster::rasterize(&self.scene(s), self.height, self.width)
    }

    /// Renders from the verified components alone.
    pub fn render_observed(&self, obs: &[f64]) -> Vec<f64> {
        self.render(&self.embed(obs))
    }

    pub fn goal_contains(&self, s: &[f64]) -> bool {
        match &self.physics {
            Physics::CartPole(p) => s[2].abs() <= p.goal_theta,
            Physics::MountainCar(p) => s[0] >= p.goal_position,
            Physics::Pendulum(p) => wrap_angle(s[0]).abs() <= p.goal_tolerance,
        }
    }

    /// Whether every state of the box lies in the goal set.
    pub fn goal_contains_box(&self, b: &Hyperbox) -> bool {
        if !b.is_finite() {
            return false;
        }
        match &self.physics {
            Physics::CartPole(p) => b.lower()[2] >= -p.goal_theta && b.upper()[2] <= p.goal_theta,
            Physics::MountainCar(p) => b.lower()[0] >= p.goal_position,
            Physics::Pendulum(p) => {
                let (lo, hi) = (b.lower()[0], b.upper()[0]);
                let k = (0.5 * (lo + hi) / TAU).round();
                lo >= k * TAU - p.goal_tolerance && hi <= k * TAU + p.goal_tolerance
            }
        }
    }

    pub fn unsafe_contains(&self, s: &[f64]) -> bool {
        match &self.physics {
            Physics::CartPole(p) if self.check_unsafe => s[0].abs() > p.x_threshold,
            _ => false,
        }
    }

    /// Whether the box may intersect the unsafe region.
    pub fn unsafe_intersects_box(&self, b: &Hyperbox) -> bool {
        match &self.physics {
            Physics::CartPole(p) if self.check_unsafe => {
                !b.is_finite() || b.lower()[0] < -p.x_threshold || b.upper()[0] > p.x_threshold
            }
            _ => false,
        }
    }

    /// Success: the final state is in the goal and, if configured, no state is unsafe.
    pub fn trajectory_succeeds(&self, t: &Trajectory) -> bool {
        self.goal_contains(t.last()) && !t.states.iter().any(|s| self.unsafe_contains(s))
    }

    /// Teacher policy for behavioral cloning, in the native action range.
    pub fn expert_action(&self, s: &[f64]) -> f64 {
        match &self.physics {
            Physics::CartPole(p) => {
                let f = (p.expert_k_theta * s[2] + p.expert_k_x * s[0]).clamp(-p.force_mag, p.force_mag);
                0.5 * (f / p.force_mag + 1.0)
            }
            Physics::MountainCar(_) => {
                if s[1] >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Physics::Pendulum(p) => {
                let (th, w) = (s[0], s[1]);
                let a = wrap_angle(th);
                let u = if a.abs() < p.expert_capture {
                    -(p.expert_kp * a + p.expert_kd * w) / p.max_torque
                } else {
                    let a_grav = 3.0 * p.gravity / (2.0 * p.length);
                    let energy = 0.5 * w * w + a_grav * (th.cos() - 1.0);
                    p.expert_energy_gain * (p.expert_energy_target - energy) * w
                };
                u.clamp(-1.0, 1.0)
            }
        }
    }

    /// Image the controller sees at state `s` under the given camera.
    pub fn camera_image(&self, camera: Camera<'_>, s: &[f64]) -> Result<Vec<f64>> {
        match camera {
            Camera::Real => Ok(self.render(s)),
            Camera::Decoder(dec) => {
                let mut x = self.observe(s);
                x.resize(dec.input_shape().len(), 0.0);
                dec.forward(&x)
            }
        }
    }

    /// Closed-loop rollout `u_t = C(camera(s_t))`, `s_{t+1} = f(s_t, u_t)`.
    pub fn rollout(&self, controller: &Network, camera: Camera<'_>, s0: &[f64], horizon: usize) -> Result<Trajectory> {
        let source = match camera {
            Camera::Real => Source::RealCamera,
            Camera::Decoder(_) => Source::WorldModel,
        };
        let mut states = vec![s0.to_vec()];
        let mut actions = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let s = states.last().expect("non-empty");
            let img = self.camera_image(camera, s)?;
            let u = controller.forward(&img)?[0];
            let next = self.step(s, u)?;
            actions.push(u);
            states.push(next);
        }
        Ok(Trajectory { states, actions, source })
    }

    /// Rollout under the analytic expert instead of an image controller.
    pub fn expert_rollout(&self, s0: &[f64], horizon: usize) -> Result<Trajectory> {
        let mut states = vec![s0.to_vec()];
        let mut actions = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let s = states.last().expect("non-empty");
            let u = self.expert_action(s);
            let next = self.step(s, u)?;
            actions.push(u);
            states.push(next);
        }
        Ok(Trajectory { states, actions, source: Source::RealCamera })
    }
}
