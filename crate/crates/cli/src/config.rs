//! Run configuration: built-in defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use dwm_core::conformal::InflateMode;
use dwm_core::env::{EnvKind, EnvModel};
use dwm_core::reach::GridSpec;
use dwm_core::training::{CloneConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TruthCamera {
    /// Closed loop driven by the real renderer.
    #[default]
    Real,
    /// Closed loop driven by the decoder, the system the verifier models.
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformalConfig {
    pub k: usize,
    pub alpha: f64,
    pub inflate: InflateMode,
    /// Fresh trajectories for the coverage check during `evaluate`; 0 skips it.
    pub n_test: usize,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self { k: 500, alpha: 0.05, inflate: InflateMode::Final, n_test: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub samples_per_cell: usize,
    pub truth_camera: TruthCamera,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { samples_per_cell: dwm_core::evaluation::DEFAULT_SAMPLES_PER_CELL, truth_camera: TruthCamera::Real }
    }
}

/// Artifact locations; relative paths resolve against `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub controller: PathBuf,
    pub decoder: PathBuf,
    pub certificate: PathBuf,
    pub safety_map: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "dataset.bin".into(),
            controller: "controller.dwmw".into(),
            decoder: "decoder.dwmw".into(),
            certificate: "certificate.json".into(),
            safety_map: "safety_map.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    pub image_size: usize,
    pub horizon: usize,
    pub seed: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
    /// Sweep the full reference grid instead of the 10x10 desk sub-grid.
    pub full_grid: bool,
    /// Explicit grid; overrides `full_grid` when present.
    pub grid: Option<GridSpec>,
    /// Propagate linearized star sets between steps instead of boxes.
    pub carry_star: bool,
    /// Refine every neuron bound by LP instead of only ambiguous ones.
    pub lp_all: bool,
    pub train: TrainConfig,
    pub controller: CloneConfig,
    pub conformal: ConformalConfig,
    pub evaluate: EvaluateConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::CartPole,
            image_size: 32,
            horizon: 20,
            seed: 0,
            workers: 1,
            out_dir: "out".into(),
            full_grid: false,
            grid: None,
            carry_star: false,
            lp_all: false,
            train: TrainConfig::default(),
            controller: CloneConfig::default(),
            conformal: ConformalConfig::default(),
            evaluate: EvaluateConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// cartpole, mountain-car or pendulum.
    #[arg(long, global = true)]
    pub env: Option<EnvKind>,
    /// Square image side in pixels (multiple of 8).
    #[arg(long, global = true)]
    pub image_size: Option<usize>,
    /// Closed-loop steps per reach tube and rollout.
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    /// Root seed; every stage derives its stream from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Threads for sweeps, calibration and ground truth; outputs do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Directory for artifacts; relative artifact paths resolve against it.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Sweep the full reference grid instead of the 10x10 desk sub-grid.
    #[arg(long, global = true)]
    pub full_grid: bool,
    /// Propagate linearized star sets between steps instead of boxes.
    #[arg(long, global = true)]
    pub carry_star: bool,
    /// Refine every neuron bound by LP instead of only ambiguous ones.
    #[arg(long, global = true)]
    pub lp_all: bool,
    /// Number of training pairs.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Decoder training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Weight of the controller-difference loss; 0 trains on reconstruction only.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Extra decoder inputs bounded to [-0.8, 0.8] during verification.
    #[arg(long, global = true)]
    pub latent_dim: Option<usize>,
    /// Calibration pairs for the conformal quantile.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Miscoverage level of the conformal bound.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Inflate the final box only (final) or every box (all).
    #[arg(long, global = true, value_parser = parse_inflate)]
    pub inflate: Option<InflateMode>,
    /// Fresh pairs used to validate coverage.
    #[arg(long, global = true)]
    pub n_test: Option<usize>,
    /// Rollouts per grid cell when labelling ground truth.
    #[arg(long, global = true)]
    pub samples_per_cell: Option<usize>,
    /// Camera driving the ground-truth rollouts.
    #[arg(long, global = true, value_enum)]
    pub truth_camera: Option<TruthCamera>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub controller: Option<PathBuf>,
    #[arg(long, global = true)]
    pub decoder: Option<PathBuf>,
    #[arg(long, global = true)]
    pub certificate: Option<PathBuf>,
    #[arg(long, global = true)]
    pub safety_map: Option<PathBuf>,
}

fn parse_inflate(s: &str) -> std::result::Result<InflateMode, String> {
    s.parse().map_err(|e: dwm_core::Error| e.to_string())
}

impl RunConfig {
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut cfg = match &o.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = o.$flag.clone() {
                    cfg.$($field)+ = v;
                }
            };
        }
        set!(env => env);
        set!(image_size => image_size);
        set!(horizon => horizon);
        set!(seed => seed);
        set!(workers => workers);
        set!(out_dir => out_dir);
        set!(n => train.dataset_size);
        set!(epochs => train.epochs);
        set!(lambda => train.lambda);
        set!(latent_dim => train.latent_dim);
        set!(k => conformal.k);
        set!(alpha => conformal.alpha);
        set!(inflate => conformal.inflate);
        set!(n_test => conformal.n_test);
        set!(samples_per_cell => evaluate.samples_per_cell);
        set!(truth_camera => evaluate.truth_camera);
        set!(dataset => paths.dataset);
        set!(controller => paths.controller);
        set!(decoder => paths.decoder);
        set!(certificate => paths.certificate);
        set!(safety_map => paths.safety_map);
        cfg.full_grid |= o.full_grid;
        cfg.carry_star |= o.carry_star;
        cfg.lp_all |= o.lp_all;
        cfg.train.height = cfg.image_size;
        cfg.train.width = cfg.image_size;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            bail!("image_size must be a positive multiple of 8, got {}", self.image_size);
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        if !(self.conformal.alpha > 0.0 && self.conformal.alpha < 1.0) {
            bail!("alpha must lie in (0, 1), got {}", self.conformal.alpha);
        }
        if self.conformal.k == 0 {
            bail!("k must be at least 1");
        }
        if self.evaluate.samples_per_cell == 0 {
            bail!("samples_per_cell must be at least 1");
        }
        Ok(())
    }

    pub fn env_model(&self) -> EnvModel {
        EnvModel::new(self.env, self.image_size, self.image_size)
    }

    pub fn grid_spec(&self, env: &EnvModel) -> Result<GridSpec> {
        let g = match &self.grid {
            Some(g) => g.clone(),
            None if self.full_grid => env.reference_grid(),
            None => env.reference_grid().with_stride(env.desk_stride())?,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    /// Writes the resolved configuration next to the stage's outputs.
    pub fn dump(&self, stage: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating output directory {}", self.out_dir.display()))?;
        let p = self.out_dir.join(format!("{stage}.config.toml"));
        std::fs::write(&p, toml::to_string_pretty(self)?)?;
        Ok(p)
    }
}
