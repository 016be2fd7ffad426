//! One function per pipeline stage. Every artifact records the hashes of
//! the artifacts it was computed from.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dwm_core::conformal::{self, ConformalCertificate};
use dwm_core::env::{Camera, EnvModel};
use dwm_core::evaluation::{self, GroundTruthMap, MetricsReport};
use dwm_core::formats::{self, file_hash, network_hash, sha256_hex, Provenance, SafetyMapFile};
use dwm_core::nn::Network;
use dwm_core::reach::{ClosedLoop, ReachOptions};
use dwm_core::training;
use dwm_core::Error;

use crate::config::{RunConfig, TruthCamera};

fn prov(pairs: &[(&str, String)]) -> Provenance {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Hash of the settings that can change results; output location and
/// worker count cannot.
fn config_hash(cfg: &RunConfig) -> Result<String> {
    let normalized = RunConfig { out_dir: PathBuf::new(), workers: 1, ..cfg.clone() };
    Ok(sha256_hex(toml::to_string(&normalized)?.as_bytes()))
}

fn require(path: &Path, what: &str) -> Result<PathBuf> {
    if !path.is_file() {
        bail!(Error::InvalidArgument(format!("{what} file {} does not exist", path.display())));
    }
    Ok(path.to_path_buf())
}

fn load_net(cfg: &RunConfig, p: &Path, what: &str) -> Result<Network> {
    let path = require(&cfg.path(p), what)?;
    let (net, _) = formats::load_network(&path).with_context(|| format!("loading {what} {}", path.display()))?;
    Ok(net)
}

pub fn generate_data(cfg: &RunConfig) -> Result<()> {
    cfg.dump("generate-data")?;
    let env = cfg.env_model();
    let n = cfg.train.dataset_size;
    if n == 0 {
        bail!(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let data = training::generate_dataset(&env, n, cfg.seed)?;
    let out = cfg.path(&cfg.paths.dataset);
    let meta = prov(&[
        ("env", env.kind().to_string()),
        ("env_hash", conformal::env_hash(&env)),
        ("seed", cfg.seed.to_string()),
    ]);
    formats::save_dataset(&out, &data, &meta)?;
    println!("N={} H={} W={} -> {}", data.len(), data.height, data.width, out.display());
    Ok(())
}

pub fn train_controller(cfg: &RunConfig) -> Result<()> {
    cfg.dump("train-controller")?;
    let env = cfg.env_model();
    let grid = cfg.grid_spec(&env)?;
    let (ctrl, losses) = training::train_controller(&env, &grid.region(), &cfg.controller, cfg.seed)?;
    let probe = training::probe_success(&env, &ctrl, &grid.region(), 10, cfg.horizon)?;
    let out = cfg.path(&cfg.paths.controller);
    let meta = prov(&[
        ("env_hash", conformal::env_hash(&env)),
        ("config_hash", config_hash(cfg)?),
        ("probe_success", format!("{probe:.4}")),
    ]);
    formats::save_network(&out, &ctrl, &meta)?;
    let csv: String = std::iter::once("epoch,loss\n".to_string())
        .chain(losses.iter().enumerate().map(|(i, l)| format!("{},{l}\n", i + 1)))
        .collect();
    std::fs::write(cfg.out_dir.join("controller_losses.csv"), csv)?;
    println!("controller {} (probe success {probe:.3}) -> {}", network_hash(&ctrl), out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    cfg.dump("train")?;
    let dpath = require(&cfg.path(&cfg.paths.dataset), "dataset")?;
    let (data, _) = formats::load_dataset(&dpath)?;
    let ctrl = load_net(cfg, &cfg.paths.controller, "controller")?;
    let out = cfg.path(&cfg.paths.decoder);
    let meta = prov(&[
        ("dataset_hash", file_hash(&dpath)?),
        ("controller_hash", network_hash(&ctrl)),
        ("config_hash", config_hash(cfg)?),
    ]);
    let (dec, history) = match training::train_decoder(&cfg.train, &data, &ctrl, cfg.seed) {
        Ok(r) => r,
        Err(Error::TrainingDiverged { epoch, checkpoint_epoch, checkpoint }) => {
            let ck = out.with_extension("checkpoint.dwmw");
            formats::save_network(&ck, &checkpoint, &meta)?;
            return Err(anyhow::Error::new(Error::TrainingDiverged { epoch, checkpoint_epoch, checkpoint })
                .context(format!("last stable weights written to {}", ck.display())));
        }
        Err(e) => return Err(e.into()),
    };
    formats::save_network(&out, &dec, &meta)?;
    let mut csv = String::from("epoch,total,mse,ctrl\n");
    for e in &history {
        csv.push_str(&format!("{},{},{},{}\n", e.epoch, e.total, e.mse, e.ctrl));
    }
    std::fs::write(cfg.out_dir.join("decoder_losses.csv"), csv)?;
    println!("decoder {} -> {}", network_hash(&dec), out.display());
    Ok(())
}

pub fn verify(cfg: &RunConfig) -> Result<()> {
    cfg.dump("verify")?;
    let env = cfg.env_model();
    let dec = load_net(cfg, &cfg.paths.decoder, "decoder")?;
    let ctrl = load_net(cfg, &cfg.paths.controller, "controller")?;
    let grid = cfg.grid_spec(&env)?;
    let mut opts = ReachOptions { horizon: cfg.horizon, carry_star: cfg.carry_star, ..Default::default() };
    opts.propagate.lp_all = cfg.lp_all;
    let map = ClosedLoop { env: &env, decoder: &dec, controller: &ctrl }.sweep_grid(&grid, &opts, cfg.workers);
    let meta = prov(&[
        ("env_hash", conformal::env_hash(&env)),
        ("decoder_hash", network_hash(&dec)),
        ("controller_hash", network_hash(&ctrl)),
        ("config_hash", config_hash(cfg)?),
    ]);
    let json = cfg.path(&cfg.paths.safety_map);
    formats::save_json(&json, &SafetyMapFile::new(env.kind().name(), &map, meta.clone()))?;
    let stem = json.with_extension("");
    std::fs::write(stem.with_extension("csv"), formats::safety_map_csv(&map, &meta))?;
    std::fs::write(stem.with_extension("timing.csv"), formats::timing_csv(&map))?;
    if grid.dim() == 2 {
        std::fs::write(stem.with_extension("pgm"), formats::safety_map_pgm(&map)?)?;
    }
    println!(
        "{} of {} cells verified in {:.1}s of tube time -> {}",
        map.verified_count(),
        grid.num_cells(),
        map.total_seconds(),
        json.display()
    );
    Ok(())
}

pub fn calibrate(cfg: &RunConfig) -> Result<()> {
    cfg.dump("calibrate")?;
    let env = cfg.env_model();
    let dec = load_net(cfg, &cfg.paths.decoder, "decoder")?;
    let ctrl = load_net(cfg, &cfg.paths.controller, "controller")?;
    let grid = cfg.grid_spec(&env)?;
    let c = &cfg.conformal;
    let cert = conformal::calibrate(&env, &dec, &ctrl, &grid, c.k, c.alpha, cfg.horizon, cfg.seed, cfg.workers)?;
    let out = cfg.path(&cfg.paths.certificate);
    formats::save_json(&out, &cert)?;
    match cert.quantile {
        Some(q) => println!("delta_{} = {q} (rank {} of {}) -> {}", 1.0 - c.alpha, cert.rank, c.k, out.display()),
        None => println!("delta = +inf: k = {} is too small for alpha = {} -> {}", c.k, c.alpha, out.display()),
    }
    Ok(())
}

fn ground_truth_cached(
    cfg: &RunConfig,
    env: &EnvModel,
    dec: &Network,
    ctrl: &Network,
    grid: &dwm_core::reach::GridSpec,
) -> Result<GroundTruthMap> {
    let e = &cfg.evaluate;
    let mut key = format!(
        "{}|{}|{}|{}|{}|{}",
        conformal::env_hash(env),
        network_hash(ctrl),
        serde_json::to_string(grid)?,
        cfg.seed,
        e.samples_per_cell,
        cfg.horizon
    );
    let camera = match e.truth_camera {
        TruthCamera::Real => Camera::Real,
        TruthCamera::Surrogate => {
            key.push_str(&network_hash(dec));
            Camera::Decoder(dec)
        }
    };
    let path = cfg.out_dir.join(format!("truth-{}.json", &sha256_hex(key.as_bytes())[..16]));
    if path.is_file() {
        if let Ok(t) = formats::load_json::<GroundTruthMap>(&path) {
            if &t.grid == grid && t.horizon == cfg.horizon && t.samples_per_cell == e.samples_per_cell {
                log::info!("ground truth loaded from {}", path.display());
                return Ok(t);
            }
        }
    }
    let t = evaluation::ground_truth(env, ctrl, camera, grid, e.samples_per_cell, cfg.horizon, cfg.seed, cfg.workers)?;
    formats::save_json(&path, &t)?;
    Ok(t)
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    cfg.dump("evaluate")?;
    let env = cfg.env_model();
    let dec = load_net(cfg, &cfg.paths.decoder, "decoder")?;
    let ctrl = load_net(cfg, &cfg.paths.controller, "controller")?;
    let map_path = require(&cfg.path(&cfg.paths.safety_map), "safety map")?;
    let file: SafetyMapFile = formats::load_json(&map_path)?;
    for (key, want) in [("decoder_hash", network_hash(&dec)), ("controller_hash", network_hash(&ctrl))] {
        if file.provenance.get(key) != Some(&want) {
            bail!(Error::ProvenanceMismatch(format!("{} was not computed from the given {key}", map_path.display())));
        }
    }
    let map = file.to_map()?;
    let truth = ground_truth_cached(cfg, &env, &dec, &ctrl, &map.grid)?;
    let plain = evaluation::compare(&map, &truth)?;
    let mut meta = prov(&[
        ("safety_map_hash", file_hash(&map_path)?),
        ("decoder_hash", network_hash(&dec)),
        ("controller_hash", network_hash(&ctrl)),
        ("truth_camera", format!("{:?}", cfg.evaluate.truth_camera).to_lowercase()),
    ]);
    let cert_path = cfg.path(&cfg.paths.certificate);
    let mut reports: Vec<(&str, MetricsReport)> = vec![("Non-CP", plain)];
    let mut coverage = None;
    if cert_path.is_file() {
        let cert: ConformalCertificate = formats::load_json(&cert_path)?;
        cert.check_provenance(&env, &dec, &ctrl)?;
        if cert.horizon != map.horizon {
            bail!(Error::ProvenanceMismatch("certificate horizon differs from the safety map".into()));
        }
        meta.insert("certificate_hash".into(), file_hash(&cert_path)?);
        let inflated = conformal::inflate_map(&env, &map, cert.delta(), cfg.conformal.inflate);
        reports.push(("CP", evaluation::compare(&inflated, &truth)?));
        if cfg.conformal.n_test > 0 && cert.initial == map.grid {
            let rep = conformal::validate_coverage(
                &env,
                &dec,
                &ctrl,
                &cert,
                Some(&map),
                cfg.conformal.n_test,
                cfg.seed.wrapping_add(1),
                cfg.workers,
            )?;
            coverage = Some((cert.delta(), rep));
        }
    } else {
        log::warn!("no certificate at {}; reporting Non-CP metrics only", cert_path.display());
    }
    let mut csv = String::new();
    for (k, v) in &meta {
        csv.push_str(&format!("# {k}={v}\n"));
    }
    csv.push_str(MetricsReport::CSV_HEADER);
    csv.push('\n');
    for (label, r) in &reports {
        csv.push_str(&r.csv_row(label));
        csv.push('\n');
    }
    std::fs::write(cfg.out_dir.join("metrics.csv"), &csv)?;
    let refs: Vec<(&str, &MetricsReport)> = reports.iter().map(|(l, r)| (*l, r)).collect();
    let mut text = format!(
        "{} on {} cells, ground truth: {} samples per cell ({} camera)\n\n",
        env.kind(),
        map.grid.num_cells(),
        truth.samples_per_cell,
        meta["truth_camera"]
    );
    text.push_str(&evaluation::metrics_table(&refs));
    if let Some((delta, rep)) = &coverage {
        text.push_str(&format!(
            "\nconformal bound {delta:.6}: score coverage {:.4} over {} fresh trajectories; \
             inflated final-box containment {:.4}, step-wise tube containment {:.4}\n",
            rep.score_coverage,
            rep.n_test,
            rep.final_containment(),
            rep.tube_containment()
        ));
        formats::save_json(&cfg.out_dir.join("coverage.json"), rep)?;
    }
    std::fs::write(cfg.out_dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Every stage in order, sharing one configuration.
pub fn pipeline(cfg: &RunConfig) -> Result<()> {
    generate_data(cfg)?;
    train_controller(cfg)?;
    train(cfg)?;
    calibrate(cfg)?;
    verify(cfg)?;
    evaluate(cfg)
}
