use std::path::Path;
use std::process::{Command, Output};

fn dwm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dwm"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(
        &p,
        r#"
env = "mountain-car"
image_size = 8
horizon = 4
seed = 3

[grid]
lower = [-0.2, 0.0]
upper = [0.0, 0.02]
delta = [0.1, 0.01]

[train]
dataset_size = 60
epochs = 2

[controller]
uniform_samples = 200
expert_rollouts = 5
dagger_rounds = 1
rollouts_per_round = 5
epochs = 2

[conformal]
k = 19
n_test = 20

[evaluate]
samples_per_cell = 3
"#,
    )
    .unwrap();
    p.to_string_lossy().into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dwm(dir.path(), &["--help"])), 0);
    assert_eq!(code(&dwm(dir.path(), &["verify", "--no-such-flag"])), 1);
    assert_eq!(code(&dwm(dir.path(), &["generate-data", "--n", "0"])), 1);
    let o = dwm(dir.path(), &["verify", "--image-size", "8"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = dwm(dir.path(), &["show-config", "--config", &cfg, "--horizon", "9", "--lambda", "0"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("horizon = 9"));
    assert!(text.contains("lambda = 0.0"));
    assert!(text.contains("dataset_size = 60"));
}

#[test]
fn dataset_generation_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = dwm(d.path(), &["generate-data", "--n", "25", "--image-size", "8", "--seed", "4"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("N=25 H=8 W=8"));
    }
    assert_eq!(read(a.path().join("dataset.bin")), read(b.path().join("dataset.bin")));
    assert!(a.path().join("generate-data.config.toml").is_file());
}

#[test]
fn pipeline_outputs_are_reproducible_and_worker_invariant() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = tiny_config(a.path());
    let cfg_b = tiny_config(b.path());
    let oa = dwm(a.path(), &["pipeline", "--config", &cfg_a]);
    assert_eq!(code(&oa), 0, "{}", String::from_utf8_lossy(&oa.stderr));
    let ob = dwm(b.path(), &["pipeline", "--config", &cfg_b, "--workers", "3"]);
    assert_eq!(code(&ob), 0, "{}", String::from_utf8_lossy(&ob.stderr));
    for f in [
        "dataset.bin",
        "controller.dwmw",
        "decoder.dwmw",
        "certificate.json",
        "safety_map.json",
        "safety_map.csv",
        "safety_map.pgm",
        "metrics.csv",
        "report.txt",
    ] {
        assert_eq!(read(a.path().join(f)), read(b.path().join(f)), "{f} differs");
    }
    let csv = String::from_utf8(read(a.path().join("safety_map.csv"))).unwrap();
    let rows = csv.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 1 + 4);
    assert!(csv.contains("# decoder_hash="));
    let report = String::from_utf8(read(a.path().join("report.txt"))).unwrap();
    assert!(report.contains("Non-CP") && report.contains("CP"));
    assert!(a.path().join("safety_map.timing.csv").is_file());
}

#[test]
fn certificates_from_other_networks_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_eq!(code(&dwm(dir.path(), &["pipeline", "--config", &cfg])), 0);
    // Retrain the decoder with another seed but keep the old certificate.
    let o = dwm(dir.path(), &["train", "--config", &cfg, "--seed", "8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&dwm(dir.path(), &["evaluate", "--config", &cfg])), 3);
    assert_eq!(code(&dwm(dir.path(), &["verify", "--config", &cfg])), 0);
    let o = dwm(dir.path(), &["evaluate", "--config", &cfg]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("provenance"));
}

#[test]
fn evaluate_without_certificate_reports_non_cp_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for stage in ["generate-data", "train-controller", "train", "verify"] {
        let o = dwm(dir.path(), &[stage, "--config", &cfg]);
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = dwm(dir.path(), &["evaluate", "--config", &cfg, "--truth-camera", "surrogate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = String::from_utf8(read(dir.path().join("metrics.csv"))).unwrap();
    assert!(metrics.contains("\nNon-CP,"));
    assert!(!metrics.contains("\nCP,"));
    // Surrogate ground truth with a sound verifier: no false positives.
    let row = metrics.lines().find(|l| l.starts_with("Non-CP,")).unwrap();
    assert_eq!(row.split(',').nth(2), Some("0"));
}
