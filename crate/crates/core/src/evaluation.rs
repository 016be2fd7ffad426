//! Ground truth by dense simulation and confusion metrics for safety maps.
//!
//! The positive class is "successful": a verified cell that truly succeeds
//! is a true positive, so a sound verifier has no false positives.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::env::{Camera, EnvModel};
use crate::error::{invalid, Result};
use crate::nn::Network;
use crate::reach::{parallel_map, GridSpec, SafetyMap, Verdict};
use crate::training::{item_rng, uniform_in};

pub const DEFAULT_SAMPLES_PER_CELL: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMap {
    pub grid: GridSpec,
    pub horizon: usize,
    pub samples_per_cell: usize,
    /// Number of sampled trajectories per cell that succeeded.
    pub successes: Vec<usize>,
}

impl GroundTruthMap {
    /// A cell is successful only when every sample succeeded.
    pub fn successful(&self, cell: usize) -> bool {
        self.successes[cell] == self.samples_per_cell
    }

    pub fn successful_count(&self) -> usize {
        (0..self.successes.len()).filter(|&c| self.successful(c)).count()
    }
}

/// Labels each cell by `samples_per_cell` uniform initial states driven by
/// `camera` (the real renderer, or a decoder as surrogate). Cell `c` draws
/// from its own random stream, so the map does not depend on `workers`.
#[allow(clippy::too_many_arguments)]
pub fn ground_truth(
    env: &EnvModel,
    controller: &Network,
    camera: Camera<'_>,
    grid: &GridSpec,
    samples_per_cell: usize,
    horizon: usize,
    seed: u64,
    workers: usize,
) -> Result<GroundTruthMap> {
    if samples_per_cell == 0 {
        return invalid("samples_per_cell must be at least 1");
    }
    grid.validate()?;
    let counts = parallel_map(grid.num_cells(), workers, |c| -> Result<usize> {
        let b = grid.cell(c);
        let mut rng = item_rng(seed, c as u64);
        let mut ok = 0;
        for _ in 0..samples_per_cell {
            let s0 = env.embed(&uniform_in(&mut rng, b.lower(), b.upper()));
            // A trajectory that leaves the simulator's domain did not succeed.
            if env.rollout(controller, camera, &s0, horizon).is_ok_and(|t| env.trajectory_succeeds(&t)) {
                ok += 1;
            }
        }
        Ok(ok)
    });
    Ok(GroundTruthMap {
        grid: grid.clone(),
        horizon,
        samples_per_cell,
        successes: counts.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub tnr: f64,
    pub f1: f64,
    /// Set when the metric's denominator is zero; the value is then 1.0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub tnr_undefined: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (1.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let (precision, precision_undefined) = ratio(tp, tp + fp);
        let (recall, recall_undefined) = ratio(tp, tp + fn_);
        let (tnr, tnr_undefined) = ratio(tn, tn + fp);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        MetricsReport { tp, fp, fn_, tn, precision, recall, tnr, f1, precision_undefined, recall_undefined, tnr_undefined }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub const CSV_HEADER: &'static str = "label,tp,fp,fn,tn,tnr,precision,recall,f1,undefined";

    pub fn csv_row(&self, label: &str) -> String {
        let undefined: Vec<&str> = [
            (self.tnr_undefined, "tnr"),
            (self.precision_undefined, "precision"),
            (self.recall_undefined, "recall"),
        ]
        .iter()
        .filter(|(f, _)| *f)
        .map(|(_, n)| *n)
        .collect();
        format!(
            "{label},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.tp,
            self.fp,
            self.fn_,
            self.tn,
            self.tnr,
            self.precision,
            self.recall,
            self.f1,
            undefined.join(";")
        )
    }
}

/// Side-by-side table of labelled reports (for example Non-CP and CP).
pub fn metrics_table(reports: &[(&str, &MetricsReport)]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "metric");
    for (label, _) in reports {
        let _ = write!(out, "{label:>12}");
    }
    out.push('\n');
    let rows: [(&str, fn(&MetricsReport) -> String); 8] = [
        ("TNR", |m| format!("{:.4}{}", m.tnr, if m.tnr_undefined { "*" } else { "" })),
        ("Precision", |m| format!("{:.4}{}", m.precision, if m.precision_undefined { "*" } else { "" })),
        ("Recall", |m| format!("{:.4}{}", m.recall, if m.recall_undefined { "*" } else { "" })),
        ("F1", |m| format!("{:.4}", m.f1)),
        ("TP", |m| m.tp.to_string()),
        ("FP", |m| m.fp.to_string()),
        ("FN", |m| m.fn_.to_string()),
        ("TN", |m| m.tn.to_string()),
    ];
    for (name, f) in rows {
        let _ = write!(out, "{name:<10}");
        for (_, m) in reports {
            let _ = write!(out, "{:>12}", f(m));
        }
        out.push('\n');
    }
    if reports.iter().any(|(_, m)| m.precision_undefined || m.recall_undefined || m.tnr_undefined) {
        out.push_str("* zero denominator, reported as 1.0\n");
    }
    out
}

/// Confusion counts of verdicts against ground truth over the same grid.
pub fn compare(map: &SafetyMap, truth: &GroundTruthMap) -> Result<MetricsReport> {
    if map.grid != truth.grid || map.tubes.len() != truth.successes.len() {
        return invalid("safety map and ground truth use different grids");
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (c, t) in map.tubes.iter().enumerate() {
        match (t.verdict == Verdict::VerifiedGoal, truth.successful(c)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, fn_, tn))
}
