//! Brute-force LP oracle shared by the LP tests and the acceptance suite.

use dwm_core::linalg::Matrix;
use dwm_core::linprog::{LpProblem, Sense};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Solves the square system `a x = b` by Gaussian elimination; `None` if singular.
fn solve_square(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
        if a[piv][k].abs() < 1e-10 {
            return None;
        }
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    Some(x)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut out = combinations(n - 1, k);
    for mut c in combinations(n - 1, k - 1) {
        c.push(n - 1);
        out.push(c);
    }
    out
}

/// Best objective over all vertices of a bounded polytope, or `None` when empty.
pub fn vertex_optimum(p: &LpProblem) -> Option<f64> {
    let n = p.objective.len();
    let mut rows: Vec<(Vec<f64>, f64)> = (0..p.constraints.rows()).map(|i| (p.constraints.row(i).to_vec(), p.rhs[i])).collect();
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        rows.push((e.clone(), p.upper[j]));
        e[j] = -1.0;
        rows.push((e, -p.lower[j]));
    }
    let mut best: Option<f64> = None;
    for idx in combinations(rows.len(), n) {
        let a = idx.iter().map(|&i| rows[i].0.clone()).collect();
        let b = idx.iter().map(|&i| rows[i].1).collect();
        let Some(x) = solve_square(a, b) else { continue };
        let feasible = rows.iter().all(|(r, d)| r.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() <= d + 1e-9);
        if !feasible {
            continue;
        }
        let v: f64 = p.objective.iter().zip(&x).map(|(c, x)| c * x).sum();
        best = Some(match (best, p.sense) {
            (None, _) => v,
            (Some(b), Sense::Minimize) => b.min(v),
            (Some(b), Sense::Maximize) => b.max(v),
        });
    }
    best
}

pub fn random_problem(rng: &mut ChaCha8Rng) -> LpProblem {
    let n = rng.gen_range(1..=3);
    let m = rng.gen_range(0..=6);
    let data = (0..m * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let lower: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..0.5)).collect();
    let upper = lower.iter().map(|l| if rng.gen_bool(0.1) { *l } else { l + rng.gen_range(0.0..3.0) }).collect();
    LpProblem {
        objective: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        constraints: Matrix::from_vec(m, n, data).unwrap(),
        rhs: (0..m).map(|_| rng.gen_range(-1.5..2.0)).collect(),
        lower,
        upper,
        sense: if rng.gen_bool(0.5) { Sense::Minimize } else { Sense::Maximize },
    }
}
