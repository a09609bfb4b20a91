//! Correlation and error metrics, plus the toy end-to-end harness.

pub mod reference;
mod toy;

pub use toy::{toy_harness, ToyImage, ToyOptions, ToyReport};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{AppealError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub plcc: f64,
    pub srcc: f64,
    pub krcc: f64,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

/// Pearson, Spearman (average ranks), Kendall tau-b, RMSE and MAE.
pub fn correlations(x: &[f64], y: &[f64]) -> Result<MetricReport> {
    if x.len() != y.len() {
        return Err(AppealError::validation("y", format!("length {} differs from x ({})", y.len(), x.len())));
    }
    if x.len() < 2 {
        return Err(AppealError::validation("x", "need at least two values"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(AppealError::validation("x", "values must be finite"));
    }
    let n = x.len() as f64;
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let mae = x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    Ok(MetricReport {
        plcc: pearson(x, y)?,
        srcc: spearman(x, y)?,
        krcc: kendall_tau_b(x, y)?,
        rmse: mse.sqrt(),
        mae,
        n: x.len(),
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AppealError::Undefined("an input has zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Sum of `t (t - 1) / 2` over runs of equal adjacent values.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort counting strict inversions.
fn count_inversions(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid], buf) + count_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            inv += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    inv
}

/// Kendall tau-b in `O(n log n)` (Knight's algorithm).
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as u64;
    // `+ 0.0` folds -0.0 into 0.0 so the sort agrees with `==` on ties.
    let mut pairs: Vec<(f64, f64)> = x.iter().zip(y).map(|(a, b)| (a + 0.0, b + 0.0)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let x_ties = tied_pairs(&xs);
    let joint_ties = tied_pairs(&pairs);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(ys.len());
    let discordant = count_inversions(&mut ys, &mut buf);
    let y_ties = tied_pairs(&ys);
    let total = n * (n - 1) / 2;
    if x_ties == total || y_ties == total {
        return Err(AppealError::Undefined("an input has zero variance".into()));
    }
    let num = total as f64 - x_ties as f64 - y_ties as f64 + joint_ties as f64 - 2.0 * discordant as f64;
    let den = ((total - x_ties) as f64).sqrt() * ((total - y_ties) as f64).sqrt();
    Ok((num / den).clamp(-1.0, 1.0))
}

/// Plain-text table, one row per method.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(name, _)| name.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>6}", "Method", "PLCC", "SRCC", "KRCC", "RMSE", "MAE", "n");
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "{name:<width$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}  {:>6}",
            m.plcc, m.srcc, m.krcc, m.rmse, m.mae, m.n
        );
    }
    out
}
