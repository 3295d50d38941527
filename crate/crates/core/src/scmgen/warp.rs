use serde::{Deserialize, Serialize};

use crate::error::{FeatError, Result};
use crate::numerics::random::{sample_kumaraswamy_icdf, RngStream};

/// Mid-ranks (1-based, ties share their average rank).
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Warp one column through the Kumaraswamy inverse CDF of its mid-rank
/// empirical CDF `u = (rank − ½)/N`, then standardize. Returns `None` for
/// a constant column.
pub fn warp_column(x: &[f64], a: f64, b: f64) -> Result<Option<Vec<f64>>> {
    let n = x.len();
    if n < 2 || x.iter().all(|&v| v == x[0]) {
        return Ok(None);
    }
    let ranks = mid_ranks(x);
    let mut out = ranks
        .iter()
        .map(|r| sample_kumaraswamy_icdf((r - 0.5) / n as f64, a, b))
        .collect::<Result<Vec<f64>>>()?;
    let mean = out.iter().sum::<f64>() / n as f64;
    let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if !(sd > 0.0) {
        return Err(FeatError::Generation("warp collapsed a non-constant column".into()));
    }
    out.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    Ok(Some(out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnWarp {
    pub column: usize,
    /// `None` when the column was constant and left untouched.
    pub shape: Option<(f64, f64)>,
}

/// Warp the listed columns of `x` (`[N, D]`, row-major) in place with
/// shapes drawn log-uniformly from `a_range × b_range`.
pub fn kumaraswamy_warp(
    x: &mut [f64],
    cols: usize,
    columns: &[usize],
    a_range: [f64; 2],
    b_range: [f64; 2],
    rng: &mut RngStream,
) -> Result<Vec<ColumnWarp>> {
    let n = x.len() / cols;
    let mut report = Vec::with_capacity(columns.len());
    for &j in columns {
        let a = rng.log_uniform(a_range[0], a_range[1]);
        let b = rng.log_uniform(b_range[0], b_range[1]);
        let col: Vec<f64> = (0..n).map(|i| x[i * cols + j]).collect();
        let shape = match warp_column(&col, a, b)? {
            Some(w) => {
                for (i, v) in w.into_iter().enumerate() {
                    x[i * cols + j] = v;
                }
                Some((a, b))
            }
            None => None,
        };
        report.push(ColumnWarp { column: j, shape });
    }
    Ok(report)
}
