use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_SEA_BINS: usize = 20;
pub const DEFAULT_SEA_THRESHOLD: f64 = 0.95;

/// How close the weighted-fit score `q_tilde` is to a function of the
/// unweighted-fit score `q`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeaReport {
    pub n: usize,
    pub bins: usize,
    pub r2_func: f64,
    pub threshold: f64,
    pub compatible: bool,
    /// `q_tilde` has no variance; `r2_func` is reported as 1.
    pub degenerate: bool,
}

fn population_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

/// Bins `q` into `bins` equal-count groups (ties broken by position) and
/// returns `1 - mean within-bin variance of q_tilde / total variance`.
pub fn sea_diagnostic(q: &[f64], q_tilde: &[f64], bins: usize, threshold: f64) -> Result<SeaReport> {
    let n = q.len();
    if q_tilde.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} scores against {} weighted-fit scores", q_tilde.len())));
    }
    if n == 0 || bins == 0 {
        return Err(Error::InvalidArgument("SEA diagnostic needs scores and at least one bin".into()));
    }
    if q.iter().chain(q_tilde).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite matching score".into()));
    }
    let bins = bins.min(n);
    let total = population_variance(q_tilde);
    if !(total > 0.0) {
        return Ok(SeaReport { n, bins, r2_func: 1.0, threshold, compatible: true, degenerate: true });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| q[a].total_cmp(&q[b]).then(a.cmp(&b)));
    let within: f64 = (0..bins)
        .map(|b| {
            let members: Vec<f64> = order[b * n / bins..(b + 1) * n / bins].iter().map(|&i| q_tilde[i]).collect();
            population_variance(&members)
        })
        .sum::<f64>()
        / bins as f64;
    let r2_func = 1.0 - within / total;
    Ok(SeaReport { n, bins, r2_func, threshold, compatible: r2_func >= threshold, degenerate: false })
}
