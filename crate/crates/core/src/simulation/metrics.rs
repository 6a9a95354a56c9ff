use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::csum;

/// Monte Carlo performance of one estimator. Undefined entries are NaN
/// (serialized as JSON `null` and as an empty CSV cell).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub estimator: String,
    /// Relative bias in percent.
    pub rb_pct: f64,
    /// Empirical variance (divisor `B - 1`).
    pub v: f64,
    pub mse: f64,
    /// Mean linearization variance over `v`.
    pub vr_tl: f64,
    /// Mean jackknife variance over `v`.
    pub vr_jk: f64,
    pub cp_tl: f64,
    pub cp_jk: f64,
}

fn variance_metrics(estimates: &[f64], variances: Option<&[f64]>, v: f64, mu_true: f64) -> Result<(f64, f64)> {
    let Some(vars) = variances else {
        return Ok((f64::NAN, f64::NAN));
    };
    if vars.len() != estimates.len() {
        return Err(Error::DimensionMismatch(format!("{} variances for {} estimates", vars.len(), estimates.len())));
    }
    let b = estimates.len() as f64;
    let vr = csum(vars.iter().copied()) / b / v;
    let hits = estimates
        .iter()
        .zip(vars)
        .filter(|(m, var)| {
            let half = crate::estimation::Z_975 * var.max(0.0).sqrt();
            *m - half <= mu_true && mu_true <= *m + half
        })
        .count();
    Ok((vr, hits as f64 / b))
}

/// Bias, variance, MSE, variance ratios and interval coverage over `B`
/// replicates. `V` and the variance ratios need `B >= 2` and are NaN below.
pub fn compute_metrics(
    estimator: &str,
    estimates: &[f64],
    tl: Option<&[f64]>,
    jk: Option<&[f64]>,
    mu_true: f64,
) -> Result<MetricsRow> {
    let n = estimates.len();
    if n == 0 {
        return Err(Error::InvalidArgument("metrics need at least one replicate".into()));
    }
    if mu_true == 0.0 {
        return Err(Error::InvalidArgument("relative bias is undefined for a zero target".into()));
    }
    let b = n as f64;
    let mean = csum(estimates.iter().copied()) / b;
    let rb_pct = csum(estimates.iter().map(|m| (m - mu_true) / mu_true)) / b * 100.0;
    let mse = csum(estimates.iter().map(|m| (m - mu_true).powi(2))) / b;
    let v = if n >= 2 { csum(estimates.iter().map(|m| (m - mean).powi(2))) / (b - 1.0) } else { f64::NAN };
    let (vr_tl, cp_tl) = variance_metrics(estimates, tl, v, mu_true)?;
    let (vr_jk, cp_jk) = variance_metrics(estimates, jk, v, mu_true)?;
    Ok(MetricsRow { estimator: estimator.to_string(), rb_pct, v, mse, vr_tl, vr_jk, cp_tl, cp_jk })
}

pub const METRICS_HEADER: [&str; 8] = ["estimator", "%RB", "V x10^3", "VR(TL)", "VR(JK)", "CP(TL)", "CP(JK)", "MSE x10^3"];

fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

/// Writes the table with `V` and `MSE` scaled by 1000.
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.estimator.clone(),
            cell(r.rb_pct),
            cell(r.v * 1e3),
            cell(r.vr_tl),
            cell(r.vr_jk),
            cell(r.cp_tl),
            cell(r.cp_jk),
            cell(r.mse * 1e3),
        ])?;
    }
    w.flush()?;
    Ok(())
}
