use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{quantile_sorted, sample_variance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    #[default]
    Silverman,
    Fixed(f64),
}

/// Silverman's rule of thumb on the pooled matching scores:
/// `0.9 * min(sd, IQR / 1.34) * m^(-1/5)`, falling back to `sd` when the IQR is zero.
pub fn silverman_bandwidth(q_pooled: &[f64]) -> Result<f64> {
    let m = q_pooled.len();
    if m < 2 {
        return Err(Error::InvalidArgument("bandwidth selection needs at least two scores".into()));
    }
    if q_pooled.iter().any(|q| !q.is_finite()) {
        return Err(Error::InvalidArgument("non-finite matching score".into()));
    }
    let sd = sample_variance(q_pooled).sqrt();
    let mut sorted = q_pooled.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) {
        return Err(Error::ZeroSpread);
    }
    Ok(0.9 * spread * (m as f64).powf(-0.2))
}

impl BandwidthRule {
    pub fn select(self, q_cohort: &[f64], q_survey: &[f64]) -> Result<f64> {
        match self {
            BandwidthRule::Fixed(h) if h > 0.0 && h.is_finite() => Ok(h),
            BandwidthRule::Fixed(h) => Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}"))),
            BandwidthRule::Silverman => {
                let pooled: Vec<f64> = q_cohort.iter().chain(q_survey).copied().collect();
                silverman_bandwidth(&pooled)
            }
        }
    }
}
