//! Hájek means, linearization and jackknife variances, confidence
//! intervals, and the exchangeability diagnostic.

mod design;
mod jackknife;
mod sea;
mod tl;

use std::collections::BTreeMap;

pub use design::design_variance;
pub use jackknife::{jackknife_from_replicates, jackknife_methods, jackknife_variance, JackknifeGroups, JackknifeResult};
pub use sea::{sea_diagnostic, SeaReport, DEFAULT_SEA_BINS, DEFAULT_SEA_THRESHOLD};
pub use tl::{tl_variance, TlComponents};

use crate::data::{CohortSample, EstimateReport, Method, SurveySample};
use crate::error::{Error, Result};
use crate::numeric::csum;
use crate::propensity::{fit_pseudo_mle, SurveyWeightMode};
use crate::weights::{compute_pseudoweights, WeightConfig};

/// Normal quantile used for every interval.
pub const Z_975: f64 = 1.96;

/// `sum w y / sum w`.
pub fn hajek_mean(w: &[f64], y: &[f64]) -> Result<f64> {
    if w.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} weights for {} outcomes", w.len(), y.len())));
    }
    let total = csum(w.iter().copied());
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("weights sum to zero".into()));
    }
    Ok(csum(w.iter().zip(y).map(|(a, b)| a * b)) / total)
}

pub fn confidence_interval(mu_hat: f64, variance: f64) -> Result<(f64, f64)> {
    if !(variance >= 0.0) {
        return Err(Error::InvalidArgument(format!("variance must be non-negative, got {variance}")));
    }
    let half = Z_975 * variance.sqrt();
    Ok((mu_hat - half, mu_hat + half))
}

/// Kish effective sample size `(sum w)^2 / sum w^2`.
pub fn effective_size(w: &[f64]) -> f64 {
    let s = csum(w.iter().copied());
    s * s / csum(w.iter().map(|v| v * v))
}

/// Options for [`estimate`].
#[derive(Debug, Clone, Copy, Default)]
pub struct EstimateOptions {
    /// Jackknife group count; `None` skips the jackknife.
    pub jackknife_groups: Option<usize>,
    pub seed: u64,
    /// Report non-converged fits instead of failing.
    pub allow_nonconverged: bool,
}

/// Point estimate, linearization variance and (optionally) jackknife
/// variance for each method; with `groups`, one report per domain level.
pub fn estimate(
    methods: &[Method],
    cohort: &CohortSample,
    survey: &SurveySample,
    groups: Option<&[String]>,
    cfg: &WeightConfig,
    opts: &EstimateOptions,
) -> Result<Vec<EstimateReport>> {
    let y = tl::outcome(cohort)?.to_vec();
    if let Some(g) = groups {
        if g.len() != cohort.len() {
            return Err(Error::DimensionMismatch(format!("{} group labels for {} cohort rows", g.len(), cohort.len())));
        }
    }
    let jk_groups = opts
        .jackknife_groups
        .map(|count| JackknifeGroups::from_design(cohort, survey, count, opts.seed))
        .transpose()?;

    let mut reports = Vec::new();
    for &method in methods {
        let (fit, set) = compute_pseudoweights(method, cohort, survey, cfg)?;
        if !fit.converged && !opts.allow_nonconverged {
            return Err(Error::NotConverged { iterations: fit.iterations });
        }
        let domains: Vec<(Option<String>, Vec<bool>)> = match groups {
            None => vec![(None, vec![true; cohort.len()])],
            Some(g) => {
                let levels: BTreeMap<&str, ()> = g.iter().map(|s| (s.as_str(), ())).collect();
                levels.keys().map(|l| (Some(l.to_string()), g.iter().map(|s| s == l).collect())).collect()
            }
        };
        for (label, member) in domains {
            let wd: Vec<f64> = set.w.iter().zip(&member).map(|(w, &m)| if m { *w } else { 0.0 }).collect();
            let n_hat = csum(wd.iter().copied());
            let mu_hat = hajek_mean(&wd, &y)?;
            let resid: Vec<f64> = y.iter().zip(&member).map(|(v, &m)| if m { v - mu_hat } else { 0.0 }).collect();
            let tl = tl::tl_core(cohort, survey, &fit, &set, &resid, n_hat)?;
            let var_jk = match (&jk_groups, &label) {
                (Some(g), None) => Some(jackknife_variance(method, cohort, survey, g, mu_hat, cfg)?),
                _ => None,
            };
            let mut warnings = set.warnings.clone();
            warnings.extend(tl.warnings.iter().cloned());
            if let Some(jk) = &var_jk {
                warnings.extend(jk.warnings.iter().cloned());
            }
            reports.push(EstimateReport {
                method: method.to_string(),
                group: label,
                mu_hat,
                var_tl: tl.variance,
                var_jk: var_jk.map(|j| j.variance),
                ci: confidence_interval(mu_hat, tl.variance)?,
                n_effective: effective_size(&wd),
                warnings,
            });
        }
    }
    Ok(reports)
}

/// Paired cohort scores from the weighted (`q`) and unweighted (`q_tilde`)
/// propensity fits.
pub fn sea_scores(cohort: &CohortSample, survey: &SurveySample, cfg: &WeightConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let weighted = fit_pseudo_mle(cohort, survey, &cfg.fit.with_mode(SurveyWeightMode::Weighted))?;
    let unweighted = fit_pseudo_mle(cohort, survey, &cfg.fit.with_mode(SurveyWeightMode::Unweighted))?;
    Ok((weighted.q_cohort, unweighted.q_cohort))
}
