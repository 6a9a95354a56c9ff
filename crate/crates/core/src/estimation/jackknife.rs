use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::hajek_mean;
use super::tl::outcome;
use crate::data::{CohortSample, DesignKind, Method, SurveySample};
use crate::error::{Error, Result};
use crate::numeric::csum;
use crate::par::{map_range, Execution};
use crate::propensity::{fit_pseudo_mle, SurveyWeightMode};
use crate::weights::{weights_from_fit, WeightConfig};

/// Failure share below which failed replicates are dropped rather than fatal.
const MAX_FAILED_SHARE: f64 = 0.05;

/// Delete-one-group assignment for both samples. Group labels run `0..count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JackknifeGroups {
    pub count: usize,
    pub cohort: Vec<usize>,
    pub survey: Vec<usize>,
}

impl JackknifeGroups {
    /// Random equal-size groups for each sample, seeded.
    pub fn random(n_cohort: usize, n_survey: usize, count: usize, seed: u64) -> Result<Self> {
        check_count(count, n_cohort.min(n_survey))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { count, cohort: shuffled_labels(n_cohort, count, &mut rng), survey: shuffled_labels(n_survey, count, &mut rng) })
    }

    /// PSUs define the survey groups when the design has them; the cohort is
    /// split at random into as many groups. Otherwise both are random.
    pub fn from_design(cohort: &CohortSample, survey: &SurveySample, count: usize, seed: u64) -> Result<Self> {
        if survey.design.kind != DesignKind::StratifiedWrPsu {
            return Self::random(cohort.len(), survey.len(), count, seed);
        }
        let mut ids = BTreeMap::new();
        for key in survey.design.strata.iter().zip(&survey.design.psu) {
            let next = ids.len();
            ids.entry(key).or_insert(next);
        }
        let survey_labels: Vec<usize> =
            survey.design.strata.iter().zip(&survey.design.psu).map(|key| ids[&key]).collect();
        let count = ids.len();
        check_count(count, cohort.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { count, cohort: shuffled_labels(cohort.len(), count, &mut rng), survey: survey_labels })
    }

    fn members(labels: &[usize], g: usize) -> Vec<usize> {
        (0..labels.len()).filter(|&i| labels[i] != g).collect()
    }
}

fn check_count(count: usize, n: usize) -> Result<()> {
    if count < 2 {
        return Err(Error::InvalidArgument(format!("jackknife needs at least 2 groups, got {count}")));
    }
    if count > n {
        return Err(Error::InvalidArgument(format!("{count} jackknife groups for a sample of {n}")));
    }
    Ok(())
}

fn shuffled_labels(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % count).collect();
    labels.shuffle(rng);
    labels
}

#[derive(Debug, Clone, Serialize)]
pub struct JackknifeResult {
    pub method: Method,
    pub variance: f64,
    /// Replicate estimates; `None` marks a dropped replicate.
    pub replicates: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// `((G-1)/G) sum_g (mu_g - mu)^2` over the supplied replicates.
pub fn jackknife_from_replicates(mu_hat: f64, replicates: &[f64], groups: usize) -> f64 {
    let g = groups as f64;
    (g - 1.0) / g * csum(replicates.iter().map(|m| (m - mu_hat).powi(2)))
}

/// Full-refit delete-one-group jackknife for one method.
pub fn jackknife_variance(
    method: Method,
    cohort: &CohortSample,
    survey: &SurveySample,
    groups: &JackknifeGroups,
    mu_hat: f64,
    cfg: &WeightConfig,
) -> Result<JackknifeResult> {
    jackknife_methods(&[(method, mu_hat)], cohort, survey, groups, cfg).map(|mut v| v.remove(0))
}

/// Jackknife for several methods at once; each replicate refits every
/// distinct propensity mode once and reuses it across methods.
/// Replicates run under `cfg.exec`.
pub fn jackknife_methods(
    methods: &[(Method, f64)],
    cohort: &CohortSample,
    survey: &SurveySample,
    groups: &JackknifeGroups,
    cfg: &WeightConfig,
) -> Result<Vec<JackknifeResult>> {
    let y = outcome(cohort)?;
    if groups.cohort.len() != cohort.len() || groups.survey.len() != survey.len() {
        return Err(Error::DimensionMismatch("jackknife groups do not match the samples".into()));
    }
    check_count(groups.count, usize::MAX)?;
    let g_count = groups.count;
    let factor = g_count as f64 / (g_count as f64 - 1.0);
    let inner = WeightConfig { jacobian: false, exec: Execution::Sequential, ..*cfg };

    let replicate = |g: usize| -> Vec<Option<f64>> {
        let ci = JackknifeGroups::members(&groups.cohort, g);
        let si = JackknifeGroups::members(&groups.survey, g);
        let c = cohort.select_rows(&ci);
        let s = survey.select_rows(&si, factor);
        let yg: Vec<f64> = ci.iter().map(|&i| y[i]).collect();
        let mut fits: Vec<(SurveyWeightMode, Option<_>)> = Vec::new();
        methods
            .iter()
            .map(|&(m, _)| {
                let mode = m.fit_mode();
                let fit = match fits.iter().find(|(md, _)| *md == mode) {
                    Some((_, f)) => f.clone(),
                    None => {
                        let f = fit_pseudo_mle(&c, &s, &inner.fit.with_mode(mode)).ok().filter(|f| f.converged);
                        fits.push((mode, f.clone()));
                        f
                    }
                };
                let fit = fit?;
                let set = weights_from_fit(m, &fit, &c, &s, &inner).ok()?;
                hajek_mean(&set.w, &yg).ok()
            })
            .collect()
    };
    let reps = map_range(cfg.exec, g_count, replicate);

    methods
        .iter()
        .enumerate()
        .map(|(k, &(method, mu_hat))| {
            let replicates: Vec<Option<f64>> = reps.iter().map(|r| r[k]).collect();
            let ok: Vec<f64> = replicates.iter().flatten().copied().collect();
            let failed = g_count - ok.len();
            let mut warnings = Vec::new();
            if failed > 0 {
                if failed as f64 >= MAX_FAILED_SHARE * g_count as f64 {
                    return Err(Error::ReplicateFailures { failed, total: g_count });
                }
                warnings.push(format!("{method}: dropped {failed} of {g_count} jackknife replicates"));
                log::warn!("{method}: dropped {failed} of {g_count} jackknife replicates");
            }
            Ok(JackknifeResult { method, variance: jackknife_from_replicates(mu_hat, &ok, g_count), replicates, warnings })
        })
        .collect()
}
