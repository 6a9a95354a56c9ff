//! Monte Carlo evaluation on a simulated finite population with Poisson
//! PPS cohort and survey draws.

mod metrics;
mod population;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{compute_metrics, write_metrics_csv, MetricsRow, METRICS_HEADER};
pub use population::{generate_population, pps_poisson_sample, pps_probabilities, FinitePopulation, PpsSample, SimModel};

use crate::data::{CohortSample, DesignInfo, Method, SurveySample};
use crate::error::{Error, Result};
use crate::estimation::{hajek_mean, jackknife_methods, JackknifeGroups};
use crate::numeric::{csum, dot};
use crate::par::{map_range, Execution};
use crate::propensity::{fit_pseudo_mle, SurveyWeightMode};
use crate::weights::{weights_from_fit, KernelSpec, WeightConfig};

/// Share of failed replicates above which a run aborts.
const MAX_FAILED_SHARE: f64 = 0.01;

/// Stream reserved for the population draw; replicate `b` uses stream `b + 1`.
const POPULATION_STREAM: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub population_size: usize,
    pub n_cohort: usize,
    pub n_survey: usize,
    pub replicates: usize,
    /// Cohort measure-of-size coefficients on `(x1, x2, x3)`.
    pub alpha: [f64; 3],
    /// Survey measure-of-size coefficients on `(x1, x2, x3)`.
    pub gamma: [f64; 3],
    #[serde(default)]
    pub model: SimModel,
    #[serde(default)]
    pub kernel: KernelSpec,
    pub seed: u64,
    /// Jackknife groups per replicate; 0 skips the jackknife.
    #[serde(default)]
    pub jackknife_groups: usize,
}

impl ScenarioConfig {
    pub const ALPHA: [f64; 3] = [0.6, 0.15, 0.24];

    fn desk(gamma: [f64; 3]) -> Self {
        Self {
            population_size: 50_000,
            n_cohort: 2400,
            n_survey: 2000,
            replicates: 500,
            alpha: Self::ALPHA,
            gamma,
            model: SimModel::T,
            kernel: KernelSpec::default(),
            seed: 1,
            jackknife_groups: 0,
        }
    }

    /// Survey selection moderately related to the cohort's.
    pub fn scenario1() -> Self {
        Self::desk([-0.4, -0.1, 0.16])
    }

    /// Survey selection for which the unweighted matching score breaks exchangeability.
    pub fn scenario2() -> Self {
        Self::desk([-0.65, 0.2, 0.0])
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "scenario1" | "s1" | "1" => Ok(Self::scenario1()),
            "scenario2" | "s2" | "2" => Ok(Self::scenario2()),
            other => Err(Error::InvalidArgument(format!("unknown preset `{other}`; expected scenario1 or scenario2"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidArgument("replicates must be at least 1".into()));
        }
        if self.population_size <= self.n_cohort + self.n_survey {
            return Err(Error::InvalidArgument(format!(
                "population size {} must exceed n_cohort + n_survey = {}",
                self.population_size,
                self.n_cohort + self.n_survey
            )));
        }
        if self.population_size < 1000 {
            return Err(Error::InvalidArgument("population size must be at least 1000".into()));
        }
        if self.n_cohort == 0 || self.n_survey == 0 {
            return Err(Error::InvalidArgument("sample sizes must be positive".into()));
        }
        if self.alpha.iter().chain(&self.gamma).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("selection coefficients must be finite".into()));
        }
        if self.jackknife_groups == 1 {
            return Err(Error::InvalidArgument("jackknife needs at least 2 groups (0 disables it)".into()));
        }
        Ok(())
    }
}

/// Estimators reported by the simulation, in table order.
pub const ESTIMATORS: [&str; 7] = ["Naive", "SVY", "IPSW", "IPSW.S", "KW", "KW.W", "KW.S"];

/// Per-replicate results, indexed like [`ESTIMATORS`]. Variances are NaN
/// where an estimator has none.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub estimates: [f64; 7],
    pub var_tl: [f64; 7],
    pub var_jk: [f64; 7],
    pub n_cohort: usize,
    pub n_survey: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub config: ScenarioConfig,
    pub mu_true: f64,
    pub replicates_used: usize,
    pub replicates_failed: usize,
    pub rows: Vec<MetricsRow>,
}

/// One cohort and one survey drawn from `pop` under `cfg`'s selection models.
pub fn draw_samples(pop: &FinitePopulation, cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<(CohortSample, SurveySample, Vec<f64>)> {
    let mos = |coef: &[f64; 3]| (0..pop.len()).map(|i| dot(coef, &pop.selection_covariates(i)).exp()).collect::<Vec<f64>>();
    let c = pps_poisson_sample(&mos(&cfg.alpha), cfg.n_cohort, rng)?;
    let s = pps_poisson_sample(&mos(&cfg.gamma), cfg.n_survey, rng)?;
    let y_c: Vec<f64> = c.indices.iter().map(|&i| pop.y[i]).collect();
    let y_s: Vec<f64> = s.indices.iter().map(|&i| pop.y[i]).collect();
    let cohort = CohortSample::new(pop.covariates(cfg.model, &c.indices), Some(y_c))?;
    let n_s = s.indices.len();
    let survey = SurveySample::new(pop.covariates(cfg.model, &s.indices), s.weights, DesignInfo::poisson(n_s))?;
    Ok((cohort, survey, y_s))
}

fn replicate_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs replicate `b` of `cfg` on `pop`.
pub fn run_replicate(pop: &FinitePopulation, cfg: &ScenarioConfig, b: usize) -> Result<ReplicateResult> {
    let mut rng = replicate_rng(cfg.seed, b as u64 + 1);
    let (cohort, survey, y_s) = draw_samples(pop, cfg, &mut rng)?;
    let y = cohort.y.as_deref().expect("simulated cohort has outcomes");
    let mut estimates = [f64::NAN; 7];
    let mut var_tl = [f64::NAN; 7];
    let mut var_jk = [f64::NAN; 7];

    estimates[0] = crate::numeric::mean(y);
    let mu_s = hajek_mean(&survey.d, &y_s)?;
    estimates[1] = mu_s;
    // Poisson-design linearization of the survey Hájek mean
    let n_s_hat = survey.weight_total();
    var_tl[1] = csum(survey.d.iter().zip(&y_s).map(|(d, v)| (1.0 - 1.0 / d) * (d * (v - mu_s)).powi(2))) / (n_s_hat * n_s_hat);

    let wcfg = WeightConfig { kernel: cfg.kernel, jacobian: true, exec: Execution::Sequential, ..Default::default() };
    let mut fits = Vec::with_capacity(3);
    for mode in [SurveyWeightMode::Weighted, SurveyWeightMode::Scaled, SurveyWeightMode::Unweighted] {
        let fit = fit_pseudo_mle(&cohort, &survey, &wcfg.fit.with_mode(mode))?;
        if !fit.converged {
            return Err(Error::NotConverged { iterations: fit.iterations });
        }
        fits.push(fit);
    }
    for (k, method) in Method::ALL.iter().enumerate() {
        let fit = fits.iter().find(|f| f.mode == method.fit_mode()).expect("every mode is fitted");
        let set = weights_from_fit(*method, fit, &cohort, &survey, &wcfg)?;
        let mu = hajek_mean(&set.w, y)?;
        estimates[k + 2] = mu;
        var_tl[k + 2] = crate::estimation::tl_variance(&cohort, &survey, fit, &set, mu)?.variance;
    }
    if cfg.jackknife_groups >= 2 {
        let groups = JackknifeGroups::random(cohort.len(), survey.len(), cfg.jackknife_groups, rand::Rng::random(&mut rng))?;
        let methods: Vec<(Method, f64)> = Method::ALL.iter().enumerate().map(|(k, m)| (*m, estimates[k + 2])).collect();
        for (k, jk) in jackknife_methods(&methods, &cohort, &survey, &groups, &wcfg)?.into_iter().enumerate() {
            var_jk[k + 2] = jk.variance;
        }
    }
    Ok(ReplicateResult { estimates, var_tl, var_jk, n_cohort: cohort.len(), n_survey: survey.len() })
}

/// Replicate results in index order; failed replicates are `Err`.
pub fn run_replicates(pop: &FinitePopulation, cfg: &ScenarioConfig, exec: Execution) -> Vec<Result<ReplicateResult>> {
    map_range(exec, cfg.replicates, |b| run_replicate(pop, cfg, b))
}

/// Aggregates replicate results into one metrics row per estimator.
pub fn summarize(cfg: &ScenarioConfig, mu_true: f64, results: &[Result<ReplicateResult>]) -> Result<SimulationReport> {
    let ok: Vec<&ReplicateResult> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let failed = results.len() - ok.len();
    if failed > 0 {
        let first = results.iter().find_map(|r| r.as_ref().err()).map(ToString::to_string).unwrap_or_default();
        if failed as f64 >= MAX_FAILED_SHARE * results.len() as f64 {
            log::error!("{failed} of {} replicates failed; first error: {first}", results.len());
            return Err(Error::ReplicateFailures { failed, total: results.len() });
        }
        log::warn!("excluded {failed} of {} replicates; first error: {first}", results.len());
    }
    let column = |pick: fn(&ReplicateResult) -> &[f64; 7], k: usize| ok.iter().map(|r| pick(r)[k]).collect::<Vec<f64>>();
    let rows = ESTIMATORS
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let est = column(|r| &r.estimates, k);
            let tl = column(|r| &r.var_tl, k);
            let jk = column(|r| &r.var_jk, k);
            let tl = tl.iter().all(|v| !v.is_nan()).then_some(tl.as_slice());
            let jk = jk.iter().all(|v| !v.is_nan()).then_some(jk.as_slice());
            compute_metrics(name, &est, tl, jk, mu_true)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulationReport { config: cfg.clone(), mu_true, replicates_used: ok.len(), replicates_failed: failed, rows })
}

/// Generates the population, runs every replicate and summarizes.
pub fn run_replications(cfg: &ScenarioConfig, exec: Execution) -> Result<SimulationReport> {
    cfg.validate()?;
    let pop = generate_population(cfg.population_size, population_seed(cfg.seed))?;
    let results = run_replicates(&pop, cfg, exec);
    summarize(cfg, pop.mean_y(), &results)
}

/// Population seed derived from the master seed on its own stream.
pub fn population_seed(seed: u64) -> u64 {
    rand::Rng::random(&mut replicate_rng(seed, POPULATION_STREAM))
}
