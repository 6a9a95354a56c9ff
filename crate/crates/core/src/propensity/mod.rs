//! Logistic propensity model fitted by maximising the survey-weighted pseudo
//! log-likelihood
//!
//! ```text
//! l(beta) = sum_{cohort} log p_i + sum_{survey} omega_i log(1 - p_i)
//! ```
//!
//! where `omega` is all ones (cohort vs unweighted survey), the base weights
//! `d` (cohort vs weighted survey) or the scaled weights `a * d` with
//! `a = n_s / sum(d)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CohortSample, CovariateMatrix, PropensityFit, SurveySample};
use crate::error::{Error, Result};
use crate::numeric::{csum, dot, expit, logit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurveyWeightMode {
    Unweighted,
    Weighted,
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub mode: SurveyWeightMode,
    pub max_iterations: usize,
    /// Bound on `max |score| / n_c` at convergence.
    pub score_tolerance: f64,
    pub step_halving_max: usize,
    pub p_clip: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            mode: SurveyWeightMode::Weighted,
            max_iterations: 50,
            score_tolerance: 1e-10,
            step_halving_max: 20,
            p_clip: 1e-8,
        }
    }
}

impl FitConfig {
    pub fn with_mode(mut self, mode: SurveyWeightMode) -> Self {
        self.mode = mode;
        self
    }

    fn check(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
        }
        if !(self.score_tolerance > 0.0) || !(self.p_clip > 0.0 && self.p_clip < 0.5) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Rescales survey weights to sum to the sample size. Returns `(a * d, a)`.
pub fn scale_weights(d: &[f64]) -> Result<(Vec<f64>, f64)> {
    if d.is_empty() {
        return Err(Error::Empty("survey weight vector"));
    }
    if let Some(row) = d.iter().position(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::NonPositiveWeight { row });
    }
    let a = d.len() as f64 / csum(d.iter().copied());
    Ok((d.iter().map(|&w| a * w).collect(), a))
}

/// The survey weights entering the fit for a given mode, and the scale factor.
pub fn mode_weights(d: &[f64], mode: SurveyWeightMode) -> Result<(Vec<f64>, f64)> {
    match mode {
        SurveyWeightMode::Unweighted => Ok((vec![1.0; d.len()], 1.0)),
        SurveyWeightMode::Weighted => {
            if let Some(row) = d.iter().position(|&w| !(w > 0.0 && w.is_finite())) {
                return Err(Error::NonPositiveWeight { row });
            }
            Ok((d.to_vec(), 1.0))
        }
        SurveyWeightMode::Scaled => scale_weights(d),
    }
}

/// The pseudo log-likelihood, its score and its (negated) Hessian.
#[derive(Debug, Clone, Copy)]
pub struct PseudoLikelihood<'a> {
    pub cohort: &'a CovariateMatrix,
    pub survey: &'a CovariateMatrix,
    pub omega: &'a [f64],
    pub p_clip: f64,
}

impl PseudoLikelihood<'_> {
    #[inline]
    fn prob(&self, q: f64) -> f64 {
        expit(q).clamp(self.p_clip, 1.0 - self.p_clip)
    }

    pub fn value(&self, beta: &[f64]) -> f64 {
        let a = csum(self.cohort.rows().map(|x| self.prob(crate::numeric::dot(x, beta)).ln()));
        let b = csum(
            self.survey
                .rows()
                .zip(self.omega)
                .map(|(x, &w)| w * (-self.prob(crate::numeric::dot(x, beta))).ln_1p()),
        );
        a + b
    }

    pub fn score(&self, beta: &[f64]) -> Vec<f64> {
        let k = beta.len();
        let mut s = vec![0.0; k];
        for x in self.cohort.rows() {
            let r = 1.0 - self.prob(crate::numeric::dot(x, beta));
            for (sj, xj) in s.iter_mut().zip(x) {
                *sj += r * xj;
            }
        }
        for (x, &w) in self.survey.rows().zip(self.omega) {
            let r = w * self.prob(crate::numeric::dot(x, beta));
            for (sj, xj) in s.iter_mut().zip(x) {
                *sj -= r * xj;
            }
        }
        s
    }

    /// Observed information `-d^2 l / d beta^2`.
    pub fn information(&self, beta: &[f64]) -> DMatrix<f64> {
        let k = beta.len();
        let mut h = DMatrix::<f64>::zeros(k, k);
        let mut acc = |x: &[f64], c: f64| {
            for a in 0..k {
                let ca = c * x[a];
                for b in a..k {
                    h[(a, b)] += ca * x[b];
                }
            }
        };
        for x in self.cohort.rows() {
            let p = self.prob(crate::numeric::dot(x, beta));
            acc(x, p * (1.0 - p));
        }
        for (x, &w) in self.survey.rows().zip(self.omega) {
            let p = self.prob(crate::numeric::dot(x, beta));
            acc(x, w * p * (1.0 - p));
        }
        for a in 0..k {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        h
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Names the columns that are linear combinations of earlier columns in the
/// information matrix.
fn collinear_columns(h: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let k = h.nrows();
    let mut independent: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    for j in 0..k {
        let mut cand = independent.clone();
        cand.push(j);
        let sub = DMatrix::from_fn(cand.len(), cand.len(), |a, b| h[(cand[a], cand[b])]);
        let scale = h[(j, j)].abs().max(f64::MIN_POSITIVE);
        let ok = match sub.clone().cholesky() {
            Some(ch) => {
                let l = ch.l();
                let last = l[(cand.len() - 1, cand.len() - 1)];
                last * last > 1e-10 * scale
            }
            None => false,
        };
        if ok && h[(j, j)] > 0.0 {
            independent.push(j);
        } else {
            out.push(names[j].clone());
        }
    }
    out
}

/// Fits the propensity model by Newton-Raphson with step-halving.
pub fn fit_pseudo_mle(cohort: &CohortSample, survey: &SurveySample, cfg: &FitConfig) -> Result<PropensityFit> {
    fit_traced(cohort, survey, cfg, |_| {})
}

pub(crate) fn fit_traced(
    cohort: &CohortSample,
    survey: &SurveySample,
    cfg: &FitConfig,
    mut on_accept: impl FnMut(f64),
) -> Result<PropensityFit> {
    cfg.check()?;
    if cohort.is_empty() || survey.is_empty() {
        return Err(Error::Empty("cohort and survey must both be non-empty"));
    }
    if cohort.x.ncols() != survey.x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "cohort has {} columns, survey has {}",
            cohort.x.ncols(),
            survey.x.ncols()
        )));
    }
    let (omega, scale_a) = mode_weights(&survey.d, cfg.mode)?;
    let lik = PseudoLikelihood { cohort: &cohort.x, survey: &survey.x, omega: &omega, p_clip: cfg.p_clip };
    let n_c = cohort.len() as f64;
    let k = cohort.x.ncols();

    let mut beta = vec![0.0; k];
    beta[0] = logit(n_c / (n_c + csum(omega.iter().copied())));
    let mut ll = lik.value(&beta);
    on_accept(ll);
    let mut score = lik.score(&beta);
    let mut converged = max_abs(&score) / n_c <= cfg.score_tolerance;
    let mut iterations = 0;
    let mut warnings = Vec::new();

    while !converged && iterations < cfg.max_iterations {
        iterations += 1;
        let info = lik.information(&beta);
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&DVector::from_column_slice(&score)),
            None => {
                return Err(Error::SingularHessian { columns: collinear_columns(&info, cohort.x.names()) });
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=cfg.step_halving_max {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let cand_ll = lik.value(&cand);
            if cand_ll >= ll {
                beta = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No ascent is possible at machine precision. That is the optimum
            // when the predicted gain s'H^{-1}s/2 is below the resolution of l.
            let gain = 0.5 * dot(&score, step.as_slice());
            converged = max_abs(&score) / n_c <= cfg.score_tolerance
                || gain <= 64.0 * f64::EPSILON * ll.abs().max(1.0);
            if !converged {
                warnings.push(format!("step-halving exhausted at iteration {iterations}"));
            }
            break;
        }
        on_accept(ll);
        score = lik.score(&beta);
        converged = max_abs(&score) / n_c <= cfg.score_tolerance;
    }

    if !converged {
        warnings.push(format!("did not converge after {iterations} iterations"));
        log::warn!("propensity fit did not converge after {iterations} iterations");
    }

    let q_cohort = cohort.x.mul_vec(&beta);
    let q_survey = survey.x.mul_vec(&beta);
    if q_cohort.iter().chain(&q_survey).any(|q| q.abs() > 30.0) {
        warnings.push("possible perfect separation: |q| exceeds 30".into());
        log::warn!("possible perfect separation in propensity fit");
    }
    let to_p = |q: &f64| expit(*q).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    Ok(PropensityFit {
        p_cohort: q_cohort.iter().map(to_p).collect(),
        p_survey: q_survey.iter().map(to_p).collect(),
        q_cohort,
        q_survey,
        beta,
        scale_a,
        weighted: cfg.mode != SurveyWeightMode::Unweighted,
        mode: cfg.mode,
        converged,
        iterations,
        score_norm: max_abs(&score) / n_c,
        log_likelihood: ll,
        warnings,
    })
}

/// Estimated cohort participation rates `a * exp(beta' x)`, capped at 1.
/// Returns the rates and the number of capped units.
pub fn participation_rates(fit: &PropensityFit, x: &CovariateMatrix) -> Result<(Vec<f64>, usize)> {
    if !fit.weighted {
        return Err(Error::InvalidArgument(
            "participation rates need a fit against the weighted survey".into(),
        ));
    }
    if x.ncols() != fit.beta.len() {
        return Err(Error::DimensionMismatch(format!("{} coefficients for {} columns", fit.beta.len(), x.ncols())));
    }
    let mut capped = 0;
    let rates = x
        .rows()
        .map(|r| {
            let pi = fit.scale_a * crate::numeric::dot(r, &fit.beta).exp();
            if pi > 1.0 {
                capped += 1;
                1.0
            } else {
                pi
            }
        })
        .collect();
    if capped > 0 {
        log::debug!("{capped} participation rates capped at 1");
    }
    Ok((rates, capped))
}

/// Linear matching scores `q = beta' x` for both samples.
pub fn matching_scores(fit: &PropensityFit) -> (Vec<f64>, Vec<f64>) {
    (fit.q_cohort.clone(), fit.q_survey.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DesignInfo, INTERCEPT};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intercept_pair(n_c: usize, d: Vec<f64>) -> (CohortSample, SurveySample) {
        let c = CohortSample::new(CovariateMatrix::intercept_only(n_c).unwrap(), None).unwrap();
        let n_s = d.len();
        let s = SurveySample::new(CovariateMatrix::intercept_only(n_s).unwrap(), d, DesignInfo::poisson(n_s)).unwrap();
        (c, s)
    }

    /// Root of `n_c (1 - expit(b)) - W expit(b)` by bisection.
    fn bisect_intercept(n_c: f64, w: f64) -> f64 {
        let f = |b: f64| n_c * (1.0 - expit(b)) - w * expit(b);
        let (mut lo, mut hi) = (-50.0, 50.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn scale_weights_examples() {
        let (ds, a) = scale_weights(&[2.0, 3.0, 5.0]).unwrap();
        assert!((a - 0.3).abs() < 1e-15);
        for (x, e) in ds.iter().zip([0.6, 0.9, 1.5]) {
            assert!((x - e).abs() < 1e-12);
        }
        let (ds, a) = scale_weights(&[1.0; 4]).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(ds, vec![1.0; 4]);
        let (ds, a) = scale_weights(&[10.0, 90.0]).unwrap();
        assert!((a - 0.02).abs() < 1e-15);
        assert!((ds[0] - 0.2).abs() < 1e-12 && (ds[1] - 1.8).abs() < 1e-12);
        assert!((ds.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!(scale_weights(&[]).is_err());
        assert!(matches!(scale_weights(&[1.0, -1.0]), Err(Error::NonPositiveWeight { row: 1 })));
    }

    #[test]
    fn intercept_only_weighted_matches_closed_form_and_bisection() {
        let (c, s) = intercept_pair(100, vec![3.0; 300]);
        let fit = fit_pseudo_mle(&c, &s, &FitConfig::default()).unwrap();
        let expected = (100.0_f64 / 900.0).ln();
        assert!((fit.beta[0] - expected).abs() < 1e-10);
        assert!((fit.beta[0] - bisect_intercept(100.0, 900.0)).abs() < 1e-9);
        assert!((fit.beta[0] - (-2.19722)).abs() < 1e-5);
        assert!(fit.converged);
        let (pi, capped) = participation_rates(&fit, &c.x).unwrap();
        assert_eq!(capped, 0);
        assert!(pi.iter().all(|p| (p - 1.0 / 9.0).abs() < 1e-12));
        let (qc, qs) = matching_scores(&fit);
        assert!(qc.iter().chain(&qs).all(|q| (q - expected).abs() < 1e-12));
    }

    #[test]
    fn intercept_only_scaled_undoes_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d: Vec<f64> = (0..300).map(|_| rng.random_range(1.0..5.0)).collect();
        let total: f64 = d.iter().sum();
        let d = d.into_iter().map(|w| w * 900.0 / total).collect();
        let (c, s) = intercept_pair(100, d);
        let cfg = FitConfig::default().with_mode(SurveyWeightMode::Scaled);
        let fit = fit_pseudo_mle(&c, &s, &cfg).unwrap();
        assert!((fit.beta[0] - (100.0_f64 / 300.0).ln()).abs() < 1e-10);
        assert!((fit.scale_a - 1.0 / 3.0).abs() < 1e-12);
        let (pi, _) = participation_rates(&fit, &c.x).unwrap();
        assert!(pi.iter().all(|p| (p - 1.0 / 9.0).abs() < 1e-10));
        let unscaled = fit_pseudo_mle(&c, &s, &FitConfig::default()).unwrap();
        assert!((fit.beta[0] - unscaled.beta[0] + fit.scale_a.ln()).abs() < 1e-10);
    }

    #[test]
    fn balanced_binary_covariate_has_zero_slope() {
        // 40% ones in the cohort, and 40% of survey weight on ones
        let xc: Vec<f64> = (0..50).map(|i| if i < 20 { 1.0 } else { 0.0 }).collect();
        let xs: Vec<f64> = (0..30).map(|i| if i < 10 { 1.0 } else { 0.0 }).collect();
        let d: Vec<f64> = (0..30).map(|i| if i < 10 { 12.0 } else { 9.0 }).collect();
        // weighted share of ones: 120 / (120 + 180) = 0.4
        let c = CohortSample::new(CovariateMatrix::with_intercept(&["b"], &[xc]).unwrap(), None).unwrap();
        let s = SurveySample::new(CovariateMatrix::with_intercept(&["b"], &[xs]).unwrap(), d, DesignInfo::poisson(30)).unwrap();
        let lik = PseudoLikelihood { cohort: &c.x, survey: &s.x, omega: &s.d, p_clip: 1e-8 };
        let b0 = logit(50.0 / 350.0);
        let sc = lik.score(&[b0, 0.0]);
        assert!(sc.iter().all(|v| v.abs() < 1e-10), "{sc:?}");
        let fit = fit_pseudo_mle(&c, &s, &FitConfig::default()).unwrap();
        assert!(fit.beta[1].abs() < 1e-10);
        assert!((fit.beta[0] - (50.0_f64 / 300.0).ln()).abs() < 1e-10);
    }

    fn random_pair(rng: &mut ChaCha8Rng, n_c: usize, n_s: usize) -> (CohortSample, SurveySample) {
        let mut col = |n: usize, shift: f64| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>() * 2.0 + shift).collect() };
        let c1 = col(n_c, 0.5);
        let c2 = col(n_c, 0.0);
        let s1 = col(n_s, 0.0);
        let s2 = col(n_s, 0.2);
        let d: Vec<f64> = (0..n_s).map(|i| 5.0 + (i % 7) as f64 * 10.0).collect();
        let c = CohortSample::new(CovariateMatrix::with_intercept(&["a", "b"], &[c1, c2]).unwrap(), None).unwrap();
        let s = SurveySample::new(CovariateMatrix::with_intercept(&["a", "b"], &[s1, s2]).unwrap(), d, DesignInfo::poisson(n_s)).unwrap();
        (c, s)
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, s) = random_pair(&mut rng, 60, 40);
        let lik = PseudoLikelihood { cohort: &c.x, survey: &s.x, omega: &s.d, p_clip: 1e-8 };
        for _ in 0..5 {
            let beta: Vec<f64> = vec![rng.random_range(-4.0..-1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let g = lik.score(&beta);
            for j in 0..3 {
                let h = 1e-5;
                let mut bp = beta.clone();
                let mut bm = beta.clone();
                bp[j] += h;
                bm[j] -= h;
                let fd = (lik.value(&bp) - lik.value(&bm)) / (2.0 * h);
                let rel = (fd - g[j]).abs() / g[j].abs().max(1.0);
                assert!(rel < 1e-6, "component {j}: analytic {} vs fd {fd}", g[j]);
            }
        }
    }

    #[test]
    fn newton_ascends_monotonically_and_meets_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (c, s) = random_pair(&mut rng, 80, 60);
            for mode in [SurveyWeightMode::Unweighted, SurveyWeightMode::Weighted, SurveyWeightMode::Scaled] {
                let mut trace = Vec::new();
                let fit = fit_traced(&c, &s, &FitConfig::default().with_mode(mode), |ll| trace.push(ll)).unwrap();
                assert!(fit.converged);
                assert!(fit.score_norm <= 1e-10);
                assert!(trace.windows(2).all(|w| w[1] >= w[0]), "{trace:?}");
                for (p, q) in fit.p_cohort.iter().zip(&fit.q_cohort) {
                    assert!((p - expit(*q)).abs() <= 1e-12 && *p > 0.0 && *p < 1.0);
                }
            }
        }
    }

    #[test]
    fn collinear_columns_are_named() {
        let xc: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.05).collect();
        let c = CohortSample::new(CovariateMatrix::with_intercept(&["a", "a2"], &[xc.clone(), xc.iter().map(|v| 2.0 * v).collect()]).unwrap(), None).unwrap();
        let s = SurveySample::new(
            CovariateMatrix::with_intercept(&["a", "a2"], &[xs.clone(), xs.iter().map(|v| 2.0 * v).collect()]).unwrap(),
            vec![2.0; 20],
            DesignInfo::poisson(20),
        )
        .unwrap();
        match fit_pseudo_mle(&c, &s, &FitConfig::default()) {
            Err(Error::SingularHessian { columns }) => assert_eq!(columns, vec!["a2".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, s) = random_pair(&mut rng, 50, 50);
        let cfg = FitConfig { max_iterations: 1, score_tolerance: 1e-14, ..FitConfig::default() };
        let fit = fit_pseudo_mle(&c, &s, &cfg).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 1);
        assert!(!fit.warnings.is_empty());
    }

    #[test]
    fn participation_rates_guard_and_cap() {
        let (c, s) = intercept_pair(10, vec![1.0; 10]);
        let unweighted = fit_pseudo_mle(&c, &s, &FitConfig::default().with_mode(SurveyWeightMode::Unweighted)).unwrap();
        assert!(participation_rates(&unweighted, &c.x).is_err());
        let mut fit = fit_pseudo_mle(&c, &s, &FitConfig::default()).unwrap();
        fit.beta = vec![0.0];
        let (pi, capped) = participation_rates(&fit, &c.x).unwrap();
        assert!(pi.iter().all(|&p| p == 1.0));
        assert_eq!(capped, 0);
        fit.beta = vec![0.5];
        let (pi, capped) = participation_rates(&fit, &c.x).unwrap();
        assert!(pi.iter().all(|&p| p == 1.0));
        assert_eq!(capped, 10);
        assert_eq!(c.x.names()[0], INTERCEPT);
    }

    #[test]
    fn matching_scores_shift_with_intercept() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (c, s) = random_pair(&mut rng, 30, 30);
        let mut fit = fit_pseudo_mle(&c, &s, &FitConfig::default()).unwrap();
        let (q0, _) = matching_scores(&fit);
        fit.beta[0] += 1.5;
        fit.q_cohort = c.x.mul_vec(&fit.beta);
        let (q1, _) = matching_scores(&fit);
        assert!(q0.iter().zip(&q1).all(|(a, b)| (b - a - 1.5).abs() < 1e-12));
    }
}
