use nalgebra::{DMatrix, DVector};

use super::design::design_variance;
use crate::data::{CohortSample, PropensityFit, PseudoWeightSet, SurveySample};
use crate::error::{Error, Result};
use crate::numeric::{csum, dot, CompensatedSum};
use crate::propensity::{mode_weights, participation_rates};

/// Pieces of the linearization variance.
#[derive(Debug, Clone)]
pub struct TlComponents {
    pub b_hat: Vec<f64>,
    /// `sum_s omega p x x'`
    pub a_hat: DMatrix<f64>,
    /// Design variance of the survey score total, divided by `N^2`.
    pub d_hat: DMatrix<f64>,
    pub term1: f64,
    pub term2: f64,
    pub variance: f64,
    pub warnings: Vec<String>,
}

/// Taylor-linearization variance of the Hájek mean `mu_hat` under the
/// pseudo-weights in `set`, accounting for estimation of the propensity
/// model that produced `fit`.
///
/// The plug-in forms for the sample sums are reconstructed: cohort sums carry
/// the implicit weight `1/pi`, survey sums carry `omega`.
pub fn tl_variance(
    cohort: &CohortSample,
    survey: &SurveySample,
    fit: &PropensityFit,
    set: &PseudoWeightSet,
    mu_hat: f64,
) -> Result<TlComponents> {
    let y = outcome(cohort)?;
    let resid: Vec<f64> = y.iter().map(|v| v - mu_hat).collect();
    let n_hat = csum(set.w.iter().copied());
    tl_core(cohort, survey, fit, set, &resid, n_hat)
}

pub(crate) fn outcome(cohort: &CohortSample) -> Result<&[f64]> {
    cohort.y.as_deref().ok_or_else(|| Error::InvalidArgument("cohort has no outcome column".into()))
}

/// Linearization variance of a ratio whose cohort residuals are `resid`
/// (zero outside a domain) and whose denominator is `n_hat`.
pub(crate) fn tl_core(
    cohort: &CohortSample,
    survey: &SurveySample,
    fit: &PropensityFit,
    set: &PseudoWeightSet,
    resid: &[f64],
    n_hat: f64,
) -> Result<TlComponents> {
    let n_c = cohort.len();
    let k = cohort.x.ncols();
    if set.w.len() != n_c || resid.len() != n_c || fit.p_cohort.len() != n_c || fit.p_survey.len() != survey.len() {
        return Err(Error::DimensionMismatch("weights, residuals and fit do not match the samples".into()));
    }
    if !(n_hat > 0.0) {
        return Err(Error::InvalidArgument("pseudo-weights sum to zero".into()));
    }
    let jac = set
        .jac
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("linearization variance needs the weight Jacobian".into()))?;
    let mut warnings = Vec::new();
    if !fit.converged {
        warnings.push("propensity fit did not converge; linearization variance is unreliable".to_string());
    }

    let pi: Vec<f64> = if fit.weighted {
        participation_rates(fit, &cohort.x)?.0
    } else {
        set.w.iter().map(|&w| if w > 1.0 { 1.0 / w } else { 1.0 }).collect()
    };
    let (omega, _) = mode_weights(&survey.d, fit.mode)?;

    let mut g = vec![CompensatedSum::new(); k];
    for i in 0..n_c {
        for (acc, dw) in g.iter_mut().zip(jac.row(i)) {
            acc.add(resid[i] * dw);
        }
    }
    let g = DVector::from_iterator(k, g.iter().map(CompensatedSum::value));

    let mut a_hat = DMatrix::<f64>::zeros(k, k);
    let mut z = Vec::with_capacity(survey.len());
    for (j, x) in survey.x.rows().enumerate() {
        let c = omega[j] * fit.p_survey[j];
        for r in 0..k {
            for s in r..k {
                a_hat[(r, s)] += c * x[r] * x[s];
            }
        }
        z.push(x.iter().map(|v| c * v).collect::<Vec<f64>>());
    }
    for r in 0..k {
        for s in 0..r {
            a_hat[(r, s)] = a_hat[(s, r)];
        }
    }
    let b_hat = match a_hat.clone().cholesky() {
        Some(ch) => ch.solve(&g),
        None => a_hat.clone().lu().solve(&g).ok_or(Error::Singular("survey score information"))?,
    };
    let b_hat: Vec<f64> = b_hat.iter().copied().collect();

    // cohort influence: w (y - mu) plus the score term carried through b,
    // since beta_hat - beta is approximately H^{-1} times the score
    let term1 = csum((0..n_c).map(|i| {
        let u = set.w[i] * resid[i] + (1.0 - fit.p_cohort[i]) * dot(&b_hat, cohort.x.row(i));
        (1.0 - pi[i]) * u * u
    })) / (n_hat * n_hat);

    let d_hat = design_variance(&z, &survey.d, &survey.design)? / (n_hat * n_hat);
    let b = DVector::from_column_slice(&b_hat);
    let term2 = (b.transpose() * &d_hat * &b)[(0, 0)];

    let mut variance = term1 + term2;
    if variance < 0.0 {
        warnings.push(format!("linearization variance {variance:e} floored at 0"));
        log::warn!("linearization variance {variance:e} floored at 0");
        variance = 0.0;
    }
    Ok(TlComponents { b_hat, a_hat, d_hat, term1, term2, variance, warnings })
}
