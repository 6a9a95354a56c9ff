//! Pseudo-weight construction: inverse participation-rate weights
//! (IPSW, IPSW.S) and kernel-matching weights (KW, KW.W, KW.S).

mod bandwidth;
mod kernel;
mod kw;

use serde::{Deserialize, Serialize};

pub use bandwidth::{silverman_bandwidth, BandwidthRule};
pub use kernel::{kernel_eval, KernelKind};
pub use kw::{kw_jacobian, kw_weights, kw_weights_with_jacobian};

use crate::data::{CohortSample, Method, PropensityFit, PseudoWeightSet, SurveySample, WeightJacobian};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::propensity::{fit_pseudo_mle, participation_rates, FitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: BandwidthRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    /// Fit settings; the survey-weight mode is overridden by the method.
    pub fit: FitConfig,
    pub kernel: KernelSpec,
    /// Compute `dw/dbeta` (needed for linearization variance).
    pub jacobian: bool,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self { fit: FitConfig::default(), kernel: KernelSpec::default(), jacobian: true, exec: Execution::default() }
    }
}

/// `w_i = 1 / pi_i`.
pub fn ipsw_weights(method: Method, pi: &[f64]) -> Result<PseudoWeightSet> {
    if let Some(i) = pi.iter().position(|p| !(*p > 0.0 && *p <= 1.0)) {
        return Err(Error::InvalidArgument(format!("participation rate {} at row {i} is outside (0, 1]", pi[i])));
    }
    Ok(PseudoWeightSet {
        method,
        w: pi.iter().map(|p| 1.0 / p).collect(),
        kernel: None,
        bandwidth: None,
        jac: None,
        fallback_count: 0,
        warnings: Vec::new(),
    })
}

/// Builds the method's pseudo-weights from an existing fit of the matching mode.
pub fn weights_from_fit(
    method: Method,
    fit: &PropensityFit,
    cohort: &CohortSample,
    survey: &SurveySample,
    cfg: &WeightConfig,
) -> Result<PseudoWeightSet> {
    if fit.mode != method.fit_mode() {
        return Err(Error::InvalidArgument(format!(
            "{method} needs a {:?} fit, got {:?}",
            method.fit_mode(),
            fit.mode
        )));
    }
    if method.is_kernel() {
        let (qc, qs) = crate::propensity::matching_scores(fit);
        let h = cfg.kernel.bandwidth.select(&qc, &qs)?;
        // every kernel variant distributes the unscaled survey weights
        if cfg.jacobian {
            kw_weights_with_jacobian(method, &qc, &qs, &cohort.x, &survey.x, &survey.d, cfg.kernel.kind, h, cfg.exec)
        } else {
            kw_weights(method, &qc, &qs, &survey.d, cfg.kernel.kind, h, cfg.exec)
        }
    } else {
        let (pi, capped) = participation_rates(fit, &cohort.x)?;
        let mut set = ipsw_weights(method, &pi)?;
        if capped > 0 {
            set.warnings.push(format!("{capped} participation rates capped at 1"));
        }
        if cfg.jacobian {
            // d/dbeta exp(-beta'x) / a = -w x; capped units are locally constant
            let k = cohort.x.ncols();
            let mut jac = WeightJacobian::zeros(cohort.len(), k);
            for i in 0..cohort.len() {
                if pi[i] < 1.0 {
                    let w = set.w[i];
                    for (dst, x) in jac.row_mut(i).iter_mut().zip(cohort.x.row(i)) {
                        *dst = -w * x;
                    }
                }
            }
            set.jac = Some(jac);
        }
        Ok(set)
    }
}

/// Fits the propensity model the method prescribes and builds its weights.
pub fn compute_pseudoweights(
    method: Method,
    cohort: &CohortSample,
    survey: &SurveySample,
    cfg: &WeightConfig,
) -> Result<(PropensityFit, PseudoWeightSet)> {
    let fit = fit_pseudo_mle(cohort, survey, &cfg.fit.with_mode(method.fit_mode()))?;
    let mut set = weights_from_fit(method, &fit, cohort, survey, cfg)?;
    set.warnings.splice(0..0, fit.warnings.iter().cloned());
    Ok((fit, set))
}

/// As [`compute_pseudoweights`], with the method given by name.
pub fn compute_pseudoweights_named(
    method: &str,
    cohort: &CohortSample,
    survey: &SurveySample,
    cfg: &WeightConfig,
) -> Result<(PropensityFit, PseudoWeightSet)> {
    compute_pseudoweights(method.parse()?, cohort, survey, cfg)
}
