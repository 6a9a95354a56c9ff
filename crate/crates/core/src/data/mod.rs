//! Shared sample, fit and result types.

mod csv_io;
mod validate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propensity::SurveyWeightMode;
use crate::weights::KernelKind;

pub use csv_io::{load_pair, read_table, ModelSpec, RawTable, Term, RESERVED_COLUMNS};
pub use validate::validate_inputs;

pub const INTERCEPT: &str = "(Intercept)";

/// Row-major covariate matrix. Column 0 is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix {
    names: Vec<String>,
    nrows: usize,
    ncols: usize,
    values: Vec<f64>,
}

impl CovariateMatrix {
    /// Builds a matrix from row-major values, checking every invariant.
    pub fn new(names: Vec<String>, nrows: usize, values: Vec<f64>) -> Result<Self> {
        let m = Self::from_raw(names, nrows, values)?;
        for (i, row) in m.rows().enumerate() {
            if let Some(column) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: i, column });
            }
        }
        let problems = m.violations("matrix");
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(m)
    }

    /// Builds a matrix checking only the shape. Content invariants are left to
    /// [`validate_inputs`].
    pub fn from_raw(names: Vec<String>, nrows: usize, values: Vec<f64>) -> Result<Self> {
        let ncols = names.len();
        if nrows == 0 || ncols == 0 {
            return Err(Error::Empty("covariate matrix needs at least one row and one column"));
        }
        if values.len() != nrows * ncols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {nrows} x {ncols} matrix",
                values.len()
            )));
        }
        Ok(Self { names, nrows, ncols, values })
    }

    /// Prepends an intercept to the given covariate columns.
    pub fn with_intercept(names: &[&str], columns: &[Vec<f64>]) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::DimensionMismatch("one name per column required".into()));
        }
        let nrows = match columns.first() {
            Some(c) => c.len(),
            None => return Err(Error::InvalidArgument("intercept-only matrices need a row count; use intercept_only".into())),
        };
        if columns.iter().any(|c| c.len() != nrows) {
            return Err(Error::DimensionMismatch("covariate columns differ in length".into()));
        }
        let mut all = vec![INTERCEPT.to_string()];
        all.extend(names.iter().map(|s| s.to_string()));
        let k = all.len();
        let mut values = Vec::with_capacity(nrows * k);
        for i in 0..nrows {
            values.push(1.0);
            values.extend(columns.iter().map(|c| c[i]));
        }
        Self::new(all, nrows, values)
    }

    pub fn intercept_only(nrows: usize) -> Result<Self> {
        Self::new(vec![INTERCEPT.to_string()], nrows, vec![1.0; nrows])
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.ncols..(i + 1) * self.ncols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ncols + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.nrows).map(|i| self.get(i, j)).collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.ncols)
    }

    /// Linear predictor `X beta`.
    pub fn mul_vec(&self, beta: &[f64]) -> Vec<f64> {
        self.rows().map(|r| crate::numeric::dot(r, beta)).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut values = Vec::with_capacity(idx.len() * self.ncols);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Self { names: self.names.clone(), nrows: idx.len(), ncols: self.ncols, values }
    }

    pub(crate) fn violations(&self, sample: &'static str) -> Vec<crate::error::Violation> {
        use crate::error::Violation;
        let mut out = Vec::new();
        for (i, row) in self.rows().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    out.push(Violation {
                        sample,
                        row: Some(i),
                        column: Some(self.names[j].clone()),
                        message: "non-finite value".into(),
                    });
                }
            }
            if row[0] != 1.0 {
                out.push(Violation {
                    sample,
                    row: Some(i),
                    column: Some(self.names[0].clone()),
                    message: "intercept column must be identically 1".into(),
                });
            }
        }
        out
    }
}

/// Survey design identifiers used by design-based variance estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DesignKind {
    Poisson,
    StratifiedWrPsu,
    Srs { sampling_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignInfo {
    pub strata: Vec<i64>,
    pub psu: Vec<i64>,
    pub kind: DesignKind,
}

impl DesignInfo {
    pub fn poisson(n: usize) -> Self {
        Self { strata: vec![0; n], psu: (0..n as i64).collect(), kind: DesignKind::Poisson }
    }

    pub fn srs(n: usize, sampling_fraction: f64) -> Self {
        Self { strata: vec![0; n], psu: (0..n as i64).collect(), kind: DesignKind::Srs { sampling_fraction } }
    }

    pub fn stratified(strata: Vec<i64>, psu: Vec<i64>) -> Self {
        Self { strata, psu, kind: DesignKind::StratifiedWrPsu }
    }

    pub fn len(&self) -> usize {
        self.strata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strata.is_empty()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            strata: idx.iter().map(|&i| self.strata[i]).collect(),
            psu: idx.iter().map(|&i| self.psu[i]).collect(),
            kind: self.kind,
        }
    }
}

/// The non-probability cohort. It has no weights of its own.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSample {
    pub x: CovariateMatrix,
    pub y: Option<Vec<f64>>,
    pub ids: Vec<String>,
}

impl CohortSample {
    pub fn new(x: CovariateMatrix, y: Option<Vec<f64>>) -> Result<Self> {
        if let Some(y) = &y {
            if y.len() != x.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "cohort has {} rows but {} outcomes",
                    x.nrows(),
                    y.len()
                )));
            }
        }
        let ids = (1..=x.nrows()).map(|i| i.to_string()).collect();
        Ok(Self { x, y, ids })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: self.y.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect()),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }
}

/// The reference probability survey with base weights `d = 1/pi`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveySample {
    pub x: CovariateMatrix,
    pub d: Vec<f64>,
    pub design: DesignInfo,
    pub ids: Vec<String>,
}

impl SurveySample {
    pub fn new(x: CovariateMatrix, d: Vec<f64>, design: DesignInfo) -> Result<Self> {
        if d.len() != x.nrows() || design.len() != x.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "survey has {} rows, {} weights and {} design records",
                x.nrows(),
                d.len(),
                design.len()
            )));
        }
        if let Some(row) = d.iter().position(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::NonPositiveWeight { row });
        }
        let ids = (1..=x.nrows()).map(|i| i.to_string()).collect();
        Ok(Self { x, d, design, ids })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Subset of units with every remaining weight multiplied by `weight_factor`.
    pub fn select_rows(&self, idx: &[usize], weight_factor: f64) -> Self {
        Self {
            x: self.x.select_rows(idx),
            d: idx.iter().map(|&i| self.d[i] * weight_factor).collect(),
            design: self.design.select_rows(idx),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    pub fn weight_total(&self) -> f64 {
        crate::numeric::csum(self.d.iter().copied())
    }
}

/// The five pseudo-weighting methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "IPSW")]
    Ipsw,
    #[serde(rename = "IPSW.S")]
    IpswS,
    #[serde(rename = "KW")]
    Kw,
    #[serde(rename = "KW.W")]
    KwW,
    #[serde(rename = "KW.S")]
    KwS,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ipsw, Method::IpswS, Method::Kw, Method::KwW, Method::KwS];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ipsw => "IPSW",
            Method::IpswS => "IPSW.S",
            Method::Kw => "KW",
            Method::KwW => "KW.W",
            Method::KwS => "KW.S",
        }
    }

    /// Which survey weights enter the propensity fit.
    pub fn fit_mode(self) -> SurveyWeightMode {
        match self {
            Method::Kw => SurveyWeightMode::Unweighted,
            Method::Ipsw | Method::KwW => SurveyWeightMode::Weighted,
            Method::IpswS | Method::KwS => SurveyWeightMode::Scaled,
        }
    }

    pub fn is_kernel(self) -> bool {
        matches!(self, Method::Kw | Method::KwW | Method::KwS)
    }

    /// The scaled counterpart (IPSW -> IPSW.S, KW.W -> KW.S); others unchanged.
    pub fn scaled(self) -> Method {
        match self {
            Method::Ipsw => Method::IpswS,
            Method::KwW => Method::KwS,
            m => m,
        }
    }

    /// The unscaled counterpart (IPSW.S -> IPSW, KW.S -> KW.W); others unchanged.
    pub fn unscaled(self) -> Method {
        match self {
            Method::IpswS => Method::Ipsw,
            Method::KwS => Method::KwW,
            m => m,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownMethod { name: s.to_string() })
    }
}

/// Result of a pseudo maximum-likelihood propensity fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropensityFit {
    pub beta: Vec<f64>,
    pub scale_a: f64,
    pub weighted: bool,
    pub mode: SurveyWeightMode,
    pub p_cohort: Vec<f64>,
    pub p_survey: Vec<f64>,
    pub q_cohort: Vec<f64>,
    pub q_survey: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `max |score| / n_c` at the returned coefficients.
    pub score_norm: f64,
    pub log_likelihood: f64,
    pub warnings: Vec<String>,
}

/// Cohort-unit Jacobian of the pseudo-weights with respect to beta (n_c x k, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightJacobian {
    pub nrows: usize,
    pub ncols: usize,
    pub values: Vec<f64>,
}

impl WeightJacobian {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, values: vec![0.0; nrows * ncols] }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.ncols..(i + 1) * self.ncols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.ncols)
            .map(|c| crate::numeric::csum((0..self.nrows).map(|r| self.values[r * self.ncols + c])))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoWeightSet {
    pub method: Method,
    pub w: Vec<f64>,
    pub kernel: Option<KernelKind>,
    pub bandwidth: Option<f64>,
    pub jac: Option<WeightJacobian>,
    /// Number of survey units whose kernel column was empty and went to the nearest cohort unit.
    pub fallback_count: usize,
    pub warnings: Vec<String>,
}

impl PseudoWeightSet {
    pub fn total(&self) -> f64 {
        crate::numeric::csum(self.w.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub mu_hat: f64,
    pub var_tl: f64,
    pub var_jk: Option<f64>,
    pub ci: (f64, f64),
    pub n_effective: f64,
    pub warnings: Vec<String>,
}

impl EstimateReport {
    pub fn ci_lo(&self) -> f64 {
        self.ci.0
    }

    pub fn ci_hi(&self) -> f64 {
        self.ci.1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        let err = "PSAS".parse::<Method>().unwrap_err().to_string();
        for m in Method::ALL {
            assert!(err.contains(m.as_str()));
        }
    }

    #[test]
    fn matrix_rejects_bad_intercept_and_nan() {
        let names = vec![INTERCEPT.to_string(), "x".to_string()];
        assert!(CovariateMatrix::new(names.clone(), 2, vec![1.0, 0.0, 2.0, 1.0]).is_err());
        match CovariateMatrix::new(names.clone(), 2, vec![1.0, 0.0, 1.0, f64::NAN]) {
            Err(Error::NonFinite { row: 1, column: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(CovariateMatrix::new(names, 2, vec![1.0, 0.5, 1.0, 3.0]).is_ok());
    }

    #[test]
    fn survey_rejects_zero_weight() {
        let x = CovariateMatrix::intercept_only(3).unwrap();
        match SurveySample::new(x, vec![1.0, 0.0, 2.0], DesignInfo::poisson(3)) {
            Err(e @ Error::NonPositiveWeight { row: 1 }) => {
                assert_eq!(e.to_string(), "nonpositive weight at row 1")
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
