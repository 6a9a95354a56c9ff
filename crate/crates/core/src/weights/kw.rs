//! Kernel-weighting pseudo-weights.
//!
//! Each survey unit `j` spreads its weight `omega_j` over the cohort in
//! proportion to `K((q_i - q_j) / h)`. Both samples are sorted by matching
//! score so only pairs inside the kernel support are visited; the Gaussian
//! support radius is the point where its density underflows, so windowing
//! never changes a result. Every sum runs in a fixed order per output
//! element, which makes results independent of the execution policy.

use super::KernelKind;
use crate::data::{CovariateMatrix, Method, PseudoWeightSet, WeightJacobian};
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;
use crate::par::{map_range, Execution};

struct Sorted {
    q: Vec<f64>,
    idx: Vec<usize>,
}

impl Sorted {
    fn new(q: &[f64]) -> Self {
        let mut idx: Vec<usize> = (0..q.len()).collect();
        idx.sort_by(|&a, &b| q[a].total_cmp(&q[b]).then(a.cmp(&b)));
        Self { q: idx.iter().map(|&i| q[i]).collect(), idx }
    }

    /// Positions whose score lies within `radius` of `center`.
    #[inline]
    fn window(&self, center: f64, radius: f64) -> std::ops::Range<usize> {
        let lo = self.q.partition_point(|&v| v < center - radius);
        let hi = self.q.partition_point(|&v| v <= center + radius);
        lo..hi.max(lo)
    }
}

/// Per-survey-unit kernel column sums and fallback assignments.
struct Columns<'a> {
    q_cohort: &'a [f64],
    q_survey: &'a [f64],
    omega: &'a [f64],
    kind: KernelKind,
    h: f64,
    radius: f64,
    cohort: Sorted,
    survey: Sorted,
    /// `S_j`, original survey order.
    col_sum: Vec<f64>,
    /// Nearest cohort unit for survey units with an empty column.
    fallback: Vec<Option<usize>>,
}

fn check(q_cohort: &[f64], q_survey: &[f64], omega: &[f64], h: f64) -> Result<()> {
    if q_cohort.is_empty() {
        return Err(Error::Empty("kernel weighting needs at least one cohort unit"));
    }
    if q_survey.len() != omega.len() {
        return Err(Error::DimensionMismatch(format!("{} survey scores but {} weights", q_survey.len(), omega.len())));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}")));
    }
    if q_cohort.iter().chain(q_survey).any(|q| !q.is_finite()) {
        return Err(Error::InvalidArgument("non-finite matching score".into()));
    }
    if omega.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument("survey weights must be finite and nonnegative".into()));
    }
    Ok(())
}

impl<'a> Columns<'a> {
    fn build(q_cohort: &'a [f64], q_survey: &'a [f64], omega: &'a [f64], kind: KernelKind, h: f64, exec: Execution) -> Result<Self> {
        check(q_cohort, q_survey, omega, h)?;
        let cohort = Sorted::new(q_cohort);
        let survey = Sorted::new(q_survey);
        // slightly widened so boundary pairs are seen from both sides
        let radius = kind.support_radius() * h * (1.0 + 1e-9);
        let col_sum = map_range(exec, q_survey.len(), |j| {
            let qj = q_survey[j];
            let mut s = CompensatedSum::new();
            for &qi in &cohort.q[cohort.window(qj, radius)] {
                s.add(kind.density((qi - qj) / h));
            }
            s.value()
        });
        let fallback = col_sum
            .iter()
            .enumerate()
            .map(|(j, &s)| {
                if s > 0.0 {
                    None
                } else {
                    let qj = q_survey[j];
                    let mut best = 0;
                    for (i, &qi) in q_cohort.iter().enumerate() {
                        if (qi - qj).abs() < (q_cohort[best] - qj).abs() {
                            best = i;
                        }
                    }
                    Some(best)
                }
            })
            .collect();
        Ok(Self { q_cohort, q_survey, omega, kind, h, radius, cohort, survey, col_sum, fallback })
    }

    fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|f| f.is_some()).count()
    }

    fn weights(&self, exec: Execution) -> Vec<f64> {
        // omega_j / S_j in survey-sorted order; zero for fallback columns
        let coef: Vec<f64> = self
            .survey
            .idx
            .iter()
            .map(|&j| if self.fallback[j].is_some() { 0.0 } else { self.omega[j] / self.col_sum[j] })
            .collect();
        let mut fallback_mass = vec![CompensatedSum::new(); self.q_cohort.len()];
        for (j, f) in self.fallback.iter().enumerate() {
            if let Some(i) = f {
                fallback_mass[*i].add(self.omega[j]);
            }
        }
        map_range(exec, self.q_cohort.len(), |i| {
            let qi = self.q_cohort[i];
            let mut s = fallback_mass[i];
            let win = self.survey.window(qi, self.radius);
            for (pos, &qj) in win.clone().zip(&self.survey.q[win]) {
                if coef[pos] != 0.0 {
                    s.add(coef[pos] * self.kind.density((qi - qj) / self.h));
                }
            }
            s.value()
        })
    }

    fn jacobian(&self, x_cohort: &CovariateMatrix, x_survey: &CovariateMatrix, exec: Execution) -> WeightJacobian {
        let k = x_cohort.ncols();
        let (kind, h) = (self.kind, self.h);
        // T_j / S_j with T_j = sum_l K'((q_l - q_j)/h) (x_l - x_j) / h, original
        // survey order. Dividing here rather than by S_j^2 later keeps far
        // gaussian columns (S_j near 1e-160) out of the subnormal range.
        let t_cols: Vec<Vec<f64>> = map_range(exec, self.q_survey.len(), |j| {
            let mut acc = vec![CompensatedSum::new(); k];
            if self.fallback[j].is_some() {
                return vec![0.0; k];
            }
            let qj = self.q_survey[j];
            let xj = x_survey.row(j);
            let win = self.cohort.window(qj, self.radius);
            for pos in win {
                let l = self.cohort.idx[pos];
                let kd = kind.derivative((self.cohort.q[pos] - qj) / h) / h;
                if kd != 0.0 {
                    for (a, (xl, xjj)) in acc.iter_mut().zip(x_cohort.row(l).iter().zip(xj)) {
                        a.add(kd * (xl - xjj));
                    }
                }
            }
            let s = self.col_sum[j];
            acc.iter().map(|a| a.value() / s).collect()
        });

        let rows: Vec<Vec<f64>> = map_range(exec, self.q_cohort.len(), |i| {
            let qi = self.q_cohort[i];
            let xi = x_cohort.row(i);
            let mut a_sum = CompensatedSum::new();
            let mut ax = vec![CompensatedSum::new(); k];
            let mut bt = vec![CompensatedSum::new(); k];
            let win = self.survey.window(qi, self.radius);
            for pos in win {
                let j = self.survey.idx[pos];
                if self.fallback[j].is_some() {
                    continue;
                }
                let u = (qi - self.survey.q[pos]) / h;
                let s = self.col_sum[j];
                let a = self.omega[j] * kind.derivative(u) / s;
                let b = self.omega[j] * (kind.density(u) / s);
                if a != 0.0 {
                    a_sum.add(a);
                    for (acc, xj) in ax.iter_mut().zip(x_survey.row(j)) {
                        acc.add(a * xj);
                    }
                }
                if b != 0.0 {
                    for (acc, tj) in bt.iter_mut().zip(&t_cols[j]) {
                        acc.add(b * tj);
                    }
                }
            }
            let a_sum = a_sum.value();
            (0..k).map(|c| (xi[c] * a_sum - ax[c].value()) / h - bt[c].value()).collect()
        });
        let mut jac = WeightJacobian::zeros(self.q_cohort.len(), k);
        for (i, r) in rows.into_iter().enumerate() {
            jac.row_mut(i).copy_from_slice(&r);
        }
        jac
    }
}

/// Kernel-weighting pseudo-weights. Survey units with an empty kernel column
/// send their whole weight to the nearest cohort unit (ties to the lower
/// index), so `sum(w) == sum(omega)` always holds.
pub fn kw_weights(
    method: Method,
    q_cohort: &[f64],
    q_survey: &[f64],
    omega: &[f64],
    kind: KernelKind,
    h: f64,
    exec: Execution,
) -> Result<PseudoWeightSet> {
    let cols = Columns::build(q_cohort, q_survey, omega, kind, h, exec)?;
    Ok(assemble(method, &cols, cols.weights(exec), None, kind, h))
}

/// Pseudo-weights together with `dw/dbeta`, sharing one pass over the columns.
#[allow(clippy::too_many_arguments)]
pub fn kw_weights_with_jacobian(
    method: Method,
    q_cohort: &[f64],
    q_survey: &[f64],
    x_cohort: &CovariateMatrix,
    x_survey: &CovariateMatrix,
    omega: &[f64],
    kind: KernelKind,
    h: f64,
    exec: Execution,
) -> Result<PseudoWeightSet> {
    check_x(q_cohort, q_survey, x_cohort, x_survey)?;
    let cols = Columns::build(q_cohort, q_survey, omega, kind, h, exec)?;
    let jac = cols.jacobian(x_cohort, x_survey, exec);
    Ok(assemble(method, &cols, cols.weights(exec), Some(jac), kind, h))
}

/// Analytic Jacobian of the kernel weights with respect to the propensity
/// coefficients, for matching scores `q = X beta`.
#[allow(clippy::too_many_arguments)]
pub fn kw_jacobian(
    q_cohort: &[f64],
    q_survey: &[f64],
    x_cohort: &CovariateMatrix,
    x_survey: &CovariateMatrix,
    omega: &[f64],
    kind: KernelKind,
    h: f64,
    exec: Execution,
) -> Result<WeightJacobian> {
    check_x(q_cohort, q_survey, x_cohort, x_survey)?;
    let cols = Columns::build(q_cohort, q_survey, omega, kind, h, exec)?;
    Ok(cols.jacobian(x_cohort, x_survey, exec))
}

fn check_x(q_cohort: &[f64], q_survey: &[f64], x_cohort: &CovariateMatrix, x_survey: &CovariateMatrix) -> Result<()> {
    if x_cohort.nrows() != q_cohort.len() || x_survey.nrows() != q_survey.len() || x_cohort.ncols() != x_survey.ncols() {
        return Err(Error::DimensionMismatch("covariate matrices do not match the matching scores".into()));
    }
    Ok(())
}

fn assemble(method: Method, cols: &Columns<'_>, w: Vec<f64>, jac: Option<WeightJacobian>, kind: KernelKind, h: f64) -> PseudoWeightSet {
    let fallback_count = cols.fallback_count();
    let mut warnings = Vec::new();
    if fallback_count > 0 {
        warnings.push(format!("{fallback_count} survey units had no cohort unit within the kernel support; their weight went to the nearest cohort unit"));
        log::debug!("{fallback_count} empty kernel columns");
    }
    PseudoWeightSet { method, w, kernel: Some(kind), bandwidth: Some(h), jac, fallback_count, warnings }
}
