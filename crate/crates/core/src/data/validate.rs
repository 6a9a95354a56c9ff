use std::collections::{BTreeMap, BTreeSet};

use super::{CohortSample, DesignKind, SurveySample};
use crate::error::{Error, Result, Violation};

fn v(sample: &'static str, row: Option<usize>, column: Option<&str>, message: impl Into<String>) -> Violation {
    Violation { sample, row, column: column.map(str::to_string), message: message.into() }
}

/// Checks that a cohort/survey pair is ready for fitting. Returns every
/// violation found, not only the first.
pub fn validate_inputs(cohort: &CohortSample, survey: &SurveySample) -> Result<()> {
    let mut out = Vec::new();

    let (kc, ks) = (cohort.x.ncols(), survey.x.ncols());
    if kc != ks {
        out.push(v(
            "input",
            None,
            None,
            format!("dimension mismatch: cohort has {kc} columns, survey has {ks}"),
        ));
    } else if cohort.x.names() != survey.x.names() {
        for (a, b) in cohort.x.names().iter().zip(survey.x.names()) {
            if a != b {
                out.push(v("input", None, Some(a), format!("column name mismatch: cohort `{a}` vs survey `{b}`")));
            }
        }
    }

    out.extend(cohort.x.violations("cohort"));
    out.extend(survey.x.violations("survey"));

    if cohort.ids.len() != cohort.len() {
        out.push(v("cohort", None, None, "dimension mismatch: ids and covariate rows differ"));
    }
    if let Some(y) = &cohort.y {
        if y.len() != cohort.len() {
            out.push(v("cohort", None, None, format!("dimension mismatch: {} outcomes for {} rows", y.len(), cohort.len())));
        }
        for (i, yi) in y.iter().enumerate() {
            if !yi.is_finite() {
                out.push(v("cohort", Some(i), Some("__outcome"), "non-finite value"));
            }
        }
    }

    let n_s = survey.len();
    if survey.d.len() != n_s || survey.design.len() != n_s || survey.ids.len() != n_s {
        out.push(v(
            "survey",
            None,
            None,
            format!(
                "dimension mismatch: {} rows, {} weights, {} design records, {} ids",
                n_s,
                survey.d.len(),
                survey.design.len(),
                survey.ids.len()
            ),
        ));
    }
    for (i, &d) in survey.d.iter().enumerate() {
        if !d.is_finite() {
            out.push(v("survey", Some(i), Some("__weight"), "non-finite value"));
        } else if d <= 0.0 {
            out.push(v("survey", Some(i), Some("__weight"), format!("nonpositive weight at row {i}")));
        }
    }
    if survey.design.strata.len() == survey.design.psu.len() {
        out.extend(design_violations(survey));
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(out))
    }
}

fn design_violations(survey: &SurveySample) -> Vec<Violation> {
    let mut out = Vec::new();
    let design = &survey.design;
    let mut psu_stratum: BTreeMap<i64, i64> = BTreeMap::new();
    for (i, (&h, &g)) in design.strata.iter().zip(&design.psu).enumerate() {
        match psu_stratum.get(&g) {
            Some(&prev) if prev != h => out.push(v(
                "survey",
                Some(i),
                Some("__psu"),
                format!("PSU {g} appears in strata {prev} and {h}"),
            )),
            Some(_) => {}
            None => {
                psu_stratum.insert(g, h);
            }
        }
    }
    match design.kind {
        DesignKind::StratifiedWrPsu => {
            let mut per_stratum: BTreeMap<i64, BTreeSet<i64>> = BTreeMap::new();
            for (&h, &g) in design.strata.iter().zip(&design.psu) {
                per_stratum.entry(h).or_default().insert(g);
            }
            for (h, psus) in per_stratum {
                if psus.len() < 2 {
                    out.push(v("survey", None, Some("__stratum"), format!("stratum {h} has a single PSU; collapse strata first")));
                }
            }
        }
        DesignKind::Srs { sampling_fraction } => {
            if !(0.0..1.0).contains(&sampling_fraction) {
                out.push(v("survey", None, None, format!("sampling fraction {sampling_fraction} outside [0, 1)")));
            }
        }
        DesignKind::Poisson => {}
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateMatrix, DesignInfo, INTERCEPT};

    fn matrix(k: usize, n: usize) -> CovariateMatrix {
        let mut names = vec![INTERCEPT.to_string()];
        names.extend((1..k).map(|j| format!("x{j}")));
        let values = (0..n).flat_map(|i| (0..k).map(move |j| if j == 0 { 1.0 } else { (i * j) as f64 * 0.1 })).collect();
        CovariateMatrix::new(names, n, values).unwrap()
    }

    fn survey(k: usize, d: Vec<f64>) -> SurveySample {
        let n = d.len();
        SurveySample { x: matrix(k, n), d, design: DesignInfo::poisson(n), ids: (0..n).map(|i| i.to_string()).collect() }
    }

    #[test]
    fn well_formed_pair_passes() {
        let c = CohortSample::new(matrix(3, 5), None).unwrap();
        let s = survey(3, vec![1.0, 2.0, 3.0]);
        assert!(validate_inputs(&c, &s).is_ok());
        // idempotent
        assert!(validate_inputs(&c, &s).is_ok());
    }

    #[test]
    fn zero_weight_is_named() {
        let c = CohortSample::new(matrix(3, 5), None).unwrap();
        let s = survey(3, vec![1.0, 0.0, 3.0]);
        let err = validate_inputs(&c, &s).unwrap_err().to_string();
        assert!(err.contains("nonpositive weight at row 1"), "{err}");
    }

    #[test]
    fn column_count_mismatch() {
        let c = CohortSample::new(matrix(3, 5), None).unwrap();
        let s = survey(4, vec![1.0, 2.0]);
        let err = validate_inputs(&c, &s).unwrap_err().to_string();
        assert!(err.contains("dimension mismatch"), "{err}");
    }

    #[test]
    fn non_finite_and_missing_intercept_reported_together() {
        let names = vec![INTERCEPT.to_string(), "x1".to_string()];
        let x = CovariateMatrix::from_raw(names, 2, vec![1.0, f64::INFINITY, 0.5, 1.0]).unwrap();
        let c = CohortSample { x, y: None, ids: vec!["a".into(), "b".into()] };
        let s = survey(2, vec![1.0, 2.0]);
        match validate_inputs(&c, &s) {
            Err(Error::Validation(list)) => {
                assert_eq!(list.len(), 2);
                assert_eq!(list[0].row, Some(0));
                assert_eq!(list[1].row, Some(1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_psu_stratum_rejected() {
        let c = CohortSample::new(matrix(2, 4), None).unwrap();
        let mut s = survey(2, vec![1.0, 2.0, 3.0, 4.0]);
        s.design = DesignInfo::stratified(vec![1, 1, 2, 2], vec![10, 11, 20, 20]);
        let err = validate_inputs(&c, &s).unwrap_err().to_string();
        assert!(err.contains("stratum 2 has a single PSU"), "{err}");
        s.design = DesignInfo::stratified(vec![1, 1, 2, 2], vec![10, 11, 10, 21]);
        let err = validate_inputs(&c, &s).unwrap_err().to_string();
        assert!(err.contains("PSU 10 appears in strata 1 and 2"), "{err}");
    }
}
