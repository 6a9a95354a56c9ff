//! CSV ingestion for cohort and survey files.
//!
//! A header row is required. Reserved columns are `__weight`, `__stratum`,
//! `__psu`, `__outcome` (plus an optional `__id`); everything else is a
//! covariate. Non-numeric covariates are expanded to dummy columns with the
//! lowest level as reference. Missing cells are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use super::{CohortSample, CovariateMatrix, DesignInfo, SurveySample, INTERCEPT};
use crate::error::{Error, Result, Violation};

pub const RESERVED_COLUMNS: [&str; 5] = ["__weight", "__stratum", "__psu", "__outcome", "__id"];

#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let j = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[j].as_str()).collect())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn read_table(path: impl AsRef<Path>) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.iter().map(str::to_string).collect::<Vec<_>>();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(RawTable { headers, rows })
}

/// An extra model term built from numeric columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Main(String),
    Square(String),
    Interaction(String, String),
}

impl Term {
    pub fn parse(s: &str) -> Self {
        let s = s.trim();
        if let Some(base) = s.strip_suffix("^2") {
            Term::Square(base.trim().to_string())
        } else if let Some((a, b)) = s.split_once(':') {
            Term::Interaction(a.trim().to_string(), b.trim().to_string())
        } else {
            Term::Main(s.to_string())
        }
    }

    fn name(&self) -> String {
        match self {
            Term::Main(a) => a.clone(),
            Term::Square(a) => format!("{a}^2"),
            Term::Interaction(a, b) => format!("{a}:{b}"),
        }
    }
}

/// Which covariates enter the propensity model. An empty term list means
/// "every non-reserved cohort column".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelSpec {
    pub terms: Vec<Term>,
    pub categorical: Vec<String>,
}

impl ModelSpec {
    pub fn parse<S: AsRef<str>>(terms: &[S]) -> Self {
        Self { terms: terms.iter().map(|t| Term::parse(t.as_ref())).collect(), categorical: Vec::new() }
    }
}

fn is_missing(s: &str) -> bool {
    s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan")
}

/// Sorted levels of a categorical column: numeric order when every level
/// parses as a number, lexicographic otherwise.
fn levels<'a>(values: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeSet<&str> = values.filter(|s| !is_missing(s)).collect();
    let mut out: Vec<String> = set.into_iter().map(str::to_string).collect();
    if out.iter().all(|s| s.parse::<f64>().is_ok()) {
        out.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    out
}

enum Encoded {
    Numeric(String),
    Dummies { column: String, levels: Vec<String> },
    Square(String),
    Interaction(String, String),
}

/// Loads a cohort file and a survey file with a shared covariate encoding.
pub fn load_pair(cohort_path: impl AsRef<Path>, survey_path: impl AsRef<Path>, spec: &ModelSpec) -> Result<(CohortSample, SurveySample)> {
    let cohort = read_table(cohort_path)?;
    let survey = read_table(survey_path)?;
    build_pair(&cohort, &survey, spec)
}

pub(crate) fn build_pair(cohort: &RawTable, survey: &RawTable, spec: &ModelSpec) -> Result<(CohortSample, SurveySample)> {
    let mut problems = Vec::new();
    if survey.column_index("__weight").is_none() {
        return Err(Error::Validation(vec![Violation {
            sample: "survey",
            row: None,
            column: Some("__weight".into()),
            message: "required column is missing".into(),
        }]));
    }
    if cohort.is_empty() || survey.is_empty() {
        return Err(Error::Empty("cohort and survey files need at least one data row"));
    }

    let terms: Vec<Term> = if spec.terms.is_empty() {
        cohort
            .headers
            .iter()
            .filter(|h| !RESERVED_COLUMNS.contains(&h.as_str()))
            .map(|h| Term::Main(h.clone()))
            .collect()
    } else {
        spec.terms.clone()
    };

    let mut needed = BTreeSet::new();
    for t in &terms {
        match t {
            Term::Main(a) | Term::Square(a) => {
                needed.insert(a.clone());
            }
            Term::Interaction(a, b) => {
                needed.insert(a.clone());
                needed.insert(b.clone());
            }
        }
    }
    for col in &needed {
        for (name, table) in [("cohort", cohort), ("survey", survey)] {
            if table.column_index(col).is_none() {
                problems.push(Violation {
                    sample: name,
                    row: None,
                    column: Some(col.clone()),
                    message: "covariate column is missing".into(),
                });
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let is_categorical = |col: &str| -> bool {
        spec.categorical.iter().any(|c| c == col)
            || cohort.column(col).unwrap().into_iter().chain(survey.column(col).unwrap()).any(|s| !is_missing(s) && s.parse::<f64>().is_err())
    };

    let mut encoded = Vec::new();
    for t in &terms {
        match t {
            Term::Main(a) if is_categorical(a) => {
                let lv = levels(cohort.column(a).unwrap().into_iter().chain(survey.column(a).unwrap()));
                encoded.push(Encoded::Dummies { column: a.clone(), levels: lv });
            }
            Term::Main(a) => encoded.push(Encoded::Numeric(a.clone())),
            Term::Square(a) | Term::Interaction(a, _) if is_categorical(a) => {
                return Err(Error::InvalidArgument(format!("term `{}` needs numeric columns", t.name())))
            }
            Term::Interaction(_, b) if is_categorical(b) => {
                return Err(Error::InvalidArgument(format!("term `{}` needs numeric columns", t.name())))
            }
            Term::Square(a) => encoded.push(Encoded::Square(a.clone())),
            Term::Interaction(a, b) => encoded.push(Encoded::Interaction(a.clone(), b.clone())),
        }
    }

    let mut names = vec![INTERCEPT.to_string()];
    for e in &encoded {
        match e {
            Encoded::Numeric(a) => names.push(a.clone()),
            Encoded::Dummies { column, levels } => names.extend(levels.iter().skip(1).map(|l| format!("{column}={l}"))),
            Encoded::Square(a) => names.push(format!("{a}^2")),
            Encoded::Interaction(a, b) => names.push(format!("{a}:{b}")),
        }
    }

    let cx = encode_matrix("cohort", cohort, &encoded, &names, &mut problems);
    let sx = encode_matrix("survey", survey, &encoded, &names, &mut problems);

    let y = match cohort.column_index("__outcome") {
        Some(_) => Some(numeric_column("cohort", cohort, "__outcome", &mut problems)),
        None => None,
    };
    let d = numeric_column("survey", survey, "__weight", &mut problems);
    for (i, &w) in d.iter().enumerate() {
        if w.is_finite() && w <= 0.0 {
            problems.push(Violation {
                sample: "survey",
                row: Some(i),
                column: Some("__weight".into()),
                message: format!("nonpositive weight at row {i}"),
            });
        }
    }
    let design = design_info(survey, &mut problems);

    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let ids = |t: &RawTable| -> Vec<String> {
        match t.column("__id") {
            Some(c) => c.into_iter().map(str::to_string).collect(),
            None => (1..=t.len()).map(|i| i.to_string()).collect(),
        }
    };

    let cohort_sample = CohortSample { x: CovariateMatrix::new(names.clone(), cohort.len(), cx)?, y, ids: ids(cohort) };
    let survey_sample = SurveySample { x: CovariateMatrix::new(names, survey.len(), sx)?, d, design, ids: ids(survey) };
    super::validate_inputs(&cohort_sample, &survey_sample)?;
    Ok((cohort_sample, survey_sample))
}

fn parse_cell(sample: &'static str, row: usize, column: &str, s: &str, problems: &mut Vec<Violation>) -> f64 {
    let bad = |msg: &str| Violation { sample, row: Some(row), column: Some(column.to_string()), message: msg.to_string() };
    if is_missing(s) {
        problems.push(bad("missing value"));
        return f64::NAN;
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => v,
        Ok(_) => {
            problems.push(bad("non-finite value"));
            f64::NAN
        }
        Err(_) => {
            problems.push(bad("not a number"));
            f64::NAN
        }
    }
}

fn numeric_column(sample: &'static str, t: &RawTable, col: &str, problems: &mut Vec<Violation>) -> Vec<f64> {
    let j = t.column_index(col).expect("column checked by caller");
    t.rows.iter().enumerate().map(|(i, r)| parse_cell(sample, i, col, &r[j], problems)).collect()
}

fn encode_matrix(sample: &'static str, t: &RawTable, encoded: &[Encoded], names: &[String], problems: &mut Vec<Violation>) -> Vec<f64> {
    let mut values = Vec::with_capacity(t.len() * names.len());
    for (i, r) in t.rows.iter().enumerate() {
        values.push(1.0);
        let num = |col: &str, problems: &mut Vec<Violation>| parse_cell(sample, i, col, &r[t.column_index(col).unwrap()], problems);
        for e in encoded {
            match e {
                Encoded::Numeric(a) => values.push(num(a, problems)),
                Encoded::Square(a) => {
                    let v = num(a, problems);
                    values.push(v * v)
                }
                Encoded::Interaction(a, b) => {
                    let va = num(a, problems);
                    let vb = num(b, problems);
                    values.push(va * vb)
                }
                Encoded::Dummies { column, levels } => {
                    let cell = r[t.column_index(column).unwrap()].as_str();
                    if is_missing(cell) {
                        problems.push(Violation {
                            sample,
                            row: Some(i),
                            column: Some(column.clone()),
                            message: "missing value".into(),
                        });
                    }
                    values.extend(levels.iter().skip(1).map(|l| if l == cell { 1.0 } else { 0.0 }));
                }
            }
        }
    }
    // keep the matrix constructible; problems are reported by the caller
    for v in values.iter_mut() {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    values
}

fn integer_codes(t: &RawTable, col: &str) -> Option<Vec<i64>> {
    let c = t.column(col)?;
    let lv = levels(c.iter().copied());
    Some(c.iter().map(|s| lv.iter().position(|l| l == s).map_or(-1, |p| p as i64)).collect())
}

fn design_info(t: &RawTable, problems: &mut Vec<Violation>) -> DesignInfo {
    let n = t.len();
    for col in ["__stratum", "__psu"] {
        if let Some(c) = t.column(col) {
            for (i, s) in c.iter().enumerate() {
                if is_missing(s) {
                    problems.push(Violation { sample: "survey", row: Some(i), column: Some(col.into()), message: "missing value".into() });
                }
            }
        }
    }
    match (integer_codes(t, "__stratum"), integer_codes(t, "__psu")) {
        (Some(h), Some(g)) => DesignInfo::stratified(h, g),
        (None, Some(g)) => DesignInfo::stratified(vec![0; n], g),
        (Some(_), None) => {
            problems.push(Violation {
                sample: "survey",
                row: None,
                column: Some("__psu".into()),
                message: "`__stratum` given without `__psu`".into(),
            });
            DesignInfo::poisson(n)
        }
        (None, None) => DesignInfo::poisson(n),
    }
}
