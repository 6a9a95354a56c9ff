use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::CovariateMatrix;
use crate::error::{Error, Result};

/// Cumulative cut points (as population shares) of the five `x1**` categories.
const X1_CATEGORY_CUTS: [f64; 4] = [0.1, 0.4, 0.7, 0.9];

/// A simulated finite population.
#[derive(Debug, Clone)]
pub struct FinitePopulation {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub x3: Vec<f64>,
    /// `1{x1 + x2 > 2}`
    pub x4: Vec<f64>,
    /// `x1 + 0.15 x1^3`
    pub x1_star: Vec<f64>,
    /// Rank category of `x1` (0..=4), cut at its 10/40/70/90 percentiles.
    pub x1_cat: Vec<u8>,
    pub y: Vec<f64>,
}

impl FinitePopulation {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn mean_y(&self) -> f64 {
        crate::numeric::mean(&self.y)
    }

    /// Selection covariates `(x1, x2, x3)` of unit `i`.
    pub fn selection_covariates(&self, i: usize) -> [f64; 3] {
        [self.x1[i], self.x2[i], self.x3[i]]
    }

    /// Design matrix of `model` for the listed units.
    pub fn covariates(&self, model: SimModel, idx: &[usize]) -> CovariateMatrix {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let built = match model {
            SimModel::T => CovariateMatrix::with_intercept(&["x1", "x2", "x4"], &[pick(&self.x1), pick(&self.x2), pick(&self.x4)]),
            SimModel::U => CovariateMatrix::with_intercept(&["x1", "x2"], &[pick(&self.x1), pick(&self.x2)]),
            SimModel::M1 => CovariateMatrix::with_intercept(&["x1*", "x2"], &[pick(&self.x1_star), pick(&self.x2)]),
            SimModel::M2 => {
                let dummy = |level: u8| idx.iter().map(|&i| f64::from(self.x1_cat[i] == level)).collect::<Vec<f64>>();
                CovariateMatrix::with_intercept(
                    &["x1**=1", "x1**=2", "x1**=3", "x1**=4", "x2"],
                    &[dummy(1), dummy(2), dummy(3), dummy(4), pick(&self.x2)],
                )
            }
        };
        built.expect("simulated covariates are finite")
    }
}

/// Propensity model covariate sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SimModel {
    /// `x1, x2, x4`
    #[default]
    T,
    /// `x1, x2`
    U,
    /// `x1*, x2`
    M1,
    /// `x1**` dummies and `x2`
    M2,
}

impl fmt::Display for SimModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for SimModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T" => Ok(SimModel::T),
            "U" => Ok(SimModel::U),
            "M1" => Ok(SimModel::M1),
            "M2" => Ok(SimModel::M2),
            other => Err(Error::InvalidArgument(format!("unknown model `{other}`; expected T, U, M1 or M2"))),
        }
    }
}

/// Draws the population: `x1, x2 ~ N(1, 1)`, `x3 ~ LogNormal(0, 0.7)`,
/// `y = 2 + x1 + x2 + x4 + e` with `e ~ N(0, 1)`.
pub fn generate_population(size: usize, seed: u64) -> Result<FinitePopulation> {
    if size < 1000 {
        return Err(Error::InvalidArgument(format!("population size must be at least 1000, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lognormal = LogNormal::new(0.0, 0.7).expect("valid parameters");
    let mut pop = FinitePopulation {
        x1: Vec::with_capacity(size),
        x2: Vec::with_capacity(size),
        x3: Vec::with_capacity(size),
        x4: Vec::with_capacity(size),
        x1_star: Vec::with_capacity(size),
        x1_cat: vec![0; size],
        y: Vec::with_capacity(size),
    };
    for _ in 0..size {
        let x1 = 1.0 + rng.sample::<f64, _>(StandardNormal);
        let x2 = 1.0 + rng.sample::<f64, _>(StandardNormal);
        let x3 = lognormal.sample(&mut rng);
        let x4 = f64::from(x1 + x2 > 2.0);
        let e: f64 = rng.sample(StandardNormal);
        pop.x1.push(x1);
        pop.x2.push(x2);
        pop.x3.push(x3);
        pop.x4.push(x4);
        pop.x1_star.push(x1 + 0.15 * x1.powi(3));
        pop.y.push(2.0 + x1 + x2 + x4 + e);
    }
    let mut order: Vec<usize> = (0..size).collect();
    order.sort_by(|&a, &b| pop.x1[a].total_cmp(&pop.x1[b]).then(a.cmp(&b)));
    let bounds: Vec<usize> = X1_CATEGORY_CUTS.iter().map(|c| (c * size as f64).round() as usize).collect();
    for (rank, &i) in order.iter().enumerate() {
        pop.x1_cat[i] = bounds.iter().filter(|&&b| rank >= b).count() as u8;
    }
    Ok(pop)
}

/// A Poisson PPS draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PpsSample {
    pub indices: Vec<usize>,
    /// `1 / pi` for each selected unit.
    pub weights: Vec<f64>,
    /// Units whose inclusion probability was capped at 1.
    pub capped: usize,
}

/// Inclusion probabilities `min(1, n m_i / sum m)`.
pub fn pps_probabilities(mos: &[f64], n: f64) -> Result<(Vec<f64>, usize)> {
    if let Some(i) = mos.iter().position(|m| !(*m > 0.0 && m.is_finite())) {
        return Err(Error::InvalidArgument(format!("measure of size at unit {i} must be positive")));
    }
    let total = crate::numeric::csum(mos.iter().copied());
    let mut capped = 0;
    let pi = mos
        .iter()
        .map(|m| {
            let p = n * m / total;
            if p >= 1.0 {
                capped += 1;
                1.0
            } else {
                p
            }
        })
        .collect();
    Ok((pi, capped))
}

/// Independent Bernoulli selection with probabilities proportional to `mos`.
pub fn pps_poisson_sample<R: Rng + ?Sized>(mos: &[f64], n: usize, rng: &mut R) -> Result<PpsSample> {
    let (pi, capped) = pps_probabilities(mos, n as f64)?;
    if capped > 0 {
        log::warn!("{capped} inclusion probabilities capped at 1");
    }
    let mut indices = Vec::with_capacity(n + n / 4);
    let mut weights = Vec::with_capacity(n + n / 4);
    for (i, &p) in pi.iter().enumerate() {
        if rng.random::<f64>() < p {
            indices.push(i);
            weights.push(1.0 / p);
        }
    }
    Ok(PpsSample { indices, weights, capped })
}
