use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::data::{DesignInfo, DesignKind};
use crate::error::{Error, Result};

/// Design-based variance of the total `sum_i z_i` of per-unit vectors `z`
/// (each already expanded by its weight), under the survey design.
///
/// * Poisson: `sum_i (1 - 1/d_i) z_i z_i'`, with `d` the base weights.
/// * Stratified with-replacement PSUs: `sum_h m_h/(m_h-1) sum_g (t_hg - tbar_h)(t_hg - tbar_h)'`
///   over PSU totals `t_hg`.
/// * SRS: `n (1 - f)` times the sample covariance of `z`.
pub fn design_variance(z: &[Vec<f64>], base_d: &[f64], design: &DesignInfo) -> Result<DMatrix<f64>> {
    let n = z.len();
    if base_d.len() != n || design.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} score rows, {} weights, {} design records",
            base_d.len(),
            design.len()
        )));
    }
    let k = z.first().map_or(0, Vec::len);
    if z.iter().any(|r| r.len() != k) {
        return Err(Error::DimensionMismatch("ragged score rows".into()));
    }
    let mut v = DMatrix::<f64>::zeros(k, k);
    let add_outer = |v: &mut DMatrix<f64>, a: &[f64], c: f64| {
        for r in 0..k {
            for s in 0..k {
                v[(r, s)] += c * a[r] * a[s];
            }
        }
    };
    match design.kind {
        DesignKind::Poisson => {
            for (zi, &d) in z.iter().zip(base_d) {
                add_outer(&mut v, zi, 1.0 - 1.0 / d);
            }
        }
        DesignKind::StratifiedWrPsu => {
            let mut strata: BTreeMap<i64, BTreeMap<i64, Vec<f64>>> = BTreeMap::new();
            for (i, zi) in z.iter().enumerate() {
                let t = strata.entry(design.strata[i]).or_default().entry(design.psu[i]).or_insert_with(|| vec![0.0; k]);
                for (a, b) in t.iter_mut().zip(zi) {
                    *a += b;
                }
            }
            for (h, psus) in &strata {
                let m = psus.len();
                if m < 2 {
                    return Err(Error::Design(format!("stratum {h} has a single PSU; collapse strata first")));
                }
                let mut mean = vec![0.0; k];
                for t in psus.values() {
                    for (a, b) in mean.iter_mut().zip(t) {
                        *a += b / m as f64;
                    }
                }
                let factor = m as f64 / (m as f64 - 1.0);
                for t in psus.values() {
                    let dev: Vec<f64> = t.iter().zip(&mean).map(|(a, b)| a - b).collect();
                    add_outer(&mut v, &dev, factor);
                }
            }
        }
        DesignKind::Srs { sampling_fraction } => {
            if n < 2 {
                return Err(Error::Design("SRS variance needs at least two units".into()));
            }
            let mut mean = vec![0.0; k];
            for zi in z {
                for (a, b) in mean.iter_mut().zip(zi) {
                    *a += b / n as f64;
                }
            }
            let factor = n as f64 * (1.0 - sampling_fraction) / (n as f64 - 1.0);
            for zi in z {
                let dev: Vec<f64> = zi.iter().zip(&mean).map(|(a, b)| a - b).collect();
                add_outer(&mut v, &dev, factor);
            }
        }
    }
    Ok(v)
}
