//! Small numeric helpers shared across modules.

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Compensated sum of an iterator, in iteration order.
pub fn csum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<CompensatedSum>().value()
}

#[inline]
pub fn expit(q: f64) -> f64 {
    if q >= 0.0 {
        1.0 / (1.0 + (-q).exp())
    } else {
        let e = q.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mean(xs: &[f64]) -> f64 {
    csum(xs.iter().copied()) / xs.len() as f64
}

/// Sample variance with an `n - 1` divisor.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    csum(xs.iter().map(|x| (x - m) * (x - m))) / (xs.len() as f64 - 1.0)
}

/// Empirical quantile with linear interpolation between order statistics
/// (the default definition in R and NumPy). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(csum(xs), 2.0);
    }

    #[test]
    fn expit_is_stable_in_both_tails() {
        assert!((expit(0.0) - 0.5).abs() < 1e-15);
        assert!(expit(-800.0) >= 0.0);
        assert_eq!(expit(800.0), 1.0);
        assert!((logit(expit(1.3)) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
        assert!((quantile_sorted(&s, 0.5) - 2.5).abs() < 1e-15);
    }
}
