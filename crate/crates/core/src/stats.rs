//! Small descriptive-statistics helpers shared by the estimators and the
//! simulation harnesses.

use std::ops::AddAssign;

/// Kahan-Babuska-Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
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

    /// Fold another accumulator in, keeping both compensation terms.
    pub fn merge(&mut self, other: &NeumaierSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl AddAssign<f64> for NeumaierSum {
    fn add_assign(&mut self, rhs: f64) {
        self.add(rhs);
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = NeumaierSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

pub fn compensated_sum(xs: &[f64]) -> f64 {
    xs.iter().copied().collect::<NeumaierSum>().value()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    compensated_sum(xs) / xs.len() as f64
}

/// Unbiased sample variance; NaN for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    sample_covariance(xs, xs)
}

pub fn sample_sd(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// Unbiased sample covariance of two equal-length slices.
pub fn sample_covariance(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "sample_covariance: length mismatch");
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let mx = mean(xs);
    let my = mean(ys);
    let acc: NeumaierSum = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    acc.value() / (n - 1) as f64
}

/// Standard error of the mean.
pub fn standard_error(xs: &[f64]) -> f64 {
    sample_sd(xs) / (xs.len() as f64).sqrt()
}

/// Sample covariance across repetitions together with its standard error.
///
/// The error is the delta-method one: the standard error of the mean of the
/// centred cross products `(x_i - x̄)(y_i - ȳ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceWithSe {
    pub value: f64,
    pub se: f64,
}

pub fn covariance_with_se(xs: &[f64], ys: &[f64]) -> CovarianceWithSe {
    let n = xs.len();
    let mx = mean(xs);
    let my = mean(ys);
    let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let value = compensated_sum(&prods) / (n as f64 - 1.0);
    CovarianceWithSe {
        value,
        se: standard_error(&prods) * n as f64 / (n as f64 - 1.0),
    }
}

/// Least-squares fit of `y = a + b x`; returns `(a, b, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let sxy = sample_covariance(xs, ys);
    let sxx = sample_variance(xs);
    let syy = sample_variance(ys);
    let slope = sxy / sxx;
    let intercept = mean(ys) - slope * mean(xs);
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (intercept, slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neumaier_recovers_cancelled_terms() {
        let xs = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(compensated_sum(&xs), 2.0);
        let naive: f64 = xs.iter().sum();
        assert_eq!(naive, 0.0);
    }

    #[test]
    fn merge_matches_single_pass() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin() * 1e8 + 0.1).collect();
        let mut a: NeumaierSum = xs[..400].iter().copied().collect();
        let b: NeumaierSum = xs[400..].iter().copied().collect();
        a.merge(&b);
        let whole = compensated_sum(&xs);
        assert!((a.value() - whole).abs() <= 1e-6 * whole.abs().max(1.0));
    }

    #[test]
    fn variance_of_one_two_three() {
        assert_eq!(sample_variance(&[1.0, 2.0, 3.0]), 1.0);
        assert!(sample_variance(&[1.0]).is_nan());
    }

    #[test]
    fn linear_fit_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [3.0, 5.0, 7.0, 9.0];
        let (a, b, r2) = linear_fit(&xs, &ys);
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }
}
