//! Small estimator helpers: running moments, confidence intervals, and the
//! delta method for ratio estimators.

use statrs::distribution::{ContinuousCDF, Normal};

/// Two-sided normal quantile for a confidence level (0.99 → z ≈ 2.5758).
pub fn z_for_level(ci_level: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    normal.inverse_cdf(0.5 + 0.5 * ci_level)
}

/// Sample mean / variance over a slice, summed pairwise for reproducibility.
#[derive(Debug, Clone, Copy)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    pub var: f64,
}

impl Moments {
    pub fn from_slice(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                n: 0,
                mean: f64::NAN,
                var: f64::NAN,
            };
        }
        let mean = crate::rng::pairwise_sum(xs) / n as f64;
        let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let var = if n > 1 {
            crate::rng::pairwise_sum(&sq) / (n as f64 - 1.0)
        } else {
            0.0
        };
        Self { n, mean, var }
    }

    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            (self.var / self.n as f64).sqrt()
        }
    }

    pub fn ci_halfwidth(&self, ci_level: f64) -> f64 {
        z_for_level(ci_level) * self.stderr()
    }
}

/// Delta-method standard error for the ratio mean(a)/mean(b) from paired
/// samples: Var(R) ≈ (Var a + R² Var b − 2R Cov) / (n · mean(b)²).
pub fn ratio_stderr(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ma = Moments::from_slice(a);
    let mb = Moments::from_slice(b);
    let r = ma.mean / mb.mean;
    if n < 2 {
        return (r, f64::INFINITY);
    }
    let cov_terms: Vec<f64> = a
        .iter()
        .zip(b.iter())
        .map(|(&ai, &bi)| (ai - ma.mean) * (bi - mb.mean))
        .collect();
    let cov = crate::rng::pairwise_sum(&cov_terms) / (n as f64 - 1.0);
    let var_r = (ma.var + r * r * mb.var - 2.0 * r * cov) / (n as f64 * mb.mean * mb.mean);
    (r, var_r.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn z_quantiles() {
        assert!((z_for_level(0.95) - 1.959964).abs() < 1e-5);
        assert!((z_for_level(0.99) - 2.575829).abs() < 1e-5);
    }

    #[test]
    fn moments_of_constant() {
        let m = Moments::from_slice(&[2.0; 50]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.var, 0.0);
        assert_eq!(m.stderr(), 0.0);
    }

    #[test]
    fn ratio_of_proportional_samples_has_zero_stderr() {
        // a = 3b pathwise → ratio estimator is exactly 3 with no variance.
        let b: Vec<f64> = (1..100).map(|i| i as f64).collect();
        let a: Vec<f64> = b.iter().map(|x| 3.0 * x).collect();
        let (r, se) = ratio_stderr(&a, &b);
        assert!((r - 3.0).abs() < 1e-12);
        assert!(se < 1e-9, "se {se}");
    }
}
