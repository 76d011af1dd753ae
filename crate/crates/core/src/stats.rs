//! Sample statistics and regressions used by the experiments.

use crate::numeric::{ksum, norm_sf, KahanSum};
use rand::Rng;
use serde::Serialize;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    ksum(xs) / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let mut k = KahanSum::new();
    for &x in xs {
        k.add((x - m) * (x - m));
    }
    k.value() / (n - 1) as f64
}

/// Standard error of the sample mean.
pub fn std_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    (variance(xs) / xs.len() as f64).sqrt()
}

pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mx = mean(xs);
    let my = mean(ys);
    let mut k = KahanSum::new();
    for (x, y) in xs.iter().zip(ys) {
        k.add((x - mx) * (y - my));
    }
    k.value() / (n - 1) as f64
}

/// Mean and standard error in one pass over the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn of(xs: &[f64]) -> Self {
        Self {
            mean: mean(xs),
            se: std_error(xs),
        }
    }

    pub fn ci95(&self) -> (f64, f64) {
        (self.mean - 1.96 * self.se, self.mean + 1.96 * self.se)
    }

    /// One-sided p-value for `mean > 0`.
    pub fn p_positive(&self) -> f64 {
        if self.se == 0.0 {
            return if self.mean > 0.0 { 0.0 } else { 1.0 };
        }
        norm_sf(self.mean / self.se)
    }
}

/// Ordinary least squares `y = intercept + slope * x` with classical errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
    pub r2: f64,
    pub n: usize,
}

impl LinearFit {
    /// Two-sided 95% interval for the intercept using Student t quantiles.
    pub fn intercept_ci95(&self) -> (f64, f64) {
        let t = student_t_975(self.n.saturating_sub(2));
        (
            self.intercept - t * self.intercept_se,
            self.intercept + t * self.intercept_se,
        )
    }

    pub fn slope_ci95(&self) -> (f64, f64) {
        let t = student_t_975(self.n.saturating_sub(2));
        (self.slope - t * self.slope_se, self.slope + t * self.slope_se)
    }
}

/// 97.5% quantile of Student's t with `dof` degrees of freedom.
pub fn student_t_975(dof: usize) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    if dof == 0 {
        return f64::INFINITY;
    }
    StudentsT::new(0.0, 1.0, dof as f64)
        .map(|t| t.inverse_cdf(0.975))
        .unwrap_or(1.96)
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut sse = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let r = y - intercept - slope * x;
        sse += r * r;
    }
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let s2 = if n > 2 { sse / (n - 2) as f64 } else { 0.0 };
    LinearFit {
        slope,
        intercept,
        slope_se: (s2 / sxx).sqrt(),
        intercept_se: (s2 * (1.0 / n as f64 + mx * mx / sxx)).sqrt(),
        r2,
        n,
    }
}

/// Slope of `log10 y` against `log10 x`.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let lx: Vec<f64> = xs.iter().map(|x| x.log10()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.log10()).collect();
    linear_fit(&lx, &ly)
}

/// Linear-interpolated empirical quantile of already sorted data.
pub fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bootstrap replicates of a statistic, sorted ascending.
pub fn bootstrap_stats<R: Rng, F: Fn(&[f64]) -> f64>(
    xs: &[f64],
    stat: F,
    resamples: usize,
    rng: &mut R,
) -> Vec<f64> {
    let n = xs.len();
    let mut buf = vec![0.0; n];
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for b in buf.iter_mut() {
            *b = xs[rng.random_range(0..n)];
        }
        stats.push(stat(&buf));
    }
    stats.sort_by(|a, b| a.total_cmp(b));
    stats
}

/// Percentile bootstrap interval of a statistic at level 95%.
pub fn bootstrap_ci<R: Rng, F: Fn(&[f64]) -> f64>(
    xs: &[f64],
    stat: F,
    resamples: usize,
    rng: &mut R,
) -> (f64, f64) {
    let stats = bootstrap_stats(xs, stat, resamples, rng);
    (sorted_quantile(&stats, 0.025), sorted_quantile(&stats, 0.975))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 3.0, 5.0, 7.0];
        let f = linear_fit(&xs, &ys);
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variance_small_sample() {
        assert!((variance(&[1.0, 2.0, 3.0, 4.0]) - 5.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn quantile_interpolates() {
        assert!((sorted_quantile(&[0.0, 1.0, 2.0], 0.25) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn t_quantile_matches_table() {
        assert!((student_t_975(3) - 3.182_446_305_284_263).abs() < 1e-6);
    }
}
