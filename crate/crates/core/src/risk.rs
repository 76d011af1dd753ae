//! Tail-risk functionals on loss samples (`L = -dX`).
//!
//! CVaR uses the exact tail average of the sorted sample, splitting the atom
//! that straddles the `1 - alpha` tail boundary. This is the minimum of the
//! Rockafellar-Uryasev objective `m + E[(L - m)^+] / (1 - alpha)`.

use crate::numeric::{bisect, norm_pdf, norm_quantile, KahanSum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("empty sample")]
    Empty,
    #[error("non-finite value in sample")]
    NonFinite,
    #[error("level {0} outside the allowed range")]
    Level(f64),
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

fn check_sample(xs: &[f64]) -> Result<(), RiskError> {
    if xs.is_empty() {
        return Err(RiskError::Empty);
    }
    if !xs.iter().all(|x| x.is_finite()) {
        return Err(RiskError::NonFinite);
    }
    Ok(())
}

/// Loss sample sorted in decreasing order with normalised weights, ready
/// for repeated tail queries.
#[derive(Debug, Clone)]
pub struct TailSample {
    values: Vec<f64>,
    weights: Vec<f64>,
    mean: f64,
}

impl TailSample {
    pub fn new(losses: &[f64], weights: Option<&[f64]>) -> Result<Self, RiskError> {
        check_sample(losses)?;
        let n = losses.len();
        let w: Vec<f64> = match weights {
            None => vec![1.0 / n as f64; n],
            Some(w) => {
                if w.len() != n {
                    return Err(RiskError::Weights("length differs from sample".into()));
                }
                if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    return Err(RiskError::Weights("weights must be finite and non-negative".into()));
                }
                let s: f64 = w.iter().sum();
                if !(s > 0.0) {
                    return Err(RiskError::Weights("weights sum to zero".into()));
                }
                w.iter().map(|x| x / s).collect()
            }
        };
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
        let values: Vec<f64> = idx.iter().map(|&i| losses[i]).collect();
        let weights: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
        let mut m = KahanSum::new();
        for (v, p) in values.iter().zip(&weights) {
            m.add(v * p);
        }
        Ok(Self {
            values,
            weights,
            mean: m.value(),
        })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn max(&self) -> f64 {
        self.values[0]
    }

    pub fn min(&self) -> f64 {
        *self.values.last().expect("non-empty")
    }

    /// Average of the top `1 - alpha` probability mass.
    pub fn cvar(&self, alpha: f64) -> Result<f64, RiskError> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(RiskError::Level(alpha));
        }
        let tail = 1.0 - alpha;
        let mut acc = KahanSum::new();
        let mut mass = 0.0;
        for (v, p) in self.values.iter().zip(&self.weights) {
            let take = p.min(tail - mass);
            if take <= 0.0 {
                break;
            }
            acc.add(v * take);
            mass += take;
        }
        Ok(acc.value() / tail)
    }

    /// Lower `alpha`-quantile: smallest `m` with `P(L <= m) >= alpha`.
    pub fn var(&self, alpha: f64) -> Result<f64, RiskError> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(RiskError::Level(alpha));
        }
        let tail = 1.0 - alpha;
        let mut mass = 0.0;
        for (v, p) in self.values.iter().zip(&self.weights) {
            mass += p;
            if mass >= tail - 1e-15 {
                return Ok(*v);
            }
        }
        Ok(self.min())
    }
}

/// CVaR of a (weighted) loss sample at level `alpha` in `[0, 1)`.
pub fn cvar_ru(losses: &[f64], weights: Option<&[f64]>, alpha: f64) -> Result<f64, RiskError> {
    TailSample::new(losses, weights)?.cvar(alpha)
}

/// Value-at-risk and CVaR of a normal loss `N(mean, sd^2)`.
pub fn gaussian_tail_proxy(mean: f64, sd: f64, alpha: f64) -> Result<(f64, f64), RiskError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RiskError::Level(alpha));
    }
    if !(sd >= 0.0) {
        return Err(RiskError::Invalid("standard deviation must be non-negative".into()));
    }
    let z = norm_quantile(alpha);
    Ok((mean + sd * z, mean + sd * norm_pdf(z) / (1.0 - alpha)))
}

/// Entropic risk `(1/gamma) log E[exp(gamma L)]`, evaluated stably.
pub fn entropic(losses: &[f64], gamma: f64) -> Result<f64, RiskError> {
    check_sample(losses)?;
    if !(gamma > 0.0) {
        return Err(RiskError::Invalid("gamma must be positive".into()));
    }
    let m = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = KahanSum::new();
    for &l in losses {
        acc.add((gamma * (l - m)).exp());
    }
    Ok(m + (acc.value() / losses.len() as f64).ln() / gamma)
}

/// Delta-method standard error of the entropic estimator.
pub fn entropic_se(losses: &[f64], gamma: f64) -> Result<f64, RiskError> {
    check_sample(losses)?;
    let m = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = losses.iter().map(|l| (gamma * (l - m)).exp()).collect();
    let mu = crate::stats::mean(&e);
    let var = crate::stats::variance(&e);
    Ok((var / losses.len() as f64).sqrt() / (mu * gamma))
}

/// `tau`-expectile: root of `tau E[(L-e)^+] = (1-tau) E[(e-L)^+]`.
pub fn expectile(losses: &[f64], tau: f64) -> Result<f64, RiskError> {
    check_sample(losses)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(RiskError::Level(tau));
    }
    let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(lo);
    }
    let f = |e: f64| {
        let mut up = KahanSum::new();
        let mut dn = KahanSum::new();
        for &l in losses {
            if l > e {
                up.add(l - e);
            } else {
                dn.add(e - l);
            }
        }
        tau * up.value() - (1.0 - tau) * dn.value()
    };
    let tol = 1e-13 * (1.0 + lo.abs().max(hi.abs()));
    bisect(f, lo, hi, tol).ok_or(RiskError::Invalid("expectile bracket".into()))
}

/// Buffered probability of exceedance `1 - sup{alpha : CVaR_alpha <= tau}`.
pub fn bpoe(losses: &[f64], threshold: f64) -> Result<f64, RiskError> {
    let tail = TailSample::new(losses, None)?;
    bpoe_sorted(&tail, threshold)
}

pub fn bpoe_sorted(tail: &TailSample, threshold: f64) -> Result<f64, RiskError> {
    if !threshold.is_finite() {
        return Err(RiskError::NonFinite);
    }
    if threshold >= tail.max() {
        return Ok(0.0);
    }
    if threshold < tail.mean() {
        return Ok(1.0);
    }
    // CVaR is continuous and non-decreasing in alpha
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if tail.cvar(mid)? <= threshold {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(1.0 - lo)
}

/// Two-sided bounds on `P(dX >= 0)` from the first two moments, plus
/// optional empirical and Chernoff companions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositivityBounds {
    pub cantelli_lower: f64,
    pub cantelli_upper: f64,
    pub empirical: Option<f64>,
    /// Chernoff upper bound on `P(dX <= 0)`.
    pub chernoff_loss: Option<f64>,
}

/// Cantelli bracket `1 - s^2/(s^2 + (m v 0)^2) <= P <= s^2/(s^2 + (m ^ 0)^2)`.
pub fn cantelli_bounds(mean: f64, sd: f64) -> (f64, f64) {
    let v = sd * sd;
    let pos = mean.max(0.0);
    let neg = mean.min(0.0);
    if v == 0.0 {
        // degenerate law: point mass at the mean
        let p = if mean >= 0.0 { 1.0 } else { 0.0 };
        return (p, p);
    }
    (1.0 - v / (v + pos * pos), v / (v + neg * neg))
}

pub fn positivity_bounds(
    mean: f64,
    sd: f64,
    sample: Option<&[f64]>,
    chernoff: bool,
) -> Result<PositivityBounds, RiskError> {
    if !(sd >= 0.0) || !mean.is_finite() {
        return Err(RiskError::Invalid("moments must be finite with sd >= 0".into()));
    }
    let (lo, hi) = cantelli_bounds(mean, sd);
    let mut out = PositivityBounds {
        cantelli_lower: lo,
        cantelli_upper: hi,
        empirical: None,
        chernoff_loss: None,
    };
    if let Some(xs) = sample {
        check_sample(xs)?;
        out.empirical = Some(xs.iter().filter(|x| **x >= 0.0).count() as f64 / xs.len() as f64);
        if chernoff {
            out.chernoff_loss = Some(chernoff_loss_bound(xs));
        }
    }
    Ok(out)
}

/// `inf_theta E[exp(-theta dX)]` over a log-spaced grid, an upper bound on
/// `P(dX <= 0)` under the empirical law.
pub fn chernoff_loss_bound(xs: &[f64]) -> f64 {
    let scale = crate::stats::variance(xs).sqrt().max(1e-300);
    let mut best: f64 = 1.0;
    for i in 0..=200 {
        let theta = 10f64.powf(-4.0 + 8.0 * i as f64 / 200.0) / scale;
        let m = xs.iter().map(|x| -theta * x).fold(f64::NEG_INFINITY, f64::max);
        let mut acc = KahanSum::new();
        for &x in xs {
            acc.add((-theta * x - m).exp());
        }
        let log_mgf = m + (acc.value() / xs.len() as f64).ln();
        best = best.min(log_mgf.exp());
    }
    best
}

/// Risk functional selector used in configurations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskMeasure {
    Cvar { alpha: f64 },
    Entropic { gamma: f64 },
    Expectile { tau: f64 },
}

impl RiskMeasure {
    pub fn eval(&self, losses: &[f64]) -> Result<f64, RiskError> {
        match *self {
            RiskMeasure::Cvar { alpha } => cvar_ru(losses, None, alpha),
            RiskMeasure::Entropic { gamma } => entropic(losses, gamma),
            RiskMeasure::Expectile { tau } => expectile(losses, tau),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cvar_small_sample() {
        assert!((cvar_ru(&[1.0, 2.0, 3.0, 4.0], None, 0.5).unwrap() - 3.5).abs() < 1e-15);
        assert!((cvar_ru(&[1.0, 2.0, 3.0, 4.0], None, 0.0).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn cvar_fractional_atom() {
        // top 0.3 of mass: all of 4 (0.25) and 0.05 of 3
        let c = cvar_ru(&[1.0, 2.0, 3.0, 4.0], None, 0.7).unwrap();
        assert!((c - (4.0 * 0.25 + 3.0 * 0.05) / 0.3).abs() < 1e-14);
    }

    #[test]
    fn gaussian_proxy_values() {
        let (v, c) = gaussian_tail_proxy(0.0, 1.0, 0.95).unwrap();
        assert!((v - 1.6449).abs() < 1e-4);
        assert!((c - 2.0627).abs() < 1e-4);
    }

    #[test]
    fn bpoe_small_sample() {
        assert!((bpoe(&[1.0, 2.0, 3.0, 4.0], 3.5).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(bpoe(&[1.0, 2.0, 3.0, 4.0], 4.0).unwrap(), 0.0);
        assert_eq!(bpoe(&[1.0, 2.0, 3.0, 4.0], 2.0).unwrap(), 1.0);
    }

    #[test]
    fn cantelli_unit_moments() {
        let (lo, hi) = cantelli_bounds(1.0, 1.0);
        assert!((lo - 0.5).abs() < 1e-15);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn errors() {
        assert_eq!(cvar_ru(&[], None, 0.5), Err(RiskError::Empty));
        assert_eq!(cvar_ru(&[1.0, f64::NAN], None, 0.5), Err(RiskError::NonFinite));
        assert_eq!(cvar_ru(&[1.0], None, 1.0), Err(RiskError::Level(1.0)));
        assert!(cvar_ru(&[1.0, 2.0], Some(&[1.0]), 0.5).is_err());
    }
}
