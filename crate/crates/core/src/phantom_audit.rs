//! Audit of anticipative strategies against the causal baseline.
//!
//! The audit market is a single asset `dP = drift dt + vol dB` sampled on a
//! fine grid. Positions are set at bar opens and held for a bar. Under the
//! information channel the insider knows a sign `xi` at time zero and the
//! noise carries the extra drift `xi alpha`, so `dB = dW + xi alpha dt`
//! where `W` is the innovation. The look-ahead channel reads `W` ahead of
//! the bar open. Phantom profit of a strategy is its mean MtM gain minus
//! the causal baseline `E[int <phi, drift> dt]`.

use crate::numeric::{norm_cdf, norm_pdf, sgn};
use crate::rl_controller::{train, Contamination, GradientMethod, GradientSample, PolicyEnvironment, RlError, StepSchedule, TrainConfig, TrainTrace};
use crate::rng::{stream, Domain, GaussianStream, UniformStream};
use crate::stats::{covariance, linear_fit, mean, variance, Estimate, LinearFit};
use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("invalid audit input: {0}")]
    Invalid(String),
    #[error("scenario mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Rl(#[from] RlError),
}

/// Market used by every audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditScenario {
    pub drift: f64,
    pub vol: f64,
    pub horizon: f64,
    pub n_steps: usize,
    /// Steps per holding bar.
    pub bar_steps: usize,
}

impl Default for AuditScenario {
    fn default() -> Self {
        Self {
            drift: 0.1,
            vol: 0.5,
            horizon: 4.0,
            n_steps: 512,
            bar_steps: 128,
        }
    }
}

impl AuditScenario {
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn n_bars(&self) -> usize {
        self.n_steps / self.bar_steps
    }

    pub fn validate(&self) -> Result<(), AuditError> {
        if self.n_steps == 0 || self.bar_steps == 0 || self.n_steps % self.bar_steps != 0 {
            return Err(AuditError::Invalid("bar_steps must divide n_steps".into()));
        }
        if !(self.vol > 0.0 && self.horizon > 0.0) {
            return Err(AuditError::Invalid("vol and horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Kind of anticipation added to a strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LeakageSpec {
    None,
    /// `gain * (W_{t+window} - W_t)` read at each bar open.
    Lookahead { window: usize, gain: f64 },
    /// Extra drift `xi alpha` known to the insider, traded as
    /// `gain * vol * alpha * xi`.
    InfoDrift { alpha: f64, gain: f64 },
}

/// Bar-held position rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Constant { position: f64 },
    /// `gain * (B_t - B_{t - window})`, adapted.
    Momentum { gain: f64, window: usize },
    Lookahead { gain: f64, window: usize },
    Info { gain: f64, alpha: f64 },
    /// `theta0 + theta1 (x + leak z)` with `x` the normalised past
    /// return over `past` steps and `z` the normalised innovation over the
    /// next `ahead` steps.
    Linear {
        theta0: f64,
        theta1: f64,
        past: usize,
        leak: f64,
        ahead: usize,
    },
    Sum { parts: Vec<Strategy> },
}

impl Strategy {
    pub fn with_leakage(&self, leakage: &LeakageSpec) -> Strategy {
        match *leakage {
            LeakageSpec::None => self.clone(),
            LeakageSpec::Lookahead { window, gain } => Strategy::Sum {
                parts: vec![self.clone(), Strategy::Lookahead { gain, window }],
            },
            LeakageSpec::InfoDrift { alpha, gain } => Strategy::Sum {
                parts: vec![self.clone(), Strategy::Info { gain, alpha }],
            },
        }
    }

    fn position(&self, p: &AuditPath, k0: usize, vol: f64) -> f64 {
        let n = p.w_cum.len() - 1;
        match self {
            Strategy::Constant { position } => *position,
            Strategy::Momentum { gain, window } => gain * (p.b_cum[k0] - p.b_cum[k0.saturating_sub(*window)]),
            Strategy::Lookahead { gain, window } => gain * (p.w_cum[(k0 + window).min(n)] - p.w_cum[k0]),
            Strategy::Info { gain, alpha } => {
                if p.info {
                    gain * vol * alpha * p.xi
                } else {
                    0.0
                }
            }
            Strategy::Linear {
                theta0,
                theta1,
                past,
                leak,
                ahead,
            } => {
                let lo = k0.saturating_sub(*past);
                let x = if k0 > lo {
                    (p.b_cum[k0] - p.b_cum[lo]) / ((k0 - lo) as f64 * p.dt).sqrt()
                } else {
                    0.0
                };
                let hi = (k0 + ahead).min(n);
                let z = if hi > k0 {
                    (p.w_cum[hi] - p.w_cum[k0]) / ((hi - k0) as f64 * p.dt).sqrt()
                } else {
                    0.0
                };
                theta0 + theta1 * (x + leak * z)
            }
            Strategy::Sum { parts } => parts.iter().map(|s| s.position(p, k0, vol)).sum(),
        }
    }

    /// Upper bound on the `L2(ds)` norm of the Malliavin derivative of the
    /// bar-held position.
    pub fn malliavin_norm(&self, dt: f64) -> f64 {
        match self {
            Strategy::Constant { .. } | Strategy::Info { .. } => 0.0,
            Strategy::Momentum { gain, window } | Strategy::Lookahead { gain, window } => {
                gain.abs() * (*window as f64 * dt).sqrt()
            }
            Strategy::Linear {
                theta1, past, leak, ahead, ..
            } => {
                let a = if *past > 0 { 1.0 } else { 0.0 };
                let b = if *ahead > 0 { leak * leak } else { 0.0 };
                theta1.abs() * (a + b).sqrt()
            }
            Strategy::Sum { parts } => parts.iter().map(|s| s.malliavin_norm(dt)).sum(),
        }
    }
}

/// Innovation path plus the insider sign.
#[derive(Debug, Clone)]
pub struct AuditPath {
    dt: f64,
    xi: f64,
    info: bool,
    /// Prefix sums of the innovation `W`.
    w_cum: Vec<f64>,
    /// Prefix sums of the observed noise `B`.
    b_cum: Vec<f64>,
}

impl AuditPath {
    pub fn generate(scn: &AuditScenario, seed: u64, path: u64, info_alpha: Option<f64>) -> Self {
        let dt = scn.dt();
        let sq = dt.sqrt();
        let mut g = GaussianStream::new(seed, Domain::Brownian, path, 1);
        let xi = if UniformStream::new(seed, Domain::Scenario, path).next() <= 0.5 {
            1.0
        } else {
            -1.0
        };
        let drift = info_alpha.map(|a| a * xi * dt).unwrap_or(0.0);
        let mut w_cum = Vec::with_capacity(scn.n_steps + 1);
        let mut b_cum = Vec::with_capacity(scn.n_steps + 1);
        w_cum.push(0.0);
        b_cum.push(0.0);
        let mut z = [0.0];
        for k in 0..scn.n_steps {
            g.next_block(&mut z);
            w_cum.push(w_cum[k] + sq * z[0]);
            b_cum.push(b_cum[k] + sq * z[0] + drift);
        }
        Self {
            dt,
            xi,
            info: info_alpha.is_some(),
            w_cum,
            b_cum,
        }
    }
}

/// Per-path audit quantities.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PathAudit {
    /// `sum phi (dP - drift dt)`.
    pub phantom: f64,
    /// `sum phi drift dt`.
    pub baseline: f64,
    /// `sum phi vol alpha xi dt`, zero without the information channel.
    pub info_premium: f64,
    /// `sum |phi| vol |alpha| dt`.
    pub info_bound: f64,
}

fn audit_one(scn: &AuditScenario, strategy: &Strategy, path: &AuditPath, alpha: f64) -> PathAudit {
    let mut out = PathAudit::default();
    let dt = path.dt;
    for bar in 0..scn.n_bars() {
        let k0 = bar * scn.bar_steps;
        let k1 = k0 + scn.bar_steps;
        let phi = strategy.position(path, k0, scn.vol);
        let db = path.b_cum[k1] - path.b_cum[k0];
        let span = (k1 - k0) as f64 * dt;
        out.phantom += phi * scn.vol * db;
        out.baseline += phi * scn.drift * span;
        if path.info {
            out.info_premium += phi * scn.vol * alpha * path.xi * span;
            out.info_bound += phi.abs() * scn.vol * alpha.abs() * span;
        }
    }
    out
}

fn info_alpha(leakage: &[LeakageSpec]) -> Option<f64> {
    leakage.iter().find_map(|l| match l {
        LeakageSpec::InfoDrift { alpha, .. } => Some(*alpha),
        _ => None,
    })
}

/// Per-path audits of `strategy` with the given leakage channels switched
/// on, for paths `0..n_paths`.
pub fn audit_paths(
    scn: &AuditScenario,
    strategy: &Strategy,
    leakage: &[LeakageSpec],
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PathAudit>, AuditError> {
    scn.validate()?;
    let alpha = info_alpha(leakage);
    let mut implemented = strategy.clone();
    for l in leakage {
        implemented = implemented.with_leakage(l);
    }
    Ok((0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let p = AuditPath::generate(scn, seed, i, alpha);
            audit_one(scn, &implemented, &p, alpha.unwrap_or(0.0))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhantomReport {
    pub pi_ph: Estimate,
    pub ci: (f64, f64),
    /// Analytic information premium evaluated along the paths.
    pub info_premium: Option<Estimate>,
    /// Phantom profit minus the information premium.
    pub skorokhod: Option<Estimate>,
    pub baseline: f64,
    /// `E int |phi| |vol alpha| dt + 1/2 vol int ||D phi_t|| dt`.
    pub bound: f64,
    pub n_paths: usize,
}

/// Phantom profit of `strategy` plus `leakage` against the causal baseline.
pub fn phantom_profit(
    scn: &AuditScenario,
    strategy: &Strategy,
    leakage: &LeakageSpec,
    n_paths: usize,
    seed: u64,
) -> Result<PhantomReport, AuditError> {
    if n_paths < 2 {
        return Err(AuditError::Invalid("need at least two paths".into()));
    }
    let audits = audit_paths(scn, strategy, std::slice::from_ref(leakage), n_paths, seed)?;
    let ph: Vec<f64> = audits.iter().map(|a| a.phantom).collect();
    let pi_ph = Estimate::of(&ph);
    let has_info = matches!(leakage, LeakageSpec::InfoDrift { .. });
    let (info_premium, skorokhod) = if has_info {
        let ip: Vec<f64> = audits.iter().map(|a| a.info_premium).collect();
        let sk: Vec<f64> = audits.iter().map(|a| a.phantom - a.info_premium).collect();
        (Some(Estimate::of(&ip)), Some(Estimate::of(&sk)))
    } else {
        (None, Some(pi_ph))
    };
    let implemented = strategy.with_leakage(leakage);
    let dnorm = implemented.malliavin_norm(scn.dt());
    let bound = mean(&audits.iter().map(|a| a.info_bound).collect::<Vec<_>>()) + 0.5 * scn.vol * dnorm * scn.horizon;
    Ok(PhantomReport {
        pi_ph,
        ci: pi_ph.ci95(),
        info_premium,
        skorokhod,
        baseline: mean(&audits.iter().map(|a| a.baseline).collect::<Vec<_>>()),
        bound,
        n_paths,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decomposition {
    pub none: Estimate,
    pub info_only: Estimate,
    pub lookahead_only: Estimate,
    pub both: Estimate,
    /// `Pi(info) - Pi(none)`.
    pub info_premium: Estimate,
    /// `Pi(lookahead) - Pi(none)`.
    pub skorokhod: Estimate,
    /// `Pi(both) - Pi(none)`.
    pub total: Estimate,
    /// `Pi(both) - Pi(info) - Pi(lookahead) + Pi(none)`, per path.
    pub residual: Estimate,
    /// Information premium while only the look-ahead channel is on.
    pub info_in_lookahead_only: Estimate,
    /// Skorokhod part while only the information channel is on.
    pub skorokhod_in_info_only: Estimate,
}

impl Decomposition {
    pub fn additive(&self) -> bool {
        let (lo, hi) = self.residual.ci95();
        lo <= 0.0 && 0.0 <= hi
    }
}

/// 2x2 design over the two channels on paired paths.
pub fn decompose_phantom(
    scn: &AuditScenario,
    strategy: &Strategy,
    info: &LeakageSpec,
    lookahead: &LeakageSpec,
    n_paths: usize,
    seed: u64,
) -> Result<Decomposition, AuditError> {
    if !matches!(info, LeakageSpec::InfoDrift { .. }) || !matches!(lookahead, LeakageSpec::Lookahead { .. }) {
        return Err(AuditError::Invalid("decomposition needs one info and one look-ahead channel".into()));
    }
    let none = audit_paths(scn, strategy, &[], n_paths, seed)?;
    let a = audit_paths(scn, strategy, &[*info], n_paths, seed)?;
    let l = audit_paths(scn, strategy, &[*lookahead], n_paths, seed)?;
    let b = audit_paths(scn, strategy, &[*info, *lookahead], n_paths, seed)?;
    let col = |xs: &[PathAudit]| xs.iter().map(|p| p.phantom).collect::<Vec<f64>>();
    let (pn, pa, pl, pb) = (col(&none), col(&a), col(&l), col(&b));
    let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u - v).collect::<Vec<f64>>();
    let residual: Vec<f64> = (0..n_paths).map(|i| pb[i] - pa[i] - pl[i] + pn[i]).collect();
    let sk_info: Vec<f64> = a.iter().map(|p| p.phantom - p.info_premium).zip(&pn).map(|(x, y)| x - y).collect();
    Ok(Decomposition {
        none: Estimate::of(&pn),
        info_only: Estimate::of(&pa),
        lookahead_only: Estimate::of(&pl),
        both: Estimate::of(&pb),
        info_premium: Estimate::of(&diff(&pa, &pn)),
        skorokhod: Estimate::of(&diff(&pl, &pn)),
        total: Estimate::of(&diff(&pb, &pn)),
        residual: Estimate::of(&residual),
        info_in_lookahead_only: Estimate::of(&l.iter().map(|p| p.info_premium).collect::<Vec<_>>()),
        skorokhod_in_info_only: Estimate::of(&sk_info),
    })
}

/// Phantom profit of a pure look-ahead strategy over a grid of windows
/// (in steps), with the linear fit of profit on window length in time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LookaheadScan {
    pub windows: Vec<usize>,
    pub window_time: Vec<f64>,
    pub reports: Vec<PhantomReport>,
    pub fit: LinearFit,
}

pub fn lookahead_scan(
    scn: &AuditScenario,
    base: &Strategy,
    gain: f64,
    windows: &[usize],
    n_paths: usize,
    seed: u64,
) -> Result<LookaheadScan, AuditError> {
    let reports = windows
        .iter()
        .map(|&w| phantom_profit(scn, base, &LeakageSpec::Lookahead { window: w, gain }, n_paths, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let window_time: Vec<f64> = windows.iter().map(|&w| w as f64 * scn.dt()).collect();
    let ys: Vec<f64> = reports.iter().map(|r| r.pi_ph.mean).collect();
    Ok(LookaheadScan {
        windows: windows.to_vec(),
        fit: linear_fit(&window_time, &ys),
        window_time,
        reports,
    })
}

/// Cumulant generating function with its first three derivatives.
pub trait Cgf {
    /// `(K, K', K'', K''')` at `t`.
    fn eval(&self, t: f64) -> [f64; 4];
    /// Open interval of attainable `K'` values.
    fn support(&self) -> (f64, f64);
}

#[derive(Debug, Clone, Copy)]
pub struct GaussianCgf {
    pub mean: f64,
    pub var: f64,
}

impl Cgf for GaussianCgf {
    fn eval(&self, t: f64) -> [f64; 4] {
        [self.mean * t + 0.5 * self.var * t * t, self.mean + self.var * t, self.var, 0.0]
    }
    fn support(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
}

/// Empirical cgf `log mean exp(t z)`, evaluated with a max shift.
#[derive(Debug, Clone)]
pub struct EmpiricalCgf {
    samples: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl EmpiricalCgf {
    pub fn new(samples: Vec<f64>) -> Self {
        let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self { samples, lo, hi }
    }
}

impl Cgf for EmpiricalCgf {
    fn eval(&self, t: f64) -> [f64; 4] {
        let shift = self.samples.iter().map(|z| t * z).fold(f64::NEG_INFINITY, f64::max);
        let (mut s0, mut s1) = (0.0, 0.0);
        for &z in &self.samples {
            let w = (t * z - shift).exp();
            s0 += w;
            s1 += w * z;
        }
        let m = s1 / s0;
        let (mut s2, mut s3) = (0.0, 0.0);
        for &z in &self.samples {
            let w = (t * z - shift).exp();
            let d = z - m;
            s2 += w * d * d;
            s3 += w * d * d * d;
        }
        let k = shift + (s0 / self.samples.len() as f64).ln();
        [k, m, s2 / s0, s3 / s0]
    }
    fn support(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
}

/// Lugannani-Rice approximation of `P[Z > x]`; `None` when `x` is outside
/// the attainable range or the saddlepoint cannot be bracketed.
pub fn lugannani_rice_tail(cgf: &dyn Cgf, x: f64) -> Option<f64> {
    let (lo_s, hi_s) = cgf.support();
    if !(x > lo_s && x < hi_s) {
        return None;
    }
    let [_, m0, v0, _] = cgf.eval(0.0);
    if !(v0 > 0.0) {
        return None;
    }
    let scale = 1.0 / v0.sqrt();
    let (mut lo, mut hi) = (-scale, scale);
    let mut found = false;
    for _ in 0..80 {
        let a = cgf.eval(lo)[1];
        let b = cgf.eval(hi)[1];
        if !(a.is_finite() && b.is_finite()) {
            return None;
        }
        if a <= x && x <= b {
            found = true;
            break;
        }
        if a > x {
            lo *= 2.0;
        }
        if b < x {
            hi *= 2.0;
        }
    }
    if !found {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if cgf.eval(mid)[1] < x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    let [k, _, k2, k3] = cgf.eval(t);
    let u = t * k2.sqrt();
    if u.abs() < 1e-5 {
        // limit at the mean
        let skew = k3 / k2.powf(1.5);
        return Some(1.0 - norm_cdf((x - m0) / v0.sqrt()) - skew / (6.0 * (2.0 * std::f64::consts::PI).sqrt()));
    }
    let w = sgn(t) * (2.0 * (t * x - k)).max(0.0).sqrt();
    if w == 0.0 {
        return None;
    }
    let p = 1.0 - norm_cdf(w) + norm_pdf(w) * (1.0 / u - 1.0 / w);
    p.is_finite().then(|| p.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMethod {
    NormalProxy,
    LrKernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasProbability {
    pub prob: f64,
    pub z_eff: f64,
    /// Bins where the saddlepoint failed and the normal proxy was used.
    pub fallback_bins: usize,
}

/// `z_eff = (E Z + E D) / sqrt(Var Z + Var D + 2 Cov)`.
pub fn z_eff(z: &[f64], delta: &[f64]) -> f64 {
    let v = variance(z) + variance(delta) + 2.0 * covariance(z, delta);
    (mean(z) + mean(delta)) / v.sqrt()
}

pub const LR_BINS: usize = 20;

/// `P[Z + D > 0]` by the normal proxy or by the Lugannani-Rice kernel on
/// the empirical cgf of `Z` within equal-mass bins of `D`.
pub fn positive_bias_prob(z: &[f64], delta: &[f64], method: BiasMethod) -> Result<BiasProbability, AuditError> {
    if z.is_empty() || z.len() != delta.len() {
        return Err(AuditError::Invalid("need paired, nonempty samples".into()));
    }
    let ze = z_eff(z, delta);
    match method {
        BiasMethod::NormalProxy => Ok(BiasProbability {
            prob: norm_cdf(ze),
            z_eff: ze,
            fallback_bins: 0,
        }),
        BiasMethod::LrKernel => {
            if z.len() < 2 * LR_BINS {
                return Err(AuditError::Invalid("too few samples for the binned kernel".into()));
            }
            let mut idx: Vec<usize> = (0..z.len()).collect();
            idx.sort_by(|&a, &b| delta[a].total_cmp(&delta[b]));
            let mut total = 0.0;
            let mut fallback = 0;
            for b in 0..LR_BINS {
                let s = b * z.len() / LR_BINS;
                let e = (b + 1) * z.len() / LR_BINS;
                let zs: Vec<f64> = idx[s..e].iter().map(|&i| z[i]).collect();
                let d = mean(&idx[s..e].iter().map(|&i| delta[i]).collect::<Vec<_>>());
                let mz = mean(&zs);
                let vz = variance(&zs);
                let cgf = EmpiricalCgf::new(zs);
                let p = match lugannani_rice_tail(&cgf, -d) {
                    Some(p) => p,
                    None => {
                        log::warn!("saddlepoint bracket failed in bin {b}; using the normal proxy");
                        fallback += 1;
                        if vz > 0.0 {
                            norm_cdf((mz + d) / vz.sqrt())
                        } else if mz + d > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                total += p * (e - s) as f64;
            }
            Ok(BiasProbability {
                prob: total / z.len() as f64,
                z_eff: ze,
                fallback_bins: fallback,
            })
        }
    }
}

/// One row of the per-step SNR experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SnrRow {
    pub snr: f64,
    pub iterations: usize,
    pub z_eff: f64,
    pub p_empirical: f64,
    pub p_normal: f64,
    pub p_lr: f64,
}

/// Self-bias built from `iterations` per-step contributions with unit
/// variance and mean `snr` (centred exponential, so skewed), plus an
/// independent Gaussian remainder of standard deviation `delta_sd`.
pub fn snr_experiment(snr: f64, iterations: usize, delta_sd: f64, n_runs: usize, seed: u64) -> Result<SnrRow, AuditError> {
    let rows: Vec<(f64, f64)> = (0..n_runs as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, Domain::Scenario, r);
            let mut z = 0.0;
            for _ in 0..iterations {
                let u: f64 = 1.0 - rng.random::<f64>();
                z += snr + (-u.ln() - 1.0);
            }
            let mut g = GaussianStream::new(seed, Domain::Perturbation, r, 1);
            let mut d = [0.0];
            g.next_block(&mut d);
            (z, delta_sd * d[0])
        })
        .collect();
    let z: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let d: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let emp = rows.iter().filter(|r| r.0 + r.1 > 0.0).count() as f64 / n_runs as f64;
    let normal = positive_bias_prob(&z, &d, BiasMethod::NormalProxy)?;
    let lr = positive_bias_prob(&z, &d, BiasMethod::LrKernel)?;
    Ok(SnrRow {
        snr,
        iterations,
        z_eff: normal.z_eff,
        p_empirical: emp,
        p_normal: normal.prob,
        p_lr: lr.prob,
    })
}

/// Learning problem whose backtest leaks the innovation over the next
/// `ahead` steps into the signal feature. Policy
/// `phi = theta0 + theta1 (x + leak z)` is held per bar; the reward is the
/// bar PnL minus `1/2 c phi^2` per unit time. Clean and leaky objectives
/// are available in closed form:
///
/// ```text
/// J_clean = n_bars h (theta0 drift - c/2 (theta0^2 + theta1^2))
/// J_leaky = J_clean + n_bars theta1 vol leak sqrt(ahead dt)
///           - n_bars h c/2 theta1^2 leak^2
/// ```
#[derive(Debug, Clone, Copy)]
pub struct LeakyLinearEnv {
    pub scenario: AuditScenario,
    pub inventory_quad: f64,
    pub past: usize,
    pub leak: f64,
    pub ahead: usize,
    /// Standard deviation of additive gradient noise, shared by the clean
    /// and implemented gradients.
    pub noise_sd: f64,
}

impl LeakyLinearEnv {
    fn bar_len(&self) -> f64 {
        self.scenario.bar_steps as f64 * self.scenario.dt()
    }

    pub fn clean_gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let nb = self.scenario.n_bars() as f64;
        let h = self.bar_len();
        let c = self.inventory_quad;
        DVector::from_vec(vec![
            nb * h * (self.scenario.drift - c * theta[0]),
            -nb * h * c * theta[1],
        ])
    }

    /// `grad J_leaky - grad J_clean`.
    pub fn contamination(&self, theta: &DVector<f64>) -> DVector<f64> {
        let nb = self.scenario.n_bars() as f64;
        let h = self.bar_len();
        let a = (self.ahead.min(self.scenario.bar_steps) as f64 * self.scenario.dt()).sqrt();
        DVector::from_vec(vec![
            0.0,
            nb * (self.scenario.vol * self.leak * a - h * self.inventory_quad * self.leak * self.leak * theta[1]),
        ])
    }

    /// Analytic phantom profit of the leaky policy, linear in `theta1`.
    pub fn phantom(&self, theta: &DVector<f64>) -> f64 {
        let nb = self.scenario.n_bars() as f64;
        let a = (self.ahead.min(self.scenario.bar_steps) as f64 * self.scenario.dt()).sqrt();
        nb * theta[1] * self.scenario.vol * self.leak * a
    }

    pub fn strategy(&self, theta: &DVector<f64>, leaky: bool) -> Strategy {
        Strategy::Linear {
            theta0: theta[0],
            theta1: theta[1],
            past: self.past,
            leak: if leaky { self.leak } else { 0.0 },
            ahead: self.ahead,
        }
    }
}

impl PolicyEnvironment for LeakyLinearEnv {
    fn dim(&self) -> usize {
        2
    }
    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let nb = self.scenario.n_bars() as f64;
        let h = self.bar_len();
        nb * h * (theta[0] * self.scenario.drift - 0.5 * self.inventory_quad * (theta[0] * theta[0] + theta[1] * theta[1]))
    }
    fn optimal_value(&self) -> Option<f64> {
        let nb = self.scenario.n_bars() as f64;
        Some(nb * self.bar_len() * 0.5 * self.scenario.drift * self.scenario.drift / self.inventory_quad)
    }
    fn exact_gradient(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        Some(self.clean_gradient(theta))
    }
    fn gradient_sample(
        &self,
        theta: &DVector<f64>,
        method: GradientMethod,
        rng: &mut ChaCha8Rng,
    ) -> Result<GradientSample, RlError> {
        if method != GradientMethod::Pathwise {
            return Err(RlError::Unsupported(method));
        }
        let mut naive = self.clean_gradient(theta);
        if self.noise_sd > 0.0 {
            for g in naive.iter_mut() {
                let u1: f64 = 1.0 - rng.random::<f64>();
                let u2: f64 = rng.random::<f64>();
                *g += self.noise_sd * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            }
        }
        let implemented = &naive + self.contamination(theta);
        Ok(GradientSample { naive, implemented })
    }
}

/// Self-bias of a contaminated run next to the Monte Carlo phantom profit
/// of the policy it produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SelfBiasCheck {
    pub leak: f64,
    pub self_bias: f64,
    pub phantom: Estimate,
    pub phantom_analytic: f64,
    pub ratio: f64,
}

pub fn self_bias_check(
    env: &LeakyLinearEnv,
    iterations: usize,
    eta: f64,
    n_paths: usize,
    seed: u64,
) -> Result<SelfBiasCheck, AuditError> {
    let mut cfg = TrainConfig::plain(iterations, StepSchedule::Constant { eta });
    cfg.contamination = Contamination::Environment;
    let theta0 = DVector::zeros(2);
    let trace = train(env, &theta0, &cfg, seed)?;
    let theta = trace.final_theta();
    let audits = audit_paths(&env.scenario, &env.strategy(theta, true), &[], n_paths, seed)?;
    let ph = Estimate::of(&audits.iter().map(|a| a.phantom).collect::<Vec<_>>());
    let sb = trace.total_self_bias();
    Ok(SelfBiasCheck {
        leak: env.leak,
        self_bias: sb,
        phantom: ph,
        phantom_analytic: env.phantom(theta) - env.phantom(&theta0),
        ratio: sb / ph.mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolutionBiasReport {
    /// Mean paired wealth difference, implemented minus clean policy.
    pub b_sol: Estimate,
    pub info_premium: f64,
    /// Phantom profit of the implemented policy.
    pub skorokhod: Estimate,
    /// `eta sum <C, b_k>`.
    pub z: f64,
    /// Base mismatch between the two runs' clean-gradient projections.
    pub m: f64,
    /// `I + S + M`.
    pub delta: f64,
}

/// Decompose the solution bias between a contaminated and a clean training
/// run of the same environment. `cost_weights` is the vector `C`.
pub fn solution_bias(
    env: &LeakyLinearEnv,
    implemented: &TrainTrace,
    clean: &TrainTrace,
    cost_weights: &DVector<f64>,
    n_paths: usize,
    seed: u64,
) -> Result<SolutionBiasReport, AuditError> {
    if cost_weights.len() != env.dim() || implemented.final_theta().len() != env.dim() || clean.final_theta().len() != env.dim() {
        return Err(AuditError::Mismatch("parameter dimensions differ".into()));
    }
    if implemented.thetas[0] != clean.thetas[0] {
        return Err(AuditError::Mismatch("runs start from different parameters".into()));
    }
    let imp = env.strategy(implemented.final_theta(), true);
    let cln = env.strategy(clean.final_theta(), false);
    let a = audit_paths(&env.scenario, &imp, &[], n_paths, seed)?;
    let b = audit_paths(&env.scenario, &cln, &[], n_paths, seed)?;
    let dt = env.scenario.dt();
    let c = env.inventory_quad;
    let bar = env.scenario.bar_steps as f64 * dt;
    // quadratic holding cost per bar, recomputed from the same paths
    let cost = |s: &Strategy, i: u64| -> f64 {
        let p = AuditPath::generate(&env.scenario, seed, i, None);
        (0..env.scenario.n_bars())
            .map(|k| {
                let phi = s.position(&p, k * env.scenario.bar_steps, env.scenario.vol);
                0.5 * c * phi * phi * bar
            })
            .sum()
    };
    let diffs: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let wa = a[i].phantom + a[i].baseline - cost(&imp, i as u64);
            let wb = b[i].phantom + b[i].baseline - cost(&cln, i as u64);
            wa - wb
        })
        .collect();
    let z: f64 = implemented
        .biases
        .iter()
        .zip(&implemented.etas)
        .map(|(bk, eta)| eta * cost_weights.dot(bk))
        .sum();
    let proj = |t: &TrainTrace| -> f64 {
        t.naive_grads
            .iter()
            .zip(&t.etas)
            .map(|(g, eta)| eta * cost_weights.dot(g))
            .sum()
    };
    let m = proj(implemented) - proj(clean);
    let sk = Estimate::of(&a.iter().map(|p| p.phantom).collect::<Vec<_>>());
    Ok(SolutionBiasReport {
        b_sol: Estimate::of(&diffs),
        info_premium: 0.0,
        skorokhod: sk,
        z,
        m,
        delta: sk.mean + m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adapted_strategies_have_no_info_or_lookahead_terms() {
        let scn = AuditScenario::default();
        let s = Strategy::Momentum { gain: 1.0, window: 64 };
        let r = phantom_profit(&scn, &s, &LeakageSpec::None, 2000, 1).unwrap();
        assert!(r.pi_ph.mean.abs() < 4.0 * r.pi_ph.se);
        assert!(r.info_premium.is_none());
    }

    #[test]
    fn info_premium_matches_hand_integral() {
        let scn = AuditScenario::default();
        let alpha = 0.4;
        let gain = 2.0;
        let r = phantom_profit(
            &scn,
            &Strategy::Constant { position: 0.0 },
            &LeakageSpec::InfoDrift { alpha, gain },
            4000,
            2,
        )
        .unwrap();
        // phi = gain vol alpha xi, so <phi, vol alpha xi> = gain (vol alpha)^2
        let hand = gain * (scn.vol * alpha).powi(2) * scn.horizon;
        let ip = r.info_premium.unwrap();
        assert!((ip.mean - hand).abs() < 1e-12);
        assert!((r.pi_ph.mean - hand).abs() < 3.0 * r.pi_ph.se);
    }

    #[test]
    fn gaussian_cgf_saddlepoint_is_exact() {
        for &(m, v, x) in &[(0.3, 1.0, 0.0), (-0.5, 2.0, 0.0), (0.0, 1.0, 1.2)] {
            let p = lugannani_rice_tail(&GaussianCgf { mean: m, var: v }, x).unwrap();
            let exact = 1.0 - norm_cdf((x - m) / f64::sqrt(v));
            assert!((p - exact).abs() < 1e-9, "{p} vs {exact}");
        }
    }

    #[test]
    fn exponential_tail_saddlepoint() {
        // sum of 10 unit exponentials: gamma(10), P[S > 15] = 0.06985...
        struct Gamma;
        impl Cgf for Gamma {
            fn eval(&self, t: f64) -> [f64; 4] {
                let k = 10.0;
                [-k * (1.0 - t).ln(), k / (1.0 - t), k / (1.0 - t).powi(2), 2.0 * k / (1.0 - t).powi(3)]
            }
            fn support(&self) -> (f64, f64) {
                (0.0, f64::INFINITY)
            }
        }
        let p = lugannani_rice_tail(&Gamma, 15.0).unwrap();
        assert!((p - 0.069_853_4).abs() < 1e-3, "{p}");
    }

    #[test]
    fn bracket_failure_falls_back() {
        let z = vec![1.0; 100];
        let d = vec![0.0; 100];
        let r = positive_bias_prob(&z, &d, BiasMethod::LrKernel).unwrap();
        assert_eq!(r.fallback_bins, LR_BINS);
        assert_eq!(r.prob, 1.0);
    }

    #[test]
    fn identical_clean_runs_have_zero_solution_bias() {
        let env = LeakyLinearEnv {
            scenario: AuditScenario::default(),
            inventory_quad: 1.0,
            past: 64,
            leak: 0.0,
            ahead: 16,
            noise_sd: 0.1,
        };
        let cfg = TrainConfig::plain(20, StepSchedule::Constant { eta: 0.05 });
        let t = train(&env, &DVector::zeros(2), &cfg, 4).unwrap();
        let r = solution_bias(&env, &t, &t, &DVector::from_vec(vec![1.0, 1.0]), 200, 4).unwrap();
        assert_eq!(r.b_sol.mean, 0.0);
        assert_eq!(r.m, 0.0);
    }
}
