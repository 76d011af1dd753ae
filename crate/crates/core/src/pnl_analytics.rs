//! PnL analytics: reduced Hamiltonians, drift/martingale split,
//! distribution features, and paired MO-versus-perturbed dominance tests.

use crate::frictions::{sample_maker_fills, FrictionError, MakerModel, Quotes, Side};
use crate::ledger::{step_maker, step_taker, CarryRates, HoldingCostModel, LedgerError, LedgerState, TakerStep};
use crate::mo_controller::SeparableGain;
use crate::numeric::{fd_step, norm_sf};
use crate::risk::{cantelli_bounds, cvar_ru, gaussian_tail_proxy, RiskError, TailSample};
use crate::rl_controller::{train, GradientMethod, GradientSample, PolicyEnvironment, RlError, StepSchedule, TrainConfig};
use crate::rng::{stream, Domain, GaussianStream, UniformStream};
use crate::stats::{bootstrap_stats, covariance, mean, sorted_quantile, std_error, variance, Estimate};
use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnlError {
    #[error("need at least {need} paths, got {got}")]
    TooFewPaths { need: usize, got: usize },
    #[error("unpaired samples: {0} vs {1}")]
    Unpaired(usize, usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Friction(#[from] FrictionError),
    #[error(transparent)]
    Rl(#[from] RlError),
}

pub const MIN_PATHS: usize = 100;

/// Mode-specific part of the cash-gain kernel.
#[derive(Debug, Clone)]
pub enum HamiltonianTerms {
    Taker {
        speed: DVector<f64>,
        exec_price: DVector<f64>,
    },
    /// Absolute quote prices and the fill intensities they imply.
    Maker {
        bid: DVector<f64>,
        ask: DVector<f64>,
        bid_intensity: DVector<f64>,
        ask_intensity: DVector<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct ReducedHamiltonianInput {
    pub terms: HamiltonianTerms,
    pub position: DVector<f64>,
    /// Drift of the liquidation price.
    pub drift: DVector<f64>,
    /// Price sensitivity to the noise, `N x d`.
    pub sensitivity: DMatrix<f64>,
    pub kappa: f64,
    pub liq_price: DVector<f64>,
    pub mid: DVector<f64>,
    pub cash: f64,
    pub rates: CarryRates,
    pub holding: HoldingCostModel,
}

impl ReducedHamiltonianInput {
    /// `u = Sigma^T phi`.
    pub fn exposure(&self) -> DVector<f64> {
        self.sensitivity.transpose() * &self.position
    }

    fn validate(&self) -> Result<(), PnlError> {
        let n = self.position.len();
        let ok = self.drift.len() == n
            && self.sensitivity.nrows() == n
            && self.liq_price.len() == n
            && self.mid.len() == n
            && match &self.terms {
                HamiltonianTerms::Taker { speed, exec_price } => speed.len() == n && exec_price.len() == n,
                HamiltonianTerms::Maker {
                    bid,
                    ask,
                    bid_intensity,
                    ask_intensity,
                } => bid.len() == n && ask.len() == n && bid_intensity.len() == n && ask_intensity.len() == n,
            };
        if !ok {
            return Err(PnlError::Dimension("reduced Hamiltonian inputs".into()));
        }
        if !self.kappa.is_finite() {
            return Err(PnlError::Invalid("kappa must be finite".into()));
        }
        Ok(())
    }
}

/// Evaluate the mode-specific cash-gain kernel term by term.
pub fn reduced_hamiltonian(input: &ReducedHamiltonianInput) -> Result<f64, PnlError> {
    input.validate()?;
    let common = input.position.dot(&input.drift) + 0.5 * input.kappa
        - input.holding.cost(&input.position, &input.mid)
        + input.rates.carry(input.cash);
    let specific = match &input.terms {
        HamiltonianTerms::Taker { speed, exec_price } => {
            let traded: f64 = speed.iter().zip(input.mid.iter()).map(|(v, m)| v.abs() * m).sum();
            (&input.liq_price - exec_price).dot(speed) - input.rates.tax * traded
        }
        HamiltonianTerms::Maker {
            bid,
            ask,
            bid_intensity,
            ask_intensity,
        } => {
            let mut s = 0.0;
            for i in 0..input.position.len() {
                let p = input.liq_price[i];
                s += (p - bid[i]) * bid_intensity[i] - (p - ask[i]) * ask_intensity[i]
                    - input.rates.tax * input.mid[i] * (bid_intensity[i] + ask_intensity[i]);
            }
            s
        }
    };
    Ok(common + specific)
}

/// `kappa = Tr((D_y u) V R)` with the exposure Jacobian taken by central
/// differences in the state.
pub fn kappa_fd<F: Fn(&[f64]) -> DVector<f64>>(
    exposure: F,
    state: &[f64],
    diffusion: &DMatrix<f64>,
    correlation: &DMatrix<f64>,
) -> f64 {
    let m = state.len();
    let d = diffusion.ncols();
    let mut jac = DMatrix::zeros(d, m);
    let mut y = state.to_vec();
    for j in 0..m {
        let h = fd_step(state[j]);
        y[j] = state[j] + h;
        let up = exposure(&y);
        y[j] = state[j] - h;
        let dn = exposure(&y);
        y[j] = state[j];
        for i in 0..d {
            jac[(i, j)] = (up[i] - dn[i]) / (2.0 * h);
        }
    }
    (jac * diffusion * correlation).trace()
}

/// Central-difference gradient of the separable one-step objective in the
/// speed; zero at an interior myopic optimum.
pub fn hamiltonian_action_derivative(
    gain: &SeparableGain,
    position: &DVector<f64>,
    risk_price: &DVector<f64>,
    speed: &DVector<f64>,
) -> DVector<f64> {
    let drive = gain.drive(position, risk_price);
    let mut g = DVector::zeros(speed.len());
    let mut v = speed.clone();
    for i in 0..speed.len() {
        let h = fd_step(speed[i]) * 1e-2;
        v[i] = speed[i] + h;
        let up = gain.objective(&drive, &v);
        v[i] = speed[i] - h;
        let dn = gain.objective(&drive, &v);
        v[i] = speed[i];
        g[i] = (up - dn) / (2.0 * h);
    }
    g
}

/// Fill activity over one maker step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpRecord {
    pub bid_count: f64,
    pub ask_count: f64,
    pub bid_intensity: f64,
    pub ask_intensity: f64,
    /// `P_liq - b`.
    pub bid_edge: f64,
    /// `a - P_liq`.
    pub ask_edge: f64,
    /// `tax * mid`.
    pub tax_mid: f64,
}

impl JumpRecord {
    pub fn compensated(&self, dt: f64) -> f64 {
        let db = self.bid_count - self.bid_intensity * dt;
        let da = self.ask_count - self.ask_intensity * dt;
        self.bid_edge * db + self.ask_edge * da - self.tax_mid * (db + da)
    }
}

/// Per-path inputs of the split: PnL increments and kernel rates per step.
#[derive(Debug, Clone, Default)]
pub struct PathSplitInput {
    pub increments: Vec<f64>,
    pub gains: Vec<f64>,
    pub jumps: Option<Vec<JumpRecord>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitReport {
    pub drift: Estimate,
    pub martingale: Estimate,
    pub compensated_jumps: Option<Estimate>,
}

/// `Delta X = int g ds + M`, per path, summarised across paths.
pub fn semimartingale_split(paths: &[PathSplitInput], dt: f64) -> Result<SplitReport, PnlError> {
    if paths.is_empty() {
        return Err(PnlError::TooFewPaths { need: 1, got: 0 });
    }
    let mut drift = Vec::with_capacity(paths.len());
    let mut mart = Vec::with_capacity(paths.len());
    let mut jumps = Vec::new();
    let has_jumps = paths[0].jumps.is_some();
    for p in paths {
        if p.increments.len() != p.gains.len() {
            return Err(PnlError::Dimension("increments and gains".into()));
        }
        let d: f64 = p.gains.iter().sum::<f64>() * dt;
        drift.push(d);
        mart.push(p.increments.iter().sum::<f64>() - d);
        match (&p.jumps, has_jumps) {
            (Some(j), true) => jumps.push(j.iter().map(|r| r.compensated(dt)).sum()),
            (None, false) => {}
            _ => return Err(PnlError::Invalid("jump records on some paths only".into())),
        }
    }
    Ok(SplitReport {
        drift: Estimate::of(&drift),
        martingale: Estimate::of(&mart),
        compensated_jumps: has_jumps.then(|| Estimate::of(&jumps)),
    })
}

/// Point estimate with bootstrap standard error and 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Feature {
    pub value: f64,
    pub se: f64,
    pub ci: (f64, f64),
}

impl Feature {
    fn from_boot(value: f64, reps: &[f64]) -> Self {
        Self {
            value,
            se: variance(reps).max(0.0).sqrt(),
            ci: (sorted_quantile(reps, 0.025), sorted_quantile(reps, 0.975)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PnlDistribution {
    pub n_paths: usize,
    pub alpha: f64,
    pub mean: Feature,
    pub variance: Feature,
    /// CVaR of the loss `-pnl`.
    pub cvar_loss: Feature,
    /// Frequency of `pnl >= 0`.
    pub p_positive: Feature,
    pub gaussian_var_loss: f64,
    pub gaussian_cvar_loss: f64,
    pub cantelli_lower: f64,
    pub cantelli_upper: f64,
}

fn frac_nonneg(xs: &[f64]) -> f64 {
    xs.iter().filter(|&&x| x >= 0.0).count() as f64 / xs.len() as f64
}

fn cvar_of_pnl(xs: &[f64], alpha: f64) -> f64 {
    let losses: Vec<f64> = xs.iter().map(|x| -x).collect();
    cvar_ru(&losses, None, alpha).unwrap_or(f64::NAN)
}

/// Empirical features of terminal or incremental PnL with bootstrap
/// uncertainty (`resamples` replicates).
pub fn distribution_features(
    pnl: &[f64],
    alpha: f64,
    resamples: usize,
    seed: u64,
) -> Result<PnlDistribution, PnlError> {
    if pnl.len() < MIN_PATHS {
        return Err(PnlError::TooFewPaths {
            need: MIN_PATHS,
            got: pnl.len(),
        });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PnlError::Risk(RiskError::Level(alpha)));
    }
    let m = mean(pnl);
    let v = variance(pnl);
    let cv = cvar_of_pnl(pnl, alpha);
    let pp = frac_nonneg(pnl);
    let mut rng = stream(seed, Domain::Bootstrap, 0);
    let boot_mean = bootstrap_stats(pnl, mean, resamples, &mut rng);
    let boot_var = bootstrap_stats(pnl, variance, resamples, &mut rng);
    let boot_cvar = bootstrap_stats(pnl, |x| cvar_of_pnl(x, alpha), resamples, &mut rng);
    let boot_pp = bootstrap_stats(pnl, frac_nonneg, resamples, &mut rng);
    let sd = v.max(0.0).sqrt();
    let (gvar, gcvar) = gaussian_tail_proxy(-m, sd, alpha)?;
    let (lo, hi) = cantelli_bounds(m, sd);
    Ok(PnlDistribution {
        n_paths: pnl.len(),
        alpha,
        mean: Feature::from_boot(m, &boot_mean),
        variance: Feature::from_boot(v, &boot_var),
        cvar_loss: Feature::from_boot(cv, &boot_cvar),
        p_positive: Feature::from_boot(pp, &boot_pp),
        gaussian_var_loss: gvar,
        gaussian_cvar_loss: gcvar,
        cantelli_lower: lo,
        cantelli_upper: hi,
    })
}

/// Mean-zero perturbation of the myopic exposure: Gaussian with total
/// variance `floor = E||eps||^2`, optionally smoothed as a normalised moving
/// sum over `lag` draws (variance unchanged, serially correlated).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub floor: f64,
    #[serde(default = "one")]
    pub lag: usize,
}

fn one() -> usize {
    1
}

impl PerturbationSpec {
    pub fn gaussian(floor: f64) -> Self {
        Self { floor, lag: 1 }
    }

    pub fn validate(&self) -> Result<(), PnlError> {
        if !(self.floor >= 0.0 && self.floor.is_finite()) || self.lag == 0 {
            return Err(PnlError::Invalid("perturbation floor must be >= 0 and lag >= 1".into()));
        }
        Ok(())
    }
}

/// Stream of perturbation vectors for one path.
pub struct PerturbationGen {
    sd: f64,
    lag: usize,
    width: usize,
    gauss: GaussianStream,
    history: Vec<f64>,
    draw: Vec<f64>,
    head: usize,
}

impl PerturbationGen {
    pub fn new(spec: &PerturbationSpec, width: usize, seed: u64, path: u64) -> Self {
        Self {
            sd: (spec.floor / width as f64).sqrt(),
            lag: spec.lag,
            width,
            gauss: GaussianStream::new(seed, Domain::Perturbation, path, width),
            history: vec![0.0; width * spec.lag],
            draw: vec![0.0; width],
            head: 0,
        }
    }

    /// Draw the next perturbation. The first `lag - 1` draws of a smoothed
    /// stream are warmed up on construction of the history.
    pub fn next(&mut self, out: &mut [f64]) {
        if self.lag == 1 {
            self.gauss.next_block(out);
            for o in out.iter_mut() {
                *o *= self.sd;
            }
            return;
        }
        if self.head == 0 {
            for k in 0..self.lag - 1 {
                self.gauss.next_block(&mut self.draw);
                self.history[k * self.width..(k + 1) * self.width].copy_from_slice(&self.draw);
            }
            self.head = self.lag - 1;
        }
        self.gauss.next_block(&mut self.draw);
        let slot = self.head % self.lag;
        self.history[slot * self.width..(slot + 1) * self.width].copy_from_slice(&self.draw);
        self.head += 1;
        let scale = self.sd / (self.lag as f64).sqrt();
        for (i, o) in out.iter_mut().enumerate() {
            *o = scale * (0..self.lag).map(|k| self.history[k * self.width + i]).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DominancePValues {
    pub mean: f64,
    pub variance: f64,
    pub cvar: f64,
    pub positivity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DominanceFlags {
    pub mean: bool,
    pub variance: bool,
    pub cvar: bool,
    pub positivity: bool,
}

impl DominanceFlags {
    pub fn all(&self) -> bool {
        self.mean && self.variance && self.cvar && self.positivity
    }
}

/// Paired comparison. Gaps are oriented so that positive favours MO:
/// `mean_gap = E[MO] - E[RL]`, `var_gap = Var RL - Var MO`,
/// `cvar_gap = CVaR RL - CVaR MO` (losses), `ppos_gap` the difference of
/// Cantelli lower bounds, MO minus RL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DominanceReport {
    pub n_paths: usize,
    pub alpha: f64,
    pub mean_gap: f64,
    pub mean_gap_se: f64,
    pub var_gap: f64,
    pub cvar_gap: f64,
    pub cvar_gap_se: f64,
    pub ppos_gap: f64,
    pub ppos_gap_se: f64,
    /// Difference of empirical positivity frequencies, MO minus RL.
    pub ppos_freq_gap: f64,
    /// Difference of Gaussian-proxy CVaRs, RL minus MO.
    pub proxy_cvar_gap: f64,
    pub p_values: DominancePValues,
    pub flags: DominanceFlags,
    pub predicted_mean_gap: f64,
    pub vacuous: bool,
}

fn one_sided_p(gap: f64, se: f64) -> f64 {
    if se > 0.0 {
        norm_sf(gap / se)
    } else if gap > 0.0 {
        0.0
    } else {
        1.0
    }
}

/// Influence values of empirical CVaR of the loss `-x` at level `alpha`.
fn cvar_influence(pnl: &[f64], alpha: f64) -> Result<(f64, Vec<f64>), PnlError> {
    let losses: Vec<f64> = pnl.iter().map(|x| -x).collect();
    let tail = TailSample::new(&losses, None)?;
    let var = tail.var(alpha)?;
    let cvar = tail.cvar(alpha)?;
    let inf = losses
        .iter()
        .map(|l| var + (l - var).max(0.0) / (1.0 - alpha) - cvar)
        .collect();
    Ok((cvar, inf))
}

/// Cantelli lower bound `mu^2 / (v + mu^2)` for `mu > 0` and its influence
/// values by the delta method.
fn cantelli_influence(pnl: &[f64]) -> (f64, Vec<f64>) {
    let m = mean(pnl);
    let v = variance(pnl);
    if m <= 0.0 {
        return (0.0, vec![0.0; pnl.len()]);
    }
    let den = v + m * m;
    let h = m * m / den;
    let dh_dm = 2.0 * m * v / (den * den);
    let dh_dv = -m * m / (den * den);
    let inf = pnl
        .iter()
        .map(|x| dh_dm * (x - m) + dh_dv * ((x - m) * (x - m) - v))
        .collect();
    (h, inf)
}

/// Four paired dominance tests of MO over its perturbation. `mu` is the
/// strong concavity of the kernel in the perturbed coordinates and
/// `horizon` the integration length for the predicted mean gap.
pub fn dominance_report(
    mo: &[f64],
    rl: &[f64],
    perturbation: &PerturbationSpec,
    mu: f64,
    horizon: f64,
    alpha: f64,
    level: f64,
) -> Result<DominanceReport, PnlError> {
    if mo.len() != rl.len() {
        return Err(PnlError::Unpaired(mo.len(), rl.len()));
    }
    if mo.len() < MIN_PATHS {
        return Err(PnlError::TooFewPaths {
            need: MIN_PATHS,
            got: mo.len(),
        });
    }
    perturbation.validate()?;
    let n = mo.len();
    let diff: Vec<f64> = mo.iter().zip(rl).map(|(a, b)| a - b).collect();
    let mean_gap = mean(&diff);
    let mean_gap_se = std_error(&diff);

    // Pitman-Morgan: Var RL - Var MO = Cov(RL + MO, RL - MO)
    let sum: Vec<f64> = mo.iter().zip(rl).map(|(a, b)| a + b).collect();
    let dr: Vec<f64> = rl.iter().zip(mo).map(|(a, b)| a - b).collect();
    let var_gap = covariance(&sum, &dr);
    let (vs, vd) = (variance(&sum), variance(&dr));
    let p_var = if vs > 0.0 && vd > 0.0 {
        let r = (var_gap / (vs * vd).sqrt()).clamp(-1.0, 1.0);
        if r >= 1.0 {
            0.0
        } else {
            norm_sf(r * ((n - 2) as f64).sqrt() / (1.0 - r * r).sqrt())
        }
    } else {
        one_sided_p(var_gap, 0.0)
    };

    let (cvar_mo, if_mo) = cvar_influence(mo, alpha)?;
    let (cvar_rl, if_rl) = cvar_influence(rl, alpha)?;
    let cvar_gap = cvar_rl - cvar_mo;
    let d_cvar: Vec<f64> = if_rl.iter().zip(&if_mo).map(|(a, b)| a - b).collect();
    let cvar_gap_se = std_error(&d_cvar);

    let (h_mo, ih_mo) = cantelli_influence(mo);
    let (h_rl, ih_rl) = cantelli_influence(rl);
    let ppos_gap = h_mo - h_rl;
    let d_h: Vec<f64> = ih_mo.iter().zip(&ih_rl).map(|(a, b)| a - b).collect();
    let ppos_gap_se = std_error(&d_h);

    let (_, proxy_mo) = gaussian_tail_proxy(-mean(mo), variance(mo).sqrt(), alpha)?;
    let (_, proxy_rl) = gaussian_tail_proxy(-mean(rl), variance(rl).sqrt(), alpha)?;

    let p_values = DominancePValues {
        mean: one_sided_p(mean_gap, mean_gap_se),
        variance: p_var,
        cvar: one_sided_p(cvar_gap, cvar_gap_se),
        positivity: one_sided_p(ppos_gap, ppos_gap_se),
    };
    let vacuous = perturbation.floor == 0.0;
    let flags = DominanceFlags {
        mean: !vacuous && mean_gap > 0.0 && p_values.mean < level,
        variance: !vacuous && var_gap > 0.0 && p_values.variance < level,
        cvar: !vacuous && cvar_gap > 0.0 && p_values.cvar < level,
        positivity: !vacuous && ppos_gap > 0.0 && p_values.positivity < level,
    };
    Ok(DominanceReport {
        n_paths: n,
        alpha,
        mean_gap,
        mean_gap_se,
        var_gap,
        cvar_gap,
        cvar_gap_se,
        ppos_gap,
        ppos_gap_se,
        ppos_freq_gap: frac_nonneg(mo) - frac_nonneg(rl),
        proxy_cvar_gap: proxy_rl - proxy_mo,
        p_values,
        flags,
        predicted_mean_gap: 0.5 * mu * perturbation.floor * horizon,
        vacuous,
    })
}

/// Frictionless single-asset taker with quadratic inventory cost:
/// `dm = drift dt + vol dB`, `HC = 1/2 c phi^2`, marked at mid. The kernel
/// `g(phi) = drift phi - 1/2 c phi^2` is maximised at `drift / c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticScenario {
    pub mid0: f64,
    pub drift: f64,
    pub vol: f64,
    pub inventory_quad: f64,
    pub horizon: f64,
    pub n_steps: usize,
}

impl Default for QuadraticScenario {
    fn default() -> Self {
        Self {
            mid0: 100.0,
            drift: 0.5,
            vol: 0.5,
            inventory_quad: 1.0,
            horizon: 1.0,
            n_steps: 50,
        }
    }
}

impl QuadraticScenario {
    pub fn mo_target(&self) -> f64 {
        self.drift / self.inventory_quad
    }

    pub fn strong_concavity(&self) -> f64 {
        self.inventory_quad
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Horizon over which the perturbed position is charged: the position
    /// set at the last decision is never held.
    pub fn charged_horizon(&self) -> f64 {
        self.dt() * (self.n_steps - 1) as f64
    }

    /// Terminal wealth of one path holding `target + eps_k` over step `k`.
    pub fn run_path(&self, seed: u64, path: u64, target: f64, perturbation: Option<&PerturbationSpec>) -> Result<f64, PnlError> {
        let dt = self.dt();
        let sq = dt.sqrt();
        let holding = HoldingCostModel {
            inventory_quad: self.inventory_quad,
            ..Default::default()
        };
        let rates = CarryRates::default();
        let mut gauss = GaussianStream::new(seed, Domain::Brownian, path, 1);
        let mut pert = perturbation.map(|p| PerturbationGen::new(p, 1, seed, path));
        let mut z = [0.0];
        let mut eps = [0.0];
        let mut state = LedgerState::new(0.0, 0.0, DVector::zeros(1), DVector::from_element(1, self.mid0));
        let mut mid = self.mid0;
        for _ in 0..self.n_steps {
            gauss.next_block(&mut z);
            if let Some(g) = pert.as_mut() {
                g.next(&mut eps);
            }
            let next_mid = mid + self.drift * dt + self.vol * sq * z[0];
            let speed = DVector::from_element(1, (target + eps[0] - state.position[0]) / dt);
            let m = DVector::from_element(1, mid);
            let nm = DVector::from_element(1, next_mid);
            step_taker(
                &mut state,
                &TakerStep {
                    exec_price: &m,
                    speed: &speed,
                    mid: &m,
                    new_liq_price: &nm,
                },
                &rates,
                &holding,
                dt,
            )?;
            mid = next_mid;
        }
        Ok(state.wealth)
    }

    /// Terminal wealth for paths `first..first + n`, in path order.
    pub fn simulate(
        &self,
        seed: u64,
        first: u64,
        n: usize,
        target: f64,
        perturbation: Option<&PerturbationSpec>,
    ) -> Result<Vec<f64>, PnlError> {
        (0..n as u64)
            .into_par_iter()
            .map(|i| self.run_path(seed, first + i, target, perturbation))
            .collect()
    }
}

/// Single-asset maker with exponential fill intensity `A exp(-k delta)`
/// quoting symmetric offsets around an arithmetic Brownian mid. The
/// per-side spread capture `delta A exp(-k delta)` peaks at `1 / k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MakerScenario {
    pub mid0: f64,
    pub vol: f64,
    pub intensity: f64,
    pub decay: f64,
    pub horizon: f64,
    pub n_steps: usize,
}

impl Default for MakerScenario {
    fn default() -> Self {
        Self {
            mid0: 100.0,
            vol: 1.0,
            intensity: 10.0,
            decay: 10.0,
            horizon: 1.0,
            n_steps: 100,
        }
    }
}

impl MakerScenario {
    pub fn mo_offset(&self) -> f64 {
        1.0 / self.decay
    }

    /// Curvature of the per-side capture at its peak, `k A / e`.
    pub fn strong_concavity(&self) -> f64 {
        self.decay * self.intensity * (-1.0f64).exp()
    }

    fn model(&self) -> MakerModel {
        MakerModel::symmetric(self.intensity, self.decay, 50.0 / self.decay)
    }

    /// Terminal wealth of one path; quotes sit at `1/k + eps` per side,
    /// floored at zero offset.
    pub fn run_path(&self, seed: u64, path: u64, perturbation: Option<&PerturbationSpec>) -> Result<f64, PnlError> {
        self.run_path_split(seed, path, perturbation).map(|(w, _)| w)
    }

    /// Terminal wealth plus the split inputs (per-step increments, kernel
    /// rates and fill records).
    pub fn run_path_split(
        &self,
        seed: u64,
        path: u64,
        perturbation: Option<&PerturbationSpec>,
    ) -> Result<(f64, PathSplitInput), PnlError> {
        let dt = self.horizon / self.n_steps as f64;
        let sq = dt.sqrt();
        let model = self.model();
        let rates = CarryRates::default();
        let holding = HoldingCostModel::default();
        let mut gauss = GaussianStream::new(seed, Domain::Brownian, path, 1);
        let mut unif = UniformStream::new(seed, Domain::Fills, path);
        let mut pert = perturbation.map(|p| PerturbationGen::new(p, 2, seed, path));
        let mut z = [0.0];
        let mut eps = [0.0, 0.0];
        let mut state = LedgerState::new(0.0, 0.0, DVector::zeros(1), DVector::from_element(1, self.mid0));
        let mut mid = self.mid0;
        let mut split = PathSplitInput {
            increments: Vec::with_capacity(self.n_steps),
            gains: Vec::with_capacity(self.n_steps),
            jumps: Some(Vec::with_capacity(self.n_steps)),
        };
        let delta = self.mo_offset();
        for _ in 0..self.n_steps {
            gauss.next_block(&mut z);
            if let Some(g) = pert.as_mut() {
                g.next(&mut eps);
            }
            let ub = unif.next();
            let ua = unif.next();
            let quotes = Quotes {
                bid: -(delta + eps[0]).max(0.0),
                ask: (delta + eps[1]).max(0.0),
            };
            let fills = sample_maker_fills(&model, mid, &quotes, dt, ub, ua)?;
            let next_mid = mid + self.vol * sq * z[0];
            let lb = model.intensity(Side::Bid, quotes.bid);
            let la = model.intensity(Side::Ask, quotes.ask);
            let before = state.wealth;
            step_maker(&mut state, &fills, mid, next_mid, &rates, &holding, false, dt)?;
            split.increments.push(state.wealth - before);
            split.gains.push(-quotes.bid * lb + quotes.ask * la);
            if let Some(j) = split.jumps.as_mut() {
                j.push(JumpRecord {
                    bid_count: fills.bid_count as f64,
                    ask_count: fills.ask_count as f64,
                    bid_intensity: lb,
                    ask_intensity: la,
                    bid_edge: -quotes.bid,
                    ask_edge: quotes.ask,
                    tax_mid: 0.0,
                });
            }
            mid = next_mid;
        }
        Ok((state.wealth, split))
    }

    pub fn simulate(&self, seed: u64, first: u64, n: usize, perturbation: Option<&PerturbationSpec>) -> Result<Vec<f64>, PnlError> {
        (0..n as u64)
            .into_par_iter()
            .map(|i| self.run_path(seed, first + i, perturbation))
            .collect()
    }
}

/// One-period trading problem seen by a learning agent: reward
/// `theta dM / h - 1/2 c theta^2` for one period of length `h`, with the
/// pathwise gradient `dM / h - c theta`.
#[derive(Debug, Clone, Copy)]
pub struct OnePeriodTrading {
    pub scenario: QuadraticScenario,
    pub period: f64,
}

impl PolicyEnvironment for OnePeriodTrading {
    fn dim(&self) -> usize {
        1
    }
    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let s = &self.scenario;
        s.drift * theta[0] - 0.5 * s.inventory_quad * theta[0] * theta[0]
    }
    fn optimal_value(&self) -> Option<f64> {
        let s = &self.scenario;
        Some(0.5 * s.drift * s.drift / s.inventory_quad)
    }
    fn exact_gradient(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        let s = &self.scenario;
        Some(DVector::from_element(1, s.drift - s.inventory_quad * theta[0]))
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
        use rand::Rng;
        let s = &self.scenario;
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        let dm = s.drift * self.period + s.vol * self.period.sqrt() * z;
        let g = DVector::from_element(1, dm / self.period - s.inventory_quad * theta[0]);
        Ok(GradientSample {
            naive: g.clone(),
            implemented: g,
        })
    }
}

/// Result of the trained-agent protocol.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainedDominance {
    pub report: DominanceReport,
    /// Learned targets, one per agent.
    pub targets: Vec<f64>,
    /// Mean squared distance of the learned targets from the optimum.
    pub dispersion: f64,
}

/// Train `agents` independent policies for `iterations` constant-step SGD
/// updates, deploy each on `paths_per_agent` paired paths, and compare with
/// the myopic target.
pub fn trained_dominance(
    scenario: &QuadraticScenario,
    agents: usize,
    paths_per_agent: usize,
    iterations: usize,
    eta: f64,
    seed: u64,
    alpha: f64,
) -> Result<TrainedDominance, PnlError> {
    let env = OnePeriodTrading {
        scenario: *scenario,
        period: 1.0,
    };
    let cfg = TrainConfig::plain(iterations, StepSchedule::Constant { eta });
    let targets = (0..agents)
        .map(|a| {
            let t = train(&env, &DVector::zeros(1), &cfg, seed ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
            Ok(t.final_theta()[0])
        })
        .collect::<Result<Vec<f64>, PnlError>>()?;
    let star = scenario.mo_target();
    let dispersion = mean(&targets.iter().map(|t| (t - star) * (t - star)).collect::<Vec<_>>());
    let mut mo = Vec::with_capacity(agents * paths_per_agent);
    let mut rl = Vec::with_capacity(agents * paths_per_agent);
    for (a, &t) in targets.iter().enumerate() {
        let first = (a * paths_per_agent) as u64;
        mo.extend(scenario.simulate(seed, first, paths_per_agent, star, None)?);
        rl.extend(scenario.simulate(seed, first, paths_per_agent, t, None)?);
    }
    let spec = PerturbationSpec::gaussian(dispersion);
    let report = dominance_report(
        &mo,
        &rl,
        &spec,
        scenario.strong_concavity(),
        scenario.charged_horizon(),
        alpha,
        0.01,
    )?;
    Ok(TrainedDominance {
        report,
        targets,
        dispersion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_input(terms: HamiltonianTerms) -> ReducedHamiltonianInput {
        ReducedHamiltonianInput {
            terms,
            position: DVector::from_vec(vec![2.0]),
            drift: DVector::from_vec(vec![0.3]),
            sensitivity: DMatrix::from_element(1, 1, 0.5),
            kappa: 0.4,
            liq_price: DVector::from_vec(vec![100.0]),
            mid: DVector::from_vec(vec![100.0]),
            cash: 0.0,
            rates: CarryRates::default(),
            holding: HoldingCostModel::default(),
        }
    }

    #[test]
    fn taker_kernel_without_costs() {
        let inp = base_input(HamiltonianTerms::Taker {
            speed: DVector::zeros(1),
            exec_price: DVector::from_vec(vec![100.0]),
        });
        assert!((reduced_hamiltonian(&inp).unwrap() - (0.6 + 0.2)).abs() < 1e-15);
        assert!((inp.exposure()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn maker_spread_capture() {
        let mut inp = base_input(HamiltonianTerms::Maker {
            bid: DVector::from_vec(vec![99.95]),
            ask: DVector::from_vec(vec![100.05]),
            bid_intensity: DVector::from_vec(vec![1.0]),
            ask_intensity: DVector::from_vec(vec![1.0]),
        });
        inp.drift[0] = 0.0;
        inp.kappa = 0.0;
        assert!((reduced_hamiltonian(&inp).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn kappa_constant_and_linear() {
        let v = DMatrix::from_row_slice(2, 1, &[0.3, 0.1]);
        let r = DMatrix::identity(1, 1);
        let k0 = kappa_fd(|_| DVector::from_vec(vec![1.0]), &[1.0, 2.0], &v, &r);
        assert_eq!(k0, 0.0);
        let k1 = kappa_fd(|y| DVector::from_vec(vec![2.0 * y[0] - y[1]]), &[1.0, 2.0], &v, &r);
        assert!((k1 - (2.0 * 0.3 - 0.1)).abs() < 1e-8);
    }

    #[test]
    fn deterministic_features() {
        let xs = vec![-1.5; 200];
        let d = distribution_features(&xs, 0.95, 50, 3).unwrap();
        assert!((d.mean.value + 1.5).abs() < 1e-12);
        assert!(d.variance.value.abs() < 1e-12);
        assert!((d.cvar_loss.value - 1.5).abs() < 1e-12);
        assert_eq!(d.p_positive.value, 0.0);
        assert!(distribution_features(&xs[..10], 0.95, 10, 0).is_err());
    }

    #[test]
    fn zero_floor_is_vacuous() {
        let s = QuadraticScenario::default();
        let spec = PerturbationSpec::gaussian(0.0);
        let mo = s.simulate(1, 0, 200, s.mo_target(), None).unwrap();
        let rl = s.simulate(1, 0, 200, s.mo_target(), Some(&spec)).unwrap();
        assert_eq!(mo, rl);
        let r = dominance_report(&mo, &rl, &spec, 1.0, 1.0, 0.95, 0.01).unwrap();
        assert_eq!(r.mean_gap, 0.0);
        assert!(r.vacuous && !r.flags.mean);
        assert!(dominance_report(&mo, &rl[..150], &spec, 1.0, 1.0, 0.95, 0.01).is_err());
    }

    #[test]
    fn smoothed_perturbation_keeps_variance() {
        let spec = PerturbationSpec { floor: 0.5, lag: 4 };
        let mut g = PerturbationGen::new(&spec, 1, 9, 0);
        let mut x = [0.0];
        let xs: Vec<f64> = (0..40_000)
            .map(|_| {
                g.next(&mut x);
                x[0]
            })
            .collect();
        assert!((variance(&xs) - 0.5).abs() < 0.03);
        assert!(mean(&xs).abs() < 0.03);
    }
}
