//! Control-affects-dynamics lab. The book's own trading feeds back into the
//! state through a drift term `F0` and a diffusion term `F`, both scaled by
//! `epsilon * share_scale`. We linearise around the unperturbed path, price
//! the feedback with a backward costate, and compare a myopic policy with
//! one that adds the premium density to its drive.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ledger::HoldingCostModel;
use crate::mo_controller::{project_speed, prox_speed, FeasibleSet, MoError, SeparableGain, TerminalFunctional};
use crate::numeric::{fd_step, l1};
use crate::sde_engine::{
    check_blowups, simulate_path, step_jacobian, validate_model, ArithmeticBrownian, MarketPath, SdeError, SdeModel,
    TimeGrid,
};
use crate::stats::{linear_fit, mean, Estimate, LinearFit};

#[derive(Debug, Error)]
pub enum CadError {
    #[error("invalid CAD setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Mo(#[from] MoError),
}

/// `F0(t, y, position, speed)`, length `M`.
pub type DriftFeedback = Arc<dyn Fn(f64, &[f64], &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
/// `F(t, y, position, speed)`, `M x d`.
pub type DiffusionFeedback = Arc<dyn Fn(f64, &[f64], &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

#[derive(Clone)]
pub struct CadModel {
    pub base: Arc<dyn SdeModel>,
    pub n_assets: usize,
    pub drift_feedback: DriftFeedback,
    pub diffusion_feedback: Option<DiffusionFeedback>,
    /// Feedback scale, in `[0, 1]`.
    pub epsilon: f64,
    /// Multiplier on both feedback terms, the book's share of the market.
    pub share_scale: f64,
    /// Market depth `D` per asset; the realised share is `|speed| / D`.
    pub depth: DVector<f64>,
}

impl std::fmt::Debug for CadModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CadModel")
            .field("state_dim", &self.base.state_dim())
            .field("n_assets", &self.n_assets)
            .field("epsilon", &self.epsilon)
            .field("share_scale", &self.share_scale)
            .field("diffusion_feedback", &self.diffusion_feedback.is_some())
            .finish()
    }
}

impl CadModel {
    pub fn new(base: Arc<dyn SdeModel>, n_assets: usize, drift_feedback: DriftFeedback, epsilon: f64) -> Self {
        Self {
            base,
            n_assets,
            drift_feedback,
            diffusion_feedback: None,
            epsilon,
            share_scale: 1.0,
            depth: DVector::from_element(n_assets, 1.0),
        }
    }

    /// Permanent impact `F0 = S speed` with a constant `M x N` matrix `S`.
    pub fn linear_impact(base: Arc<dyn SdeModel>, sens: DMatrix<f64>, epsilon: f64) -> Self {
        let n = sens.ncols();
        let f0: DriftFeedback = Arc::new(move |_, _, _, v| &sens * v);
        Self::new(base, n, f0, epsilon)
    }

    pub fn with_diffusion(mut self, f: DiffusionFeedback) -> Self {
        self.diffusion_feedback = Some(f);
        self
    }

    /// Diffusion feedback `F = sum_i S_i speed_i` with constant `M x d` slices.
    pub fn with_linear_diffusion(self, slices: Vec<DMatrix<f64>>) -> Self {
        let (m, d) = (self.base.state_dim(), self.base.noise_dim());
        let f: DiffusionFeedback = Arc::new(move |_, _, _, v| {
            let mut out = DMatrix::zeros(m, d);
            for (s, &vi) in slices.iter().zip(v.iter()) {
                out += s * vi;
            }
            out
        });
        self.with_diffusion(f)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    pub fn with_share(&self, share_scale: f64) -> Self {
        Self {
            share_scale,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CadError> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(CadError::Invalid(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(self.share_scale >= 0.0 && self.share_scale.is_finite()) {
            return Err(CadError::Invalid(format!("share scale {}", self.share_scale)));
        }
        if self.n_assets == 0 || self.depth.len() != self.n_assets {
            return Err(CadError::Invalid("depth must have one entry per asset".into()));
        }
        if self.depth.iter().any(|&d| !(d > 0.0)) {
            return Err(CadError::Invalid("depth must be positive".into()));
        }
        validate_model(self.base.as_ref())?;
        Ok(())
    }

    fn drift_term(&self, t: f64, y: &[f64], phi: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        (self.drift_feedback)(t, y, phi, v) * self.share_scale
    }

    fn diffusion_term(&self, t: f64, y: &[f64], phi: &DVector<f64>, v: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.diffusion_feedback
            .as_ref()
            .map(|f| f(t, y, phi, v) * self.share_scale)
    }

    /// `d F0 / d speed` (times the share scale), `M x N`, by central differences.
    pub fn drift_sensitivity(&self, t: f64, y: &[f64], phi: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let m = self.base.state_dim();
        let mut out = DMatrix::zeros(m, self.n_assets);
        let mut vp = v.clone();
        for i in 0..self.n_assets {
            let h = fd_step(v[i]);
            vp[i] = v[i] + h;
            let fp = self.drift_term(t, y, phi, &vp);
            vp[i] = v[i] - h;
            let fm = self.drift_term(t, y, phi, &vp);
            vp[i] = v[i];
            out.set_column(i, &((fp - fm) / (2.0 * h)));
        }
        out
    }

    /// `d F / d speed_i` for each asset, `M x d` each. Empty without
    /// diffusion feedback.
    pub fn diffusion_sensitivity(&self, t: f64, y: &[f64], phi: &DVector<f64>, v: &DVector<f64>) -> Vec<DMatrix<f64>> {
        if self.diffusion_feedback.is_none() {
            return Vec::new();
        }
        let mut vp = v.clone();
        (0..self.n_assets)
            .map(|i| {
                let h = fd_step(v[i]);
                vp[i] = v[i] + h;
                let fp = self.diffusion_term(t, y, phi, &vp).expect("feedback present");
                vp[i] = v[i] - h;
                let fm = self.diffusion_term(t, y, phi, &vp).expect("feedback present");
                vp[i] = v[i];
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    /// Realised market share `|speed_i| / D_i`.
    pub fn market_share(&self, speed: &DVector<f64>) -> DVector<f64> {
        speed.zip_map(&self.depth, |v, d| v.abs() / d)
    }
}

/// Deterministic trading schedule: one speed per grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoop {
    pub initial: DVector<f64>,
    pub speeds: Vec<DVector<f64>>,
    positions: Vec<DVector<f64>>,
}

impl OpenLoop {
    pub fn new(initial: DVector<f64>, speeds: Vec<DVector<f64>>, dt: f64) -> Self {
        let mut positions = Vec::with_capacity(speeds.len() + 1);
        let mut p = initial.clone();
        positions.push(p.clone());
        for v in &speeds {
            p += v * dt;
            positions.push(p.clone());
        }
        Self {
            initial,
            speeds,
            positions,
        }
    }

    pub fn constant(initial: DVector<f64>, speed: DVector<f64>, grid: &TimeGrid) -> Self {
        Self::new(initial, vec![speed; grid.n_steps], grid.dt)
    }

    pub fn idle(n_assets: usize, grid: &TimeGrid) -> Self {
        Self::constant(DVector::zeros(n_assets), DVector::zeros(n_assets), grid)
    }

    /// Position held over step `k`.
    pub fn position(&self, k: usize) -> &DVector<f64> {
        &self.positions[k]
    }

    pub fn n_steps(&self) -> usize {
        self.speeds.len()
    }

    fn check(&self, n_assets: usize, grid: &TimeGrid) -> Result<(), CadError> {
        if self.speeds.len() != grid.n_steps {
            return Err(CadError::Invalid(format!(
                "schedule has {} steps, grid has {}",
                self.speeds.len(),
                grid.n_steps
            )));
        }
        if self.initial.len() != n_assets || self.speeds.iter().any(|v| v.len() != n_assets) {
            return Err(CadError::Invalid("schedule dimension differs from asset count".into()));
        }
        Ok(())
    }
}

/// Base model plus scaled feedback along a fixed schedule. The scale may be
/// negative here so the objective can be differenced symmetrically.
struct Augmented<'a> {
    cad: &'a CadModel,
    schedule: &'a OpenLoop,
    grid: TimeGrid,
    scale: f64,
}

impl Augmented<'_> {
    fn step(&self, t: f64) -> usize {
        let k = ((t - self.grid.start) / self.grid.dt).round();
        (k.max(0.0) as usize).min(self.grid.n_steps - 1)
    }
}

impl SdeModel for Augmented<'_> {
    fn state_dim(&self) -> usize {
        self.cad.base.state_dim()
    }
    fn noise_dim(&self) -> usize {
        self.cad.base.noise_dim()
    }
    fn correlation(&self) -> &DMatrix<f64> {
        self.cad.base.correlation()
    }
    fn ito_drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.cad.base.ito_drift(t, x, out);
        let k = self.step(t);
        let f = self
            .cad
            .drift_term(t, x, self.schedule.position(k), &self.schedule.speeds[k]);
        for (o, fi) in out.iter_mut().zip(f.iter()) {
            *o += self.scale * fi;
        }
    }
    fn diffusion(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) {
        self.cad.base.diffusion(t, x, out);
        let k = self.step(t);
        if let Some(f) = self
            .cad
            .diffusion_term(t, x, self.schedule.position(k), &self.schedule.speeds[k])
        {
            *out += f * self.scale;
        }
    }
}

/// One path of the perturbed dynamics next to its unperturbed twin.
#[derive(Debug, Clone)]
pub struct CadPath {
    pub baseline: MarketPath,
    pub perturbed: MarketPath,
    /// First variation `dY/d epsilon` at every grid point, row-major `(n+1) x M`.
    pub variation: Vec<f64>,
}

impl CadPath {
    pub fn variation_at(&self, k: usize) -> &[f64] {
        let m = self.baseline.state_dim;
        &self.variation[k * m..(k + 1) * m]
    }
}

/// First variation along the baseline path:
/// `D_{k+1} = A_k D_k + F0_k dt + F_k dB_k`, `D_0 = 0`.
fn first_variation(cad: &CadModel, schedule: &OpenLoop, baseline: &MarketPath) -> Vec<f64> {
    let m = baseline.state_dim;
    let n = baseline.n_steps();
    let dt = baseline.grid.dt;
    let mut out = vec![0.0; (n + 1) * m];
    let mut cur = DVector::zeros(m);
    for k in 0..n {
        let t = baseline.grid.time(k);
        let y = baseline.state(k);
        let (phi, v) = (schedule.position(k), &schedule.speeds[k]);
        let mut next = step_jacobian(cad.base.as_ref(), baseline, k) * &cur + cad.drift_term(t, y, phi, v) * dt;
        if let Some(f) = cad.diffusion_term(t, y, phi, v) {
            next += f * DVector::from_column_slice(baseline.increment(k));
        }
        out[(k + 1) * m..(k + 2) * m].copy_from_slice(next.as_slice());
        cur = next;
    }
    out
}

fn augmented_path(
    cad: &CadModel,
    schedule: &OpenLoop,
    grid: &TimeGrid,
    scale: f64,
    y0: &[f64],
    seed: u64,
    path: u64,
) -> Result<Option<MarketPath>, SdeError> {
    let aug = Augmented {
        cad,
        schedule,
        grid: *grid,
        scale,
    };
    simulate_path(&aug, grid, y0, seed, path)
}

/// Simulate one path of the perturbed and baseline dynamics on shared
/// noise, with the first variation. `None` if either path blew up.
pub fn simulate_cad_path(
    cad: &CadModel,
    schedule: &OpenLoop,
    grid: &TimeGrid,
    y0: &[f64],
    seed: u64,
    path: u64,
) -> Result<Option<CadPath>, CadError> {
    schedule.check(cad.n_assets, grid)?;
    let Some(baseline) = simulate_path(cad.base.as_ref(), grid, y0, seed, path)? else {
        return Ok(None);
    };
    let Some(perturbed) = augmented_path(cad, schedule, grid, cad.epsilon, y0, seed, path)? else {
        return Ok(None);
    };
    let variation = first_variation(cad, schedule, &baseline);
    Ok(Some(CadPath {
        baseline,
        perturbed,
        variation,
    }))
}

/// Terminal states of a batch of CAD paths.
#[derive(Debug, Clone)]
pub struct CadBatch {
    pub epsilon: f64,
    pub baseline: Vec<Vec<f64>>,
    pub perturbed: Vec<Vec<f64>>,
    pub variation: Vec<Vec<f64>>,
    pub blown_up: usize,
}

impl CadBatch {
    /// Mean over paths of `|(Y^eps - Y^0)/eps - D|` in the max norm.
    pub fn linearisation_error(&self) -> f64 {
        let errs: Vec<f64> = (0..self.baseline.len())
            .map(|p| {
                (0..self.baseline[p].len())
                    .map(|i| {
                        ((self.perturbed[p][i] - self.baseline[p][i]) / self.epsilon - self.variation[p][i]).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        mean(&errs)
    }
}

pub fn simulate_cad(
    cad: &CadModel,
    schedule: &OpenLoop,
    grid: &TimeGrid,
    y0: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<CadBatch, CadError> {
    cad.validate()?;
    schedule.check(cad.n_assets, grid)?;
    let results: Vec<Result<Option<CadPath>, CadError>> = (0..n_paths)
        .into_par_iter()
        .map(|i| simulate_cad_path(cad, schedule, grid, y0, seed, i as u64))
        .collect();
    let mut batch = CadBatch {
        epsilon: cad.epsilon,
        baseline: Vec::with_capacity(n_paths),
        perturbed: Vec::with_capacity(n_paths),
        variation: Vec::with_capacity(n_paths),
        blown_up: 0,
    };
    for r in results {
        match r? {
            Some(p) => {
                batch.baseline.push(p.baseline.terminal().to_vec());
                batch.perturbed.push(p.perturbed.terminal().to_vec());
                batch.variation.push(p.variation_at(grid.n_steps).to_vec());
            }
            None => batch.blown_up += 1,
        }
    }
    check_blowups(batch.blown_up, n_paths)?;
    Ok(batch)
}

/// `U(y) = w - gamma/2 w^2` of the readout `w = <a, y>`.
#[derive(Debug, Clone)]
pub struct WealthUtility {
    pub readout: DVector<f64>,
    pub risk_aversion: f64,
}

impl TerminalFunctional for WealthUtility {
    fn value(&self, y: &[f64]) -> f64 {
        let w: f64 = self.readout.iter().zip(y).map(|(a, x)| a * x).sum();
        w - 0.5 * self.risk_aversion * w * w
    }
    fn gradient(&self, y: &[f64]) -> DVector<f64> {
        let w: f64 = self.readout.iter().zip(y).map(|(a, x)| a * x).sum();
        &self.readout * (1.0 - self.risk_aversion * w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PremiumMethod {
    /// Drift feedback only.
    DriftOnly,
    /// Drift and diffusion feedback; the latter needs an invertible diffusion.
    Full,
}

/// Premium density per decision step of the window.
#[derive(Debug, Clone)]
pub struct CadPremium {
    pub start: usize,
    pub chi: Vec<DVector<f64>>,
    pub se: Vec<DVector<f64>>,
    /// Mean terminal costate `g_T`.
    pub costate: DVector<f64>,
    /// Per path `sum_k dt <chi_k, speed_k>` over the window.
    pub value: Estimate,
    pub diffusion_included: bool,
    pub n_paths: usize,
}

impl CadPremium {
    pub fn sup_norm(&self) -> f64 {
        self.chi.iter().map(|c| c.amax()).fold(0.0, f64::max)
    }
}

struct PathPremium {
    chi: Vec<DVector<f64>>,
    costate: DVector<f64>,
    value: f64,
}

fn check_elliptic(base: &dyn SdeModel, path: &MarketPath, k: usize) -> Result<(), SdeError> {
    let (m, d) = (base.state_dim(), base.noise_dim());
    if m != d {
        return Err(SdeError::NotElliptic { step: k });
    }
    let mut v = DMatrix::zeros(m, d);
    base.diffusion(path.grid.time(k), path.state(k), &mut v);
    let scale = v.amax().max(f64::MIN_POSITIVE);
    let svd = v.svd(false, false);
    let smallest = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smallest > 1e-12 * scale) {
        return Err(SdeError::NotElliptic { step: k });
    }
    Ok(())
}

fn path_premium(
    cad: &CadModel,
    schedule: &OpenLoop,
    path: &MarketPath,
    utility: &dyn TerminalFunctional,
    window: (usize, usize),
    diffusion: bool,
) -> Result<PathPremium, SdeError> {
    let n = path.n_steps();
    let dt = path.grid.dt;
    let base = cad.base.as_ref();
    let costate = utility.gradient(path.terminal());
    // p_{k+1} = J[T <- k+1]^T g_T, built backwards
    let mut p = costate.clone();
    let mut chi = vec![DVector::zeros(cad.n_assets); window.1 - window.0];
    for k in (0..n).rev() {
        if k >= window.0 && k < window.1 {
            let t = path.grid.time(k);
            let y = path.state(k);
            let (phi, v) = (schedule.position(k), &schedule.speeds[k]);
            let mut c = cad.drift_sensitivity(t, y, phi, v).transpose() * &p;
            if diffusion {
                check_elliptic(base, path, k)?;
                let db = DVector::from_column_slice(path.increment(k));
                for (i, s) in cad.diffusion_sensitivity(t, y, phi, v).iter().enumerate() {
                    c[i] += p.dot(&(s * &db)) / dt;
                }
            }
            chi[k - window.0] = c;
        }
        if k > 0 {
            p = step_jacobian(base, path, k).transpose() * p;
        }
    }
    let value = chi
        .iter()
        .enumerate()
        .map(|(j, c)| dt * c.dot(&schedule.speeds[window.0 + j]))
        .sum();
    Ok(PathPremium { chi, costate, value })
}

/// Monte Carlo premium density `chi_k` for decision steps
/// `window.0..window.1`, from the backward costate on unperturbed paths.
pub fn cad_premium(
    cad: &CadModel,
    schedule: &OpenLoop,
    grid: &TimeGrid,
    y0: &[f64],
    utility: &dyn TerminalFunctional,
    window: (usize, usize),
    n_paths: usize,
    seed: u64,
    method: PremiumMethod,
) -> Result<CadPremium, CadError> {
    cad.validate()?;
    schedule.check(cad.n_assets, grid)?;
    if window.0 >= window.1 || window.1 > grid.n_steps {
        return Err(CadError::Invalid(format!("window {window:?} on {} steps", grid.n_steps)));
    }
    if n_paths < 2 {
        return Err(CadError::Invalid("need at least two paths".into()));
    }
    let diffusion = match (method, cad.diffusion_feedback.is_some()) {
        (PremiumMethod::Full, true) => true,
        (PremiumMethod::Full, false) => {
            log::warn!("no diffusion feedback; premium uses the drift term only");
            false
        }
        (PremiumMethod::DriftOnly, _) => false,
    };
    let results: Vec<Result<Option<PathPremium>, SdeError>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let path = simulate_path(cad.base.as_ref(), grid, y0, seed, i as u64)?;
            path.map(|p| path_premium(cad, schedule, &p, utility, window, diffusion))
                .transpose()
        })
        .collect();
    let mut per_path = Vec::with_capacity(n_paths);
    let mut blown = 0;
    for r in results {
        match r? {
            Some(p) => per_path.push(p),
            None => blown += 1,
        }
    }
    check_blowups(blown, n_paths)?;
    let width = window.1 - window.0;
    let n_assets = cad.n_assets;
    let mut chi = Vec::with_capacity(width);
    let mut se = Vec::with_capacity(width);
    let mut col = vec![0.0; per_path.len()];
    for j in 0..width {
        let mut c = DVector::zeros(n_assets);
        let mut s = DVector::zeros(n_assets);
        for i in 0..n_assets {
            for (x, p) in col.iter_mut().zip(&per_path) {
                *x = p.chi[j][i];
            }
            let e = Estimate::of(&col);
            c[i] = e.mean;
            s[i] = e.se;
        }
        chi.push(c);
        se.push(s);
    }
    let m = cad.base.state_dim();
    let mut costate = DVector::zeros(m);
    for p in &per_path {
        costate += &p.costate;
    }
    costate /= per_path.len() as f64;
    let values: Vec<f64> = per_path.iter().map(|p| p.value).collect();
    Ok(CadPremium {
        start: window.0,
        chi,
        se,
        costate,
        value: Estimate::of(&values),
        diffusion_included: diffusion,
        n_paths: per_path.len(),
    })
}

/// First-order value against the symmetric difference of the objective.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FdCheck {
    /// `(J_eps - J_{-eps}) / 2`.
    pub finite_difference: Estimate,
    /// `eps * sum_k dt <chi_k, speed_k>`.
    pub first_order: Estimate,
}

impl FdCheck {
    /// Gap in units of the combined standard error.
    pub fn z(&self) -> f64 {
        let se = self.finite_difference.se.hypot(self.first_order.se);
        let gap = self.finite_difference.mean - self.first_order.mean;
        if se == 0.0 {
            if gap == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            gap.abs() / se
        }
    }
}

/// Symmetric finite difference of `E[U(Y_T)]` in the feedback scale on
/// paired paths, next to the premium's first-order prediction.
pub fn fd_check(
    cad: &CadModel,
    schedule: &OpenLoop,
    grid: &TimeGrid,
    y0: &[f64],
    utility: &dyn TerminalFunctional,
    n_paths: usize,
    seed: u64,
) -> Result<FdCheck, CadError> {
    let premium = cad_premium(
        cad,
        schedule,
        grid,
        y0,
        utility,
        (0, grid.n_steps),
        n_paths,
        seed,
        PremiumMethod::Full,
    )?;
    let eps = cad.epsilon;
    let diffs: Vec<Option<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| -> Result<Option<f64>, SdeError> {
            let up = augmented_path(cad, schedule, grid, eps, y0, seed, i as u64)?;
            let down = augmented_path(cad, schedule, grid, -eps, y0, seed, i as u64)?;
            Ok(match (up, down) {
                (Some(u), Some(d)) => Some(0.5 * (utility.value(u.terminal()) - utility.value(d.terminal()))),
                _ => None,
            })
        })
        .collect::<Result<_, _>>()?;
    let blown = diffs.iter().filter(|d| d.is_none()).count();
    check_blowups(blown, n_paths)?;
    let diffs: Vec<f64> = diffs.into_iter().flatten().collect();
    Ok(FdCheck {
        finite_difference: Estimate::of(&diffs),
        first_order: Estimate {
            mean: eps * premium.value.mean,
            se: eps * premium.value.se,
        },
    })
}

/// Surplus of trading `v` on the premium over what it costs:
/// `<eps chi, v> - lambda |v| - 1/2 v^T Xi v - <risk + grad HC, v>`.
/// The surplus condition holds when this is strictly positive.
pub fn surplus_margin(
    scaled_chi: &DVector<f64>,
    v: &DVector<f64>,
    l1_cost: &DVector<f64>,
    temp_impact: &DMatrix<f64>,
    risk_and_holding: &DVector<f64>,
) -> f64 {
    let lambda: f64 = v.iter().zip(l1_cost.iter()).map(|(x, l)| l * x.abs()).sum();
    scaled_chi.dot(v) - lambda - 0.5 * v.dot(&(temp_impact * v)) - risk_and_holding.dot(v)
}

/// Myopic open-loop schedule with `extra_k` added to the drive at step `k`.
pub fn myopic_schedule(
    gain: &SeparableGain,
    feasible: &FeasibleSet,
    initial: &DVector<f64>,
    extra: Option<&[DVector<f64>]>,
    grid: &TimeGrid,
) -> Result<OpenLoop, CadError> {
    let n = gain.n_assets();
    let zero = DVector::zeros(n);
    let mut pos = initial.clone();
    let mut speeds = Vec::with_capacity(grid.n_steps);
    for k in 0..grid.n_steps {
        let mut drive = gain.drive(&pos, &zero);
        if let Some(e) = extra {
            drive += &e[k];
        }
        let (raw, _) = prox_speed(&drive, &gain.l1, &gain.temp_impact)?;
        let v = project_speed(&raw, &pos, feasible, grid.dt)?;
        pos += &v * grid.dt;
        speeds.push(v);
    }
    Ok(OpenLoop::new(initial.clone(), speeds, grid.dt))
}

fn holding_gradient(gain: &SeparableGain, position: &DVector<f64>) -> DVector<f64> {
    match &gain.holding {
        Some((hc, mid)) => hc.gradient(position, mid),
        None => DVector::zeros(position.len()),
    }
}

fn holding_cost(holding: &Option<(HoldingCostModel, DVector<f64>)>, position: &DVector<f64>) -> f64 {
    holding.as_ref().map_or(0.0, |(hc, mid)| hc.cost(position, mid))
}

/// Deterministic running reward of a schedule:
/// `sum_k dt (<mu, phi> - 1/2 phi^T Q phi - HC - lambda |v| - 1/2 v^T Xi v)`.
pub fn running_reward(gain: &SeparableGain, schedule: &OpenLoop, dt: f64) -> f64 {
    (0..schedule.n_steps())
        .map(|k| {
            let phi = schedule.position(k);
            let v = &schedule.speeds[k];
            let lambda: f64 = v.iter().zip(gain.l1.iter()).map(|(x, l)| l * x.abs()).sum();
            dt * (gain.drift.dot(phi)
                - 0.5 * phi.dot(&(&gain.inventory * phi))
                - holding_cost(&gain.holding, phi)
                - lambda
                - 0.5 * v.dot(&(&gain.temp_impact * v)))
        })
        .sum()
}

/// `J_eps(cad-aware) - J_eps(myopic)` on paired paths.
fn paired_gap(
    cad: &CadModel,
    aware: &OpenLoop,
    myopic: &OpenLoop,
    gain: &SeparableGain,
    grid: &TimeGrid,
    y0: &[f64],
    utility: &dyn TerminalFunctional,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate, CadError> {
    let running = running_reward(gain, aware, grid.dt) - running_reward(gain, myopic, grid.dt);
    if aware == myopic {
        return Ok(Estimate { mean: 0.0, se: 0.0 });
    }
    let eps = cad.epsilon;
    let diffs: Vec<Option<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| -> Result<Option<f64>, SdeError> {
            let a = augmented_path(cad, aware, grid, eps, y0, seed, i as u64)?;
            let b = augmented_path(cad, myopic, grid, eps, y0, seed, i as u64)?;
            Ok(match (a, b) {
                (Some(a), Some(b)) => Some(utility.value(a.terminal()) - utility.value(b.terminal()) + running),
                _ => None,
            })
        })
        .collect::<Result<_, _>>()?;
    let blown = diffs.iter().filter(|d| d.is_none()).count();
    check_blowups(blown, n_paths)?;
    let diffs: Vec<f64> = diffs.into_iter().flatten().collect();
    Ok(Estimate::of(&diffs))
}

/// One `(epsilon, share)` point of the scan.
#[derive(Debug, Clone, Serialize)]
pub struct CadScanRow {
    pub epsilon: f64,
    pub share_scale: f64,
    pub delta: f64,
    pub ci: (f64, f64),
    pub surplus_fraction: f64,
    pub chi_norm: f64,
    #[serde(skip)]
    pub delta_se: f64,
    /// One-sided p-value for `delta > 0`.
    #[serde(skip)]
    pub p_value: f64,
    /// Smallest and largest surplus margin over the grid.
    #[serde(skip)]
    pub margin_range: (f64, f64),
    #[serde(skip)]
    pub traded: f64,
}

#[derive(Debug, Clone)]
pub struct ShareFit {
    pub epsilon: f64,
    pub fit: LinearFit,
    /// Least-squares slope of the fit forced through the origin.
    pub origin_slope: f64,
}

#[derive(Debug, Clone)]
pub struct CadScan {
    pub rows: Vec<CadScanRow>,
    /// Delta against share scale for each epsilon with three or more shares.
    pub fits: Vec<ShareFit>,
}

/// Inputs shared by every point of the scan.
pub struct ScanSetup<'a> {
    pub cad: &'a CadModel,
    pub gain: &'a SeparableGain,
    pub feasible: &'a FeasibleSet,
    pub utility: &'a dyn TerminalFunctional,
    pub grid: TimeGrid,
    pub y0: Vec<f64>,
    pub initial_position: DVector<f64>,
    pub n_paths: usize,
    pub premium_paths: usize,
    pub seed: u64,
}

/// For every `(epsilon, share)`: the myopic schedule, the cad-aware schedule
/// (premium added to the drive), the pointwise surplus margin along the
/// cad-aware schedule, and the paired objective gap.
pub fn surplus_and_scan(setup: &ScanSetup<'_>, eps_grid: &[f64], share_grid: &[f64]) -> Result<CadScan, CadError> {
    let grid = &setup.grid;
    let gain = setup.gain;
    let myopic = myopic_schedule(gain, setup.feasible, &setup.initial_position, None, grid)?;
    // The premium is linear in the share scale, and with state-independent
    // base dynamics it does not depend on the schedule it is evaluated at
    // when the feedback is linear in speed; it is recomputed per share to
    // stay general.
    let mut rows = Vec::new();
    for &share in share_grid {
        let unit = setup.cad.with_share(share).with_epsilon(1.0);
        let premium = cad_premium(
            &unit,
            &myopic,
            grid,
            &setup.y0,
            setup.utility,
            (0, grid.n_steps),
            setup.premium_paths,
            setup.seed,
            PremiumMethod::Full,
        )?;
        let chi_norm = premium.sup_norm();
        for &eps in eps_grid {
            let cad = setup.cad.with_share(share).with_epsilon(eps);
            cad.validate()?;
            let extra: Vec<DVector<f64>> = premium.chi.iter().map(|c| c * eps).collect();
            let aware = myopic_schedule(gain, setup.feasible, &setup.initial_position, Some(&extra), grid)?;
            let margins: Vec<f64> = (0..grid.n_steps)
                .map(|k| {
                    let phi = aware.position(k);
                    surplus_margin(
                        &extra[k],
                        &aware.speeds[k],
                        &gain.l1,
                        &gain.temp_impact,
                        &holding_gradient(gain, phi),
                    )
                })
                .collect();
            let surplus_fraction = margins.iter().filter(|&&m| m > 0.0).count() as f64 / margins.len() as f64;
            let margin_range = margins
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| (lo.min(m), hi.max(m)));
            let gap = paired_gap(
                &cad,
                &aware,
                &myopic,
                gain,
                grid,
                &setup.y0,
                setup.utility,
                setup.n_paths,
                setup.seed,
            )?;
            let traded = aware.speeds.iter().map(l1).sum::<f64>() * grid.dt;
            rows.push(CadScanRow {
                epsilon: eps,
                share_scale: share,
                delta: gap.mean,
                ci: gap.ci95(),
                surplus_fraction,
                chi_norm,
                delta_se: gap.se,
                p_value: gap.p_positive(),
                margin_range,
                traded,
            });
        }
    }
    let mut fits = Vec::new();
    for &eps in eps_grid {
        let pts: Vec<&CadScanRow> = rows.iter().filter(|r| r.epsilon == eps).collect();
        if pts.len() < 3 {
            continue;
        }
        let xs: Vec<f64> = pts.iter().map(|r| r.share_scale).collect();
        let ys: Vec<f64> = pts.iter().map(|r| r.delta).collect();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        fits.push(ShareFit {
            epsilon: eps,
            fit: linear_fit(&xs, &ys),
            origin_slope: if sxx > 0.0 { sxy / sxx } else { 0.0 },
        });
    }
    Ok(CadScan { rows, fits })
}

/// Permanent own-impact testbed: `dY_i = vol dB_i + eps share c_i speed_i dt`
/// on independent arithmetic Brownian marks, valued through
/// `U = w - gamma/2 w^2` with `w = sum_i Y_i`.
#[derive(Debug, Clone)]
pub struct ImpactTestbed {
    pub n_assets: usize,
    pub vol: f64,
    pub impact: f64,
    pub risk_aversion: f64,
    pub horizon: f64,
    pub n_steps: usize,
    /// Optional diffusion feedback `vol_impact * speed_i` on asset `i`'s own noise.
    pub vol_impact: f64,
}

impl Default for ImpactTestbed {
    fn default() -> Self {
        Self {
            n_assets: 1,
            vol: 1.0,
            impact: 1.0,
            risk_aversion: 0.05,
            horizon: 1.0,
            n_steps: 50,
            vol_impact: 0.0,
        }
    }
}

impl ImpactTestbed {
    pub fn grid(&self) -> Result<TimeGrid, CadError> {
        Ok(TimeGrid::new(0.0, self.horizon, self.n_steps)?)
    }

    pub fn model(&self, epsilon: f64) -> Result<CadModel, CadError> {
        let n = self.n_assets;
        let base = ArithmeticBrownian::new(
            DVector::zeros(n),
            DMatrix::identity(n, n) * self.vol,
            DMatrix::identity(n, n),
        )?;
        let cad = CadModel::linear_impact(Arc::new(base), DMatrix::identity(n, n) * self.impact, epsilon);
        if self.vol_impact != 0.0 {
            let slices = (0..n)
                .map(|i| {
                    let mut s = DMatrix::zeros(n, n);
                    s[(i, i)] = self.vol_impact;
                    s
                })
                .collect();
            return Ok(cad.with_linear_diffusion(slices));
        }
        Ok(cad)
    }

    pub fn utility(&self) -> WealthUtility {
        WealthUtility {
            readout: DVector::from_element(self.n_assets, 1.0),
            risk_aversion: self.risk_aversion,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mo_controller::SpeedCap;
    use crate::sde_engine::{Gbm, OrnsteinUhlenbeck};

    fn scalar_gain(drift: f64, l1: f64, xi: f64) -> SeparableGain {
        SeparableGain {
            drift: DVector::from_element(1, drift),
            inventory: DMatrix::zeros(1, 1),
            l1: DVector::from_element(1, l1),
            temp_impact: DMatrix::from_element(1, 1, xi),
            holding: None,
        }
    }

    #[test]
    fn zero_epsilon_reproduces_baseline() {
        let tb = ImpactTestbed::default();
        let grid = tb.grid().unwrap();
        let cad = tb.model(0.0).unwrap();
        let plan = OpenLoop::constant(DVector::zeros(1), DVector::from_element(1, 0.7), &grid);
        let p = simulate_cad_path(&cad, &plan, &grid, &[0.0], 5, 3).unwrap().unwrap();
        for k in 0..=grid.n_steps {
            assert_eq!(p.baseline.state(k), p.perturbed.state(k));
        }
    }

    #[test]
    fn linear_impact_shifts_terminal_by_traded_amount() {
        let tb = ImpactTestbed {
            impact: 0.8,
            ..Default::default()
        };
        let grid = tb.grid().unwrap();
        let cad = tb.model(0.3).unwrap();
        let speeds: Vec<DVector<f64>> = (0..grid.n_steps)
            .map(|k| DVector::from_element(1, (k as f64 * 0.1).sin()))
            .collect();
        let plan = OpenLoop::new(DVector::zeros(1), speeds.clone(), grid.dt);
        let b = simulate_cad(&cad, &plan, &grid, &[1.0], 200, 9).unwrap();
        let integral: f64 = speeds.iter().map(|v| v[0] * grid.dt).sum();
        let shifts: Vec<f64> = (0..200).map(|p| b.perturbed[p][0] - b.baseline[p][0]).collect();
        assert!((mean(&shifts) - 0.3 * 0.8 * integral).abs() < 1e-12);
        assert!(b.linearisation_error() < 1e-10);
    }

    #[test]
    fn first_variation_error_is_first_order() {
        // F0 = c speed Y on a geometric base: the response is nonlinear in eps
        let base: Arc<dyn SdeModel> = Arc::new(Gbm::new(0.05, 0.2));
        let f0: DriftFeedback = Arc::new(|_, y, _, v| DVector::from_element(1, 0.9 * v[0] * y[0]));
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let plan = OpenLoop::constant(DVector::zeros(1), DVector::from_element(1, 1.0), &grid);
        let err = |eps: f64| {
            let cad = CadModel::new(base.clone(), 1, f0.clone(), eps);
            simulate_cad(&cad, &plan, &grid, &[1.0], 400, 2).unwrap().linearisation_error()
        };
        let (e1, e2) = (err(0.2), err(0.1));
        let ratio = e1 / e2;
        assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn zero_sensitivity_gives_zero_premium() {
        let base: Arc<dyn SdeModel> = Arc::new(ArithmeticBrownian::scalar(0.0, 1.0));
        let cad = CadModel::linear_impact(base, DMatrix::zeros(1, 1), 0.5);
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let plan = OpenLoop::idle(1, &grid);
        let u = ImpactTestbed::default().utility();
        let prem = cad_premium(&cad, &plan, &grid, &[0.0], &u, (0, 20), 50, 1, PremiumMethod::Full).unwrap();
        assert!(prem.chi.iter().all(|c| c[0] == 0.0));
        assert!(!prem.diffusion_included);
    }

    #[test]
    fn deterministic_ou_premium_matches_hand_value() {
        // chi_k = c (1 - kappa dt)^(n-k-1) a with linear utility
        let (kappa, c, a) = (0.7, 1.3, 2.0);
        let base: Arc<dyn SdeModel> = Arc::new(OrnsteinUhlenbeck::new(kappa, 0.0, 0.0));
        let cad = CadModel::linear_impact(base, DMatrix::from_element(1, 1, c), 0.1);
        let grid = TimeGrid::new(0.0, 2.0, 40).unwrap();
        let plan = OpenLoop::idle(1, &grid);
        let u = WealthUtility {
            readout: DVector::from_element(1, a),
            risk_aversion: 0.0,
        };
        let prem = cad_premium(&cad, &plan, &grid, &[1.0], &u, (5, 40), 3, 1, PremiumMethod::DriftOnly).unwrap();
        for (j, chi) in prem.chi.iter().enumerate() {
            let k = 5 + j;
            let hand = c * (1.0 - kappa * grid.dt).powi((40 - k - 1) as i32) * a;
            assert!((chi[0] - hand).abs() < 1e-9 * hand.abs().max(1.0), "step {k}: {} vs {hand}", chi[0]);
        }
    }

    #[test]
    fn diffusion_feedback_premium_and_finite_difference_agree() {
        // Y_T = Y_0 + vol B_T + eps (c int v dt + s int v dB): for U = w - g/2 w^2,
        // chi = c E[1 - g Y_T] - g vol s
        let tb = ImpactTestbed {
            risk_aversion: 0.4,
            vol_impact: 0.5,
            impact: 0.6,
            ..Default::default()
        };
        let grid = tb.grid().unwrap();
        let cad = tb.model(0.2).unwrap();
        let plan = OpenLoop::constant(DVector::zeros(1), DVector::from_element(1, 1.0), &grid);
        let u = tb.utility();
        let prem = cad_premium(&cad, &plan, &grid, &[0.5], &u, (0, grid.n_steps), 4000, 11, PremiumMethod::Full).unwrap();
        assert!(prem.diffusion_included);
        let hand = 0.6 * (1.0 - 0.4 * 0.5) - 0.4 * 1.0 * 0.5;
        let avg = prem.value.mean / grid.horizon();
        assert!((avg - hand).abs() < 4.0 * prem.value.se / grid.horizon() + 1e-3, "{avg} vs {hand}");
        let check = fd_check(&cad, &plan, &grid, &[0.5], &u, 4000, 11).unwrap();
        assert!(check.z() < 3.0, "z {}", check.z());
    }

    #[test]
    fn singular_diffusion_is_rejected_with_feedback() {
        let tb = ImpactTestbed {
            vol: 0.0,
            vol_impact: 0.5,
            ..Default::default()
        };
        let grid = tb.grid().unwrap();
        let cad = tb.model(0.2).unwrap();
        let plan = OpenLoop::idle(1, &grid);
        let err = cad_premium(&cad, &plan, &grid, &[0.0], &tb.utility(), (0, 10), 10, 1, PremiumMethod::Full);
        assert!(matches!(err, Err(CadError::Sde(SdeError::NotElliptic { .. }))));
    }

    #[test]
    fn zero_action_has_no_surplus() {
        let m = surplus_margin(
            &DVector::from_element(1, 3.0),
            &DVector::zeros(1),
            &DVector::from_element(1, 0.1),
            &DMatrix::identity(1, 1),
            &DVector::zeros(1),
        );
        assert!(!(m > 0.0));
    }

    #[test]
    fn epsilon_out_of_range_is_rejected() {
        let cad = ImpactTestbed::default().model(1.5).unwrap();
        assert!(matches!(cad.validate(), Err(CadError::Invalid(_))));
    }

    #[test]
    fn expensive_trading_blocks_the_premium() {
        let tb = ImpactTestbed::default();
        let cad = tb.model(0.5).unwrap();
        let gain = scalar_gain(0.0, 10.0, 1.0);
        let feasible = FeasibleSet {
            speed_cap: SpeedCap::Box { cap: vec![1.0] },
            ..FeasibleSet::unconstrained(1)
        };
        let u = tb.utility();
        let setup = ScanSetup {
            cad: &cad,
            gain: &gain,
            feasible: &feasible,
            utility: &u,
            grid: tb.grid().unwrap(),
            y0: vec![0.0],
            initial_position: DVector::zeros(1),
            n_paths: 200,
            premium_paths: 200,
            seed: 4,
        };
        let scan = surplus_and_scan(&setup, &[0.5], &[1.0]).unwrap();
        let row = &scan.rows[0];
        assert_eq!(row.surplus_fraction, 0.0);
        assert!(row.delta <= 3.0 * row.delta_se);
    }
}
