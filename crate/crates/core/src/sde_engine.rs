//! Multivariate SDE engine.
//!
//! Models are stored in Itô form `dY = b(t,Y) dt + V(t,Y) dB` with
//! `d<B> = R dt`. The Stratonovich drift differs by the correction
//!
//! ```text
//! V0 = b - 1/2 J_V[V R],   (J_V[U])_i = sum_j sum_k dV_ik/dx_j U_jk
//! ```
//!
//! Paths are generated by Euler-Maruyama. Per-step Brownian increments are a
//! pure function of `(seed, path, step)`, see [`crate::rng`].

use crate::numeric::{cholesky_lower, fd_step, is_symmetric, min_sym_eigenvalue};
use crate::rng::{Domain, GaussianStream};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("correlation matrix is not symmetric positive definite")]
    CorrelationNotPd,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("diffusion is not invertible at step {step}")]
    NotElliptic { step: usize },
    #[error("Malliavin covariance is singular (smallest eigenvalue {min_eigenvalue:e})")]
    SingularMalliavin { min_eigenvalue: f64 },
    #[error("{blown} of {total} paths blew up")]
    TooManyBlowups { blown: usize, total: usize },
}

/// Fraction of non-finite paths an experiment tolerates.
pub const BLOWUP_BUDGET: f64 = 1e-3;

/// Coefficients of an SDE in Itô form.
pub trait SdeModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    /// Instantaneous correlation `R` of the driving Brownian motion.
    fn correlation(&self) -> &DMatrix<f64>;
    fn ito_drift(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// `V(t, x)`, an `M x d` matrix.
    fn diffusion(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>);

    /// `d b / d x`, `M x M`. Central differences unless overridden.
    fn drift_jacobian(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) {
        let m = self.state_dim();
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; m];
        let mut fm = vec![0.0; m];
        for j in 0..m {
            let h = fd_step(x[j]);
            xp[j] = x[j] + h;
            self.ito_drift(t, &xp, &mut fp);
            xp[j] = x[j] - h;
            self.ito_drift(t, &xp, &mut fm);
            xp[j] = x[j];
            for i in 0..m {
                out[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
    }

    /// `d V[:, col] / d x`, `M x M`. Central differences unless overridden.
    fn diffusion_jacobian(&self, t: f64, x: &[f64], col: usize, out: &mut DMatrix<f64>) {
        let m = self.state_dim();
        let d = self.noise_dim();
        let mut xp = x.to_vec();
        let mut vp = DMatrix::zeros(m, d);
        let mut vm = DMatrix::zeros(m, d);
        for j in 0..m {
            let h = fd_step(x[j]);
            xp[j] = x[j] + h;
            self.diffusion(t, &xp, &mut vp);
            xp[j] = x[j] - h;
            self.diffusion(t, &xp, &mut vm);
            xp[j] = x[j];
            for i in 0..m {
                out[(i, j)] = (vp[(i, col)] - vm[(i, col)]) / (2.0 * h);
            }
        }
    }
}

/// Check that `R` is symmetric positive definite and dimensions agree.
pub fn validate_model(model: &dyn SdeModel) -> Result<(), SdeError> {
    let r = model.correlation();
    let d = model.noise_dim();
    if r.nrows() != d || r.ncols() != d {
        return Err(SdeError::Dimension(format!(
            "correlation is {}x{}, noise dimension {}",
            r.nrows(),
            r.ncols(),
            d
        )));
    }
    if !is_symmetric(r, 1e-12) || cholesky_lower(r).is_none() {
        return Err(SdeError::CorrelationNotPd);
    }
    Ok(())
}

/// Geometric Brownian motion `dY = mu Y dt + sigma Y dB`.
#[derive(Debug, Clone)]
pub struct Gbm {
    pub mu: f64,
    pub sigma: f64,
    corr: DMatrix<f64>,
}

impl Gbm {
    pub fn new(mu: f64, sigma: f64) -> Self {
        Self {
            mu,
            sigma,
            corr: DMatrix::identity(1, 1),
        }
    }
}

impl SdeModel for Gbm {
    fn state_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn correlation(&self) -> &DMatrix<f64> {
        &self.corr
    }
    fn ito_drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.mu * x[0];
    }
    fn diffusion(&self, _t: f64, x: &[f64], out: &mut DMatrix<f64>) {
        out[(0, 0)] = self.sigma * x[0];
    }
    fn drift_jacobian(&self, _t: f64, _x: &[f64], out: &mut DMatrix<f64>) {
        out[(0, 0)] = self.mu;
    }
    fn diffusion_jacobian(&self, _t: f64, _x: &[f64], _col: usize, out: &mut DMatrix<f64>) {
        out[(0, 0)] = self.sigma;
    }
}

/// Ornstein-Uhlenbeck `dY = kappa (mean - Y) dt + sigma dB`.
#[derive(Debug, Clone)]
pub struct OrnsteinUhlenbeck {
    pub kappa: f64,
    pub mean: f64,
    pub sigma: f64,
    corr: DMatrix<f64>,
}

impl OrnsteinUhlenbeck {
    pub fn new(kappa: f64, mean: f64, sigma: f64) -> Self {
        Self {
            kappa,
            mean,
            sigma,
            corr: DMatrix::identity(1, 1),
        }
    }
}

impl SdeModel for OrnsteinUhlenbeck {
    fn state_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn correlation(&self) -> &DMatrix<f64> {
        &self.corr
    }
    fn ito_drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.kappa * (self.mean - x[0]);
    }
    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut DMatrix<f64>) {
        out[(0, 0)] = self.sigma;
    }
    fn drift_jacobian(&self, _t: f64, _x: &[f64], out: &mut DMatrix<f64>) {
        out[(0, 0)] = -self.kappa;
    }
    fn diffusion_jacobian(&self, _t: f64, _x: &[f64], _col: usize, out: &mut DMatrix<f64>) {
        out[(0, 0)] = 0.0;
    }
}

/// Constant drift and volatility: `dY = a dt + S dB`.
#[derive(Debug, Clone)]
pub struct ArithmeticBrownian {
    pub drift: DVector<f64>,
    pub vol: DMatrix<f64>,
    corr: DMatrix<f64>,
}

impl ArithmeticBrownian {
    pub fn new(drift: DVector<f64>, vol: DMatrix<f64>, corr: DMatrix<f64>) -> Result<Self, SdeError> {
        if vol.nrows() != drift.len() {
            return Err(SdeError::Dimension("vol rows must equal drift length".into()));
        }
        let m = Self { drift, vol, corr };
        validate_model(&m)?;
        Ok(m)
    }

    pub fn scalar(drift: f64, vol: f64) -> Self {
        Self {
            drift: DVector::from_element(1, drift),
            vol: DMatrix::from_element(1, 1, vol),
            corr: DMatrix::identity(1, 1),
        }
    }
}

impl SdeModel for ArithmeticBrownian {
    fn state_dim(&self) -> usize {
        self.drift.len()
    }
    fn noise_dim(&self) -> usize {
        self.vol.ncols()
    }
    fn correlation(&self) -> &DMatrix<f64> {
        &self.corr
    }
    fn ito_drift(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.drift.as_slice());
    }
    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut DMatrix<f64>) {
        out.copy_from(&self.vol);
    }
    fn drift_jacobian(&self, _t: f64, _x: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
    }
    fn diffusion_jacobian(&self, _t: f64, _x: &[f64], _col: usize, out: &mut DMatrix<f64>) {
        out.fill(0.0);
    }
}

type DriftFn = Arc<dyn Fn(f64, &[f64]) -> DVector<f64> + Send + Sync>;
type DiffusionFn = Arc<dyn Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync>;

/// Model built from closures. Derivatives come from central differences.
#[derive(Clone)]
pub struct FnSde {
    m: usize,
    d: usize,
    corr: DMatrix<f64>,
    drift: DriftFn,
    diffusion: DiffusionFn,
    /// When set, `drift` is the Stratonovich drift and the Itô drift is
    /// recovered by adding the correction.
    stratonovich: bool,
}

impl FnSde {
    pub fn ito(
        m: usize,
        d: usize,
        corr: DMatrix<f64>,
        drift: impl Fn(f64, &[f64]) -> DVector<f64> + Send + Sync + 'static,
        diffusion: impl Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Result<Self, SdeError> {
        let s = Self {
            m,
            d,
            corr,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            stratonovich: false,
        };
        validate_model(&s)?;
        Ok(s)
    }

    pub fn stratonovich(
        m: usize,
        d: usize,
        corr: DMatrix<f64>,
        drift: impl Fn(f64, &[f64]) -> DVector<f64> + Send + Sync + 'static,
        diffusion: impl Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Result<Self, SdeError> {
        let mut s = Self::ito(m, d, corr, drift, diffusion)?;
        s.stratonovich = true;
        Ok(s)
    }
}

impl SdeModel for FnSde {
    fn state_dim(&self) -> usize {
        self.m
    }
    fn noise_dim(&self) -> usize {
        self.d
    }
    fn correlation(&self) -> &DMatrix<f64> {
        &self.corr
    }
    fn ito_drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let b = (self.drift)(t, x);
        out.copy_from_slice(b.as_slice());
        if self.stratonovich {
            let c = stratonovich_correction(self, t, x);
            for (o, ci) in out.iter_mut().zip(c.iter()) {
                *o += ci;
            }
        }
    }
    fn diffusion(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) {
        out.copy_from(&(self.diffusion)(t, x));
    }
}

/// `1/2 J_V[V R]` at `(t, x)`: Itô drift minus Stratonovich drift.
pub fn stratonovich_correction(model: &dyn SdeModel, t: f64, x: &[f64]) -> DVector<f64> {
    let m = model.state_dim();
    let d = model.noise_dim();
    let mut v = DMatrix::zeros(m, d);
    model.diffusion(t, x, &mut v);
    let u = &v * model.correlation();
    let mut jac = DMatrix::zeros(m, m);
    let mut out = DVector::zeros(m);
    for k in 0..d {
        model.diffusion_jacobian(t, x, k, &mut jac);
        out += &jac * u.column(k);
    }
    0.5 * out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftDirection {
    ItoToStratonovich,
    StratonovichToIto,
}

/// Convert a drift value evaluated at `(t, x)` between the two forms.
pub fn convert_drift(
    model: &dyn SdeModel,
    drift: &DVector<f64>,
    direction: DriftDirection,
    t: f64,
    x: &[f64],
) -> DVector<f64> {
    let c = stratonovich_correction(model, t, x);
    match direction {
        DriftDirection::ItoToStratonovich => drift - c,
        DriftDirection::StratonovichToIto => drift + c,
    }
}

/// Stratonovich drift of a model at `(t, x)`.
pub fn stratonovich_drift(model: &dyn SdeModel, t: f64, x: &[f64]) -> DVector<f64> {
    let mut b = vec![0.0; model.state_dim()];
    model.ito_drift(t, x, &mut b);
    convert_drift(
        model,
        &DVector::from_vec(b),
        DriftDirection::ItoToStratonovich,
        t,
        x,
    )
}

/// Uniform time grid `t_k = start + k * dt`, `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(start: f64, horizon: f64, n_steps: usize) -> Result<Self, SdeError> {
        if n_steps == 0 || !(horizon > 0.0) || !horizon.is_finite() {
            return Err(SdeError::Grid(format!(
                "need positive horizon and steps, got horizon {horizon}, steps {n_steps}"
            )));
        }
        Ok(Self {
            start,
            dt: horizon / n_steps as f64,
            n_steps,
        })
    }

    pub fn time(&self, k: usize) -> f64 {
        self.start + k as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }
}

/// One simulated path: states at every grid point and the increments
/// `dB_k = B(t_{k+1}) - B(t_k)` that produced them.
#[derive(Debug, Clone)]
pub struct MarketPath {
    pub grid: TimeGrid,
    pub state_dim: usize,
    pub noise_dim: usize,
    states: Vec<f64>,
    increments: Vec<f64>,
}

impl MarketPath {
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.state_dim..(k + 1) * self.state_dim]
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.noise_dim..(k + 1) * self.noise_dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.grid.n_steps)
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    /// Brownian level `B(t_k) - B(t_0)` in coordinate `j`.
    pub fn brownian_levels(&self, j: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.n_steps + 1);
        let mut b = 0.0;
        out.push(0.0);
        for k in 0..self.grid.n_steps {
            b += self.increment(k)[j];
            out.push(b);
        }
        out
    }
}

/// Brownian increments for one path, with covariance `R dt`.
pub struct IncrementSource {
    gauss: GaussianStream,
    chol: DMatrix<f64>,
    sqrt_dt: f64,
    z: Vec<f64>,
}

impl IncrementSource {
    pub fn new(corr: &DMatrix<f64>, dt: f64, seed: u64, path: u64) -> Result<Self, SdeError> {
        let chol = cholesky_lower(corr).ok_or(SdeError::CorrelationNotPd)?;
        let d = corr.nrows();
        Ok(Self {
            gauss: GaussianStream::new(seed, Domain::Brownian, path, d),
            chol,
            sqrt_dt: dt.sqrt(),
            z: vec![0.0; d],
        })
    }

    pub fn next(&mut self, out: &mut [f64]) {
        self.gauss.next_block(&mut self.z);
        let d = self.z.len();
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..=i {
                s += self.chol[(i, j)] * self.z[j];
            }
            out[i] = s * self.sqrt_dt;
        }
    }

    /// Increment number `step`, independent of any previous draws.
    pub fn at(&mut self, step: u64, out: &mut [f64]) {
        self.gauss.seek(step);
        self.next(out);
    }
}

/// Simulate one path. Returns `None` if the state becomes non-finite.
pub fn simulate_path(
    model: &dyn SdeModel,
    grid: &TimeGrid,
    y0: &[f64],
    seed: u64,
    path_index: u64,
) -> Result<Option<MarketPath>, SdeError> {
    let m = model.state_dim();
    let d = model.noise_dim();
    if y0.len() != m {
        return Err(SdeError::Dimension(format!(
            "initial state has length {}, model expects {m}",
            y0.len()
        )));
    }
    let n = grid.n_steps;
    let mut src = IncrementSource::new(model.correlation(), grid.dt, seed, path_index)?;
    let mut states = Vec::with_capacity((n + 1) * m);
    let mut increments = vec![0.0; n * d];
    states.extend_from_slice(y0);
    let mut b = vec![0.0; m];
    let mut v = DMatrix::zeros(m, d);
    let mut x = y0.to_vec();
    for k in 0..n {
        let t = grid.time(k);
        let db = &mut increments[k * d..(k + 1) * d];
        src.next(db);
        model.ito_drift(t, &x, &mut b);
        model.diffusion(t, &x, &mut v);
        for i in 0..m {
            let mut s = b[i] * grid.dt;
            for j in 0..d {
                s += v[(i, j)] * db[j];
            }
            x[i] += s;
        }
        if !x.iter().all(|z| z.is_finite()) {
            return Ok(None);
        }
        states.extend_from_slice(&x);
    }
    Ok(Some(MarketPath {
        grid: *grid,
        state_dim: m,
        noise_dim: d,
        states,
        increments,
    }))
}

/// Paths that survived plus the number that blew up.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub paths: Vec<MarketPath>,
    pub blown_up: usize,
}

impl PathBatch {
    pub fn check_blowups(&self) -> Result<(), SdeError> {
        check_blowups(self.blown_up, self.paths.len() + self.blown_up)
    }
}

pub fn check_blowups(blown: usize, total: usize) -> Result<(), SdeError> {
    if total > 0 && blown as f64 > BLOWUP_BUDGET * total as f64 {
        return Err(SdeError::TooManyBlowups { blown, total });
    }
    Ok(())
}

/// Simulate and keep `n_paths` paths.
pub fn simulate_paths(
    model: &dyn SdeModel,
    grid: &TimeGrid,
    y0: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<PathBatch, SdeError> {
    let mapped = map_paths(model, grid, y0, n_paths, seed, |_, p| p.clone())?;
    Ok(PathBatch {
        paths: mapped.values,
        blown_up: mapped.blown_up,
    })
}

/// Per-path results in path order, skipping paths that blew up.
#[derive(Debug, Clone)]
pub struct Mapped<T> {
    pub values: Vec<T>,
    pub blown_up: usize,
}

/// Simulate paths one at a time and reduce each with `f(path_index, path)`.
/// Output order is path order regardless of the thread pool.
pub fn map_paths<T: Send, F>(
    model: &dyn SdeModel,
    grid: &TimeGrid,
    y0: &[f64],
    n_paths: usize,
    seed: u64,
    f: F,
) -> Result<Mapped<T>, SdeError>
where
    F: Fn(usize, &MarketPath) -> T + Sync,
{
    validate_model(model)?;
    let results: Vec<Result<Option<T>, SdeError>> = (0..n_paths)
        .into_par_iter()
        .map(|i| simulate_path(model, grid, y0, seed, i as u64).map(|p| p.map(|p| f(i, &p))))
        .collect();
    let mut values = Vec::with_capacity(n_paths);
    let mut blown_up = 0;
    for r in results {
        match r? {
            Some(v) => values.push(v),
            None => blown_up += 1,
        }
    }
    Ok(Mapped { values, blown_up })
}

/// Linearised one-step map `I + db/dx dt + sum_j dV_j/dx dB_j` at step `k`.
pub fn step_jacobian(model: &dyn SdeModel, path: &MarketPath, k: usize) -> DMatrix<f64> {
    let m = model.state_dim();
    let t = path.grid.time(k);
    let x = path.state(k);
    let mut a = DMatrix::zeros(m, m);
    model.drift_jacobian(t, x, &mut a);
    let mut s = DMatrix::identity(m, m) + a * path.grid.dt;
    let mut dv = DMatrix::zeros(m, m);
    for (j, &db) in path.increment(k).iter().enumerate() {
        model.diffusion_jacobian(t, x, j, &mut dv);
        s += &dv * db;
    }
    s
}

/// Forward flow `J[u <- s]` for grid indices `u = start..=end`.
#[derive(Debug, Clone)]
pub struct FlowJacobian {
    pub start: usize,
    pub forward: Vec<DMatrix<f64>>,
}

impl FlowJacobian {
    /// `J[u <- start]`.
    pub fn at(&self, u: usize) -> &DMatrix<f64> {
        &self.forward[u - self.start]
    }

    pub fn terminal(&self) -> &DMatrix<f64> {
        self.forward.last().expect("non-empty flow")
    }
}

fn check_window(path: &MarketPath, start: usize, end: usize) -> Result<(), SdeError> {
    if start > end || end > path.n_steps() {
        return Err(SdeError::Grid(format!(
            "window [{start}, {end}] outside path with {} steps",
            path.n_steps()
        )));
    }
    Ok(())
}

pub fn flow_jacobian(
    model: &dyn SdeModel,
    path: &MarketPath,
    start: usize,
    end: usize,
) -> Result<FlowJacobian, SdeError> {
    check_window(path, start, end)?;
    let m = model.state_dim();
    let mut forward = Vec::with_capacity(end - start + 1);
    let mut j = DMatrix::identity(m, m);
    forward.push(j.clone());
    for k in start..end {
        j = step_jacobian(model, path, k) * j;
        forward.push(j.clone());
    }
    Ok(FlowJacobian { start, forward })
}

/// `J[end <- k]` for `k = start..=end`, by backward products.
pub fn flow_to_end(
    model: &dyn SdeModel,
    path: &MarketPath,
    start: usize,
    end: usize,
) -> Result<Vec<DMatrix<f64>>, SdeError> {
    check_window(path, start, end)?;
    let m = model.state_dim();
    let mut out = vec![DMatrix::zeros(m, m); end - start + 1];
    let mut j = DMatrix::identity(m, m);
    out[end - start] = j.clone();
    for k in (start..end).rev() {
        j = &j * step_jacobian(model, path, k);
        out[k - start] = j.clone();
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MalliavinCov {
    pub matrix: DMatrix<f64>,
    pub min_eigenvalue: f64,
}

/// `Gamma = int_start^end J[end<-s] A(s) J[end<-s]^T ds`, `A = V R V^T`,
/// by the trapezoid rule on the grid.
pub fn malliavin_covariance(
    model: &dyn SdeModel,
    path: &MarketPath,
    start: usize,
    end: usize,
) -> Result<MalliavinCov, SdeError> {
    let to_end = flow_to_end(model, path, start, end)?;
    let m = model.state_dim();
    let d = model.noise_dim();
    let r = model.correlation();
    let mut v = DMatrix::zeros(m, d);
    let mut gamma = DMatrix::zeros(m, m);
    let dt = path.grid.dt;
    for k in start..=end {
        let w = if k == start || k == end { 0.5 * dt } else { dt };
        model.diffusion(path.grid.time(k), path.state(k), &mut v);
        let a = &v * r * v.transpose();
        let j = &to_end[k - start];
        gamma += (j * a * j.transpose()) * w;
    }
    let min_eigenvalue = min_sym_eigenvalue(&gamma);
    Ok(MalliavinCov {
        matrix: gamma,
        min_eigenvalue,
    })
}

/// Flow from `start` and Malliavin covariance over `[start, end]`; fails if
/// the covariance is numerically singular.
pub fn flow_and_malliavin(
    model: &dyn SdeModel,
    path: &MarketPath,
    start: usize,
    end: usize,
) -> Result<(FlowJacobian, MalliavinCov), SdeError> {
    let flow = flow_jacobian(model, path, start, end)?;
    let cov = malliavin_covariance(model, path, start, end)?;
    let scale = cov.matrix.trace().abs().max(f64::MIN_POSITIVE);
    if cov.min_eigenvalue <= 1e-12 * scale || cov.min_eigenvalue <= 0.0 {
        return Err(SdeError::SingularMalliavin {
            min_eigenvalue: cov.min_eigenvalue,
        });
    }
    Ok((flow, cov))
}

/// Elliptic Bismut-Elworthy-Li weight over `[start, end]`:
///
/// ```text
/// H = 1/(t_end - t_start) * sum_k (S_k^{-1} J[k<-start] S_start)^T dW_k
/// ```
///
/// with `S = V L`, `L L^T = R` and `dW = L^{-1} dB`. Then for smooth `f`,
/// `E[f(Y_end) H] = S_start^T grad_y E[f(Y_end) | Y_start = y]`.
pub fn bel_weight(
    model: &dyn SdeModel,
    path: &MarketPath,
    start: usize,
    end: usize,
) -> Result<DVector<f64>, SdeError> {
    check_window(path, start, end)?;
    if end == start {
        return Err(SdeError::Grid("BEL window must contain at least one step".into()));
    }
    let m = model.state_dim();
    let d = model.noise_dim();
    if m != d {
        return Err(SdeError::NotElliptic { step: start });
    }
    let l = cholesky_lower(model.correlation()).ok_or(SdeError::CorrelationNotPd)?;
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or(SdeError::CorrelationNotPd)?;
    let mut v = DMatrix::zeros(m, d);
    model.diffusion(path.grid.time(start), path.state(start), &mut v);
    let sigma_start = &v * &l;
    let mut h = DVector::zeros(d);
    let mut j = DMatrix::identity(m, m);
    for k in start..end {
        model.diffusion(path.grid.time(k), path.state(k), &mut v);
        let sigma_k = &v * &l;
        let sigma_inv = sigma_k
            .try_inverse()
            .ok_or(SdeError::NotElliptic { step: k })?;
        let kernel = sigma_inv * &j * &sigma_start;
        let dw = &l_inv * DVector::from_column_slice(path.increment(k));
        h += kernel.transpose() * dw;
        j = step_jacobian(model, path, k) * j;
    }
    Ok(h / (path.grid.time(end) - path.grid.time(start)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gbm_stratonovich_drift() {
        let g = Gbm::new(0.1, 0.2);
        let v = stratonovich_drift(&g, 0.0, &[2.0]);
        assert!((v[0] - (0.1 * 2.0 - 0.5 * 0.04 * 2.0)).abs() < 1e-10);
    }

    #[test]
    fn diagonal_state_diffusion_correction() {
        let m = FnSde::ito(
            2,
            2,
            DMatrix::identity(2, 2),
            |_, _| DVector::zeros(2),
            |_, x| DMatrix::from_diagonal(&DVector::from_column_slice(x)),
        )
        .unwrap();
        let c = stratonovich_correction(&m, 0.0, &[1.5, -0.7]);
        assert!((c[0] - 0.75).abs() < 1e-9);
        assert!((c[1] + 0.35).abs() < 1e-9);
    }

    #[test]
    fn rejects_indefinite_correlation() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let res = ArithmeticBrownian::new(DVector::zeros(2), DMatrix::identity(2, 2), r);
        assert_eq!(res.unwrap_err(), SdeError::CorrelationNotPd);
    }

    #[test]
    fn constant_vol_malliavin_is_sigma_squared_times_window() {
        let m = ArithmeticBrownian::scalar(0.0, 0.3);
        let grid = TimeGrid::new(0.0, 2.0, 40).unwrap();
        let p = simulate_path(&m, &grid, &[1.0], 1, 0).unwrap().unwrap();
        let g = malliavin_covariance(&m, &p, 10, 40).unwrap();
        assert!((g.matrix[(0, 0)] - 0.09 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn zero_diffusion_is_singular() {
        let m = ArithmeticBrownian::scalar(0.1, 0.0);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let p = simulate_path(&m, &grid, &[1.0], 1, 0).unwrap().unwrap();
        assert!(matches!(
            flow_and_malliavin(&m, &p, 0, 10),
            Err(SdeError::SingularMalliavin { .. })
        ));
        assert!(matches!(bel_weight(&m, &p, 0, 10), Err(SdeError::NotElliptic { .. })));
    }

    #[test]
    fn blowups_are_counted() {
        let m = FnSde::ito(
            1,
            1,
            DMatrix::identity(1, 1),
            |_, x| DVector::from_element(1, x[0] * x[0] * 1e6),
            |_, _| DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let b = simulate_paths(&m, &grid, &[10.0], 20, 3).unwrap();
        assert_eq!(b.blown_up, 20);
        assert!(b.check_blowups().is_err());
    }
}
