//! Policy-gradient controller.
//!
//! A linear policy `v = Theta f` (with `Theta` the parameter vector reshaped
//! to `N x F`) is trained by preconditioned stochastic gradient ascent
//!
//! ```text
//! theta_{k+1} = theta_k + eta_k G^{-1} (g_k + b_k + xi_k)
//! ```
//!
//! where `g_k` is the batch gradient of the clean objective, `b_k` the
//! contamination (implemented minus clean gradient) and `xi_k` optional
//! injected noise of known variance. The self-bias accumulator
//! `sum_k <b_k, theta_{k+1} - theta_k>` tracks how much of the progress came
//! from the contamination.

use crate::mo_controller::{project_speed, FeasibleSet, MoError};
use crate::numeric::{max_sym_eigenvalue, min_sym_eigenvalue};
use crate::rng::{stream, Domain, GaussianStream};
use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlError {
    /// Training stopped; `trace` holds every iterate up to the divergent one.
    #[error("parameters diverged at iteration {iteration} (norm {norm:e})")]
    Diverged {
        iteration: usize,
        norm: f64,
        trace: Box<TrainTrace>,
    },
    #[error("gradient method {0:?} not supported by this environment")]
    Unsupported(GradientMethod),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Projection(#[from] MoError),
}

/// Parameter norm beyond which training stops.
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    Pathwise,
    Score,
}

/// Linear policy parameters, row-major `N x F`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub theta: DVector<f64>,
    pub n_assets: usize,
    pub n_features: usize,
    /// Standard deviation of Gaussian exploration added to the action.
    pub exploration_sd: f64,
}

impl PolicyParams {
    pub fn new(theta: DVector<f64>, n_assets: usize, n_features: usize) -> Result<Self, RlError> {
        if theta.len() != n_assets * n_features {
            return Err(RlError::Dimension(format!(
                "theta has {} entries, expected {}",
                theta.len(),
                n_assets * n_features
            )));
        }
        Ok(Self {
            theta,
            n_assets,
            n_features,
            exploration_sd: 0.0,
        })
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_assets, self.n_features, self.theta.as_slice())
    }
}

/// Deterministic part of the action, `Theta f`.
pub fn policy_action(params: &PolicyParams, features: &DVector<f64>) -> Result<DVector<f64>, RlError> {
    if features.len() != params.n_features {
        return Err(RlError::Dimension("feature length".into()));
    }
    Ok(params.matrix() * features)
}

/// Linear policy whose raw output is optionally projected onto the
/// feasible speeds.
#[derive(Debug, Clone)]
pub struct LinearPolicy {
    pub params: PolicyParams,
    pub clip: Option<FeasibleSet>,
}

impl LinearPolicy {
    pub fn act(&self, features: &DVector<f64>, position: &DVector<f64>, dt: f64) -> Result<DVector<f64>, RlError> {
        let raw = policy_action(&self.params, features)?;
        match &self.clip {
            None => Ok(raw),
            Some(f) => Ok(project_speed(&raw, position, f, dt)?),
        }
    }
}

/// One gradient sample: the clean-objective gradient and the gradient the
/// implementation actually computes, on the same randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub naive: DVector<f64>,
    pub implemented: DVector<f64>,
}

/// Objective and gradient oracle for a parameter vector.
pub trait PolicyEnvironment: Sync {
    fn dim(&self) -> usize;
    /// Clean objective `J(theta)`.
    fn objective(&self, theta: &DVector<f64>) -> f64;
    fn optimal_value(&self) -> Option<f64> {
        None
    }
    fn exact_gradient(&self, _theta: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
    fn gradient_sample(
        &self,
        theta: &DVector<f64>,
        method: GradientMethod,
        rng: &mut ChaCha8Rng,
    ) -> Result<GradientSample, RlError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub naive: DVector<f64>,
    pub implemented: DVector<f64>,
    /// Trace of the covariance of the batch-mean clean gradient.
    pub cov_trace: f64,
}

/// Batch-mean gradient with the trace of its estimated covariance.
pub fn estimate_policy_gradient(
    env: &dyn PolicyEnvironment,
    theta: &DVector<f64>,
    batch: usize,
    method: GradientMethod,
    rng: &mut ChaCha8Rng,
) -> Result<GradientEstimate, RlError> {
    if batch == 0 {
        return Err(RlError::Config("batch must be positive".into()));
    }
    let p = env.dim();
    let mut sum = DVector::zeros(p);
    let mut sum_impl = DVector::zeros(p);
    let mut sq = DVector::zeros(p);
    for _ in 0..batch {
        let s = env.gradient_sample(theta, method, rng)?;
        sq += s.naive.component_mul(&s.naive);
        sum += &s.naive;
        sum_impl += &s.implemented;
    }
    let b = batch as f64;
    let naive = sum / b;
    let cov_trace = if batch > 1 {
        let var = (sq / b - naive.component_mul(&naive)) * (b / (b - 1.0));
        var.iter().map(|v| v.max(0.0)).sum::<f64>() / b
    } else {
        0.0
    };
    Ok(GradientEstimate {
        naive,
        implemented: sum_impl / b,
        cov_trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { eta: f64 },
    /// `eta_k = scale / (mu (k + offset))` for `k = 1, 2, ...`.
    Decreasing { scale: f64, mu: f64, offset: f64 },
}

impl StepSchedule {
    pub fn eta(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::Decreasing { scale, mu, offset } => scale / (mu * ((k + 1) as f64 + offset)),
        }
    }
}

/// How the implemented gradient departs from the clean one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Contamination {
    None,
    /// Fixed additive bias.
    Additive { bias: Vec<f64> },
    /// Whatever the environment's implemented gradient contains.
    Environment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub schedule: StepSchedule,
    /// `G`, identity when absent.
    pub preconditioner: Option<DMatrix<f64>>,
    /// Total variance `E||xi||^2` of injected noise per iteration.
    pub injected_noise: f64,
    pub method: GradientMethod,
    pub contamination: Contamination,
}

impl TrainConfig {
    pub fn plain(iterations: usize, schedule: StepSchedule) -> Self {
        Self {
            iterations,
            batch: 1,
            schedule,
            preconditioner: None,
            injected_noise: 0.0,
            method: GradientMethod::Pathwise,
            contamination: Contamination::None,
        }
    }
}

/// Per-iteration record. Index `k` describes `theta_k` and the step taken
/// from it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub thetas: Vec<DVector<f64>>,
    pub objective: Vec<f64>,
    /// `J* - J(theta_k)` when the optimum is known.
    pub gap: Vec<f64>,
    pub naive_grads: Vec<DVector<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub etas: Vec<f64>,
    pub grad_cov_trace: Vec<f64>,
    /// Running `sum_k <b_k, theta_{k+1} - theta_k>`.
    pub self_bias: Vec<f64>,
}

impl TrainTrace {
    pub fn final_theta(&self) -> &DVector<f64> {
        self.thetas.last().expect("trace is never empty")
    }

    pub fn total_self_bias(&self) -> f64 {
        self.self_bias.last().copied().unwrap_or(0.0)
    }
}

/// Run `K` iterations from `theta0`. Returns the trace with `K + 1`
/// parameter vectors.
pub fn train(
    env: &dyn PolicyEnvironment,
    theta0: &DVector<f64>,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainTrace, RlError> {
    let p = env.dim();
    if theta0.len() != p {
        return Err(RlError::Dimension("initial parameters".into()));
    }
    let g_inv = match &config.preconditioner {
        None => None,
        Some(g) => {
            if g.nrows() != p || min_sym_eigenvalue(g) <= 0.0 {
                return Err(RlError::Config("preconditioner must be positive definite".into()));
            }
            Some(g.clone().try_inverse().ok_or(RlError::Config("singular preconditioner".into()))?)
        }
    };
    if let Contamination::Additive { bias } = &config.contamination {
        if bias.len() != p {
            return Err(RlError::Dimension("contamination bias".into()));
        }
    }
    let opt = env.optimal_value();
    let mut trace = TrainTrace {
        thetas: Vec::with_capacity(config.iterations + 1),
        objective: Vec::with_capacity(config.iterations + 1),
        gap: Vec::with_capacity(config.iterations + 1),
        naive_grads: Vec::with_capacity(config.iterations),
        biases: Vec::with_capacity(config.iterations),
        etas: Vec::with_capacity(config.iterations),
        grad_cov_trace: Vec::with_capacity(config.iterations),
        self_bias: Vec::with_capacity(config.iterations),
    };
    let mut theta = theta0.clone();
    let mut noise = vec![0.0; p];
    let noise_sd = (config.injected_noise / p as f64).sqrt();
    let mut accumulated = 0.0;
    for k in 0..=config.iterations {
        let j = env.objective(&theta);
        trace.objective.push(j);
        trace.gap.push(opt.map(|o| o - j).unwrap_or(f64::NAN));
        trace.thetas.push(theta.clone());
        if k == config.iterations {
            break;
        }
        let mut rng = stream(seed, Domain::Gradient, k as u64);
        let est = estimate_policy_gradient(env, &theta, config.batch, config.method, &mut rng)?;
        let bias = match &config.contamination {
            Contamination::None => DVector::zeros(p),
            Contamination::Additive { bias } => DVector::from_column_slice(bias),
            Contamination::Environment => &est.implemented - &est.naive,
        };
        let mut g = &est.naive + &bias;
        if config.injected_noise > 0.0 {
            GaussianStream::new(seed, Domain::Perturbation, k as u64, p).next_block(&mut noise);
            for (gi, z) in g.iter_mut().zip(&noise) {
                *gi += noise_sd * z;
            }
        }
        let eta = config.schedule.eta(k);
        let direction = match &g_inv {
            None => g,
            Some(m) => m * g,
        };
        let step = direction * eta;
        accumulated += bias.dot(&step);
        theta += &step;
        trace.naive_grads.push(est.naive);
        trace.biases.push(bias);
        trace.etas.push(eta);
        trace.grad_cov_trace.push(est.cov_trace);
        trace.self_bias.push(accumulated);
        let norm = theta.norm();
        if !(norm <= DIVERGENCE_BOUND) {
            trace.thetas.push(theta);
            return Err(RlError::Diverged {
                iteration: k + 1,
                norm,
                trace: Box::new(trace),
            });
        }
    }
    Ok(trace)
}

/// Self-bias `sum_k eta_k <b_k, g_naive_k + b_k>` computed from its parts;
/// equals the accumulator of a noiseless, unpreconditioned run.
pub fn self_bias_from_parts(trace: &TrainTrace) -> f64 {
    trace
        .biases
        .iter()
        .zip(&trace.naive_grads)
        .zip(&trace.etas)
        .map(|((b, g), eta)| eta * (b.dot(b) + b.dot(g)))
        .sum()
}

/// Concave quadratic testbed `J = -1/2 sum_i l_i (theta_i - c_i)^2` with
/// additive Gaussian gradient noise of total variance `noise_var`.
#[derive(Debug, Clone)]
pub struct QuadraticTestbed {
    pub curvatures: Vec<f64>,
    pub optimum: Vec<f64>,
    pub noise_var: f64,
}

impl QuadraticTestbed {
    /// Curvatures spread geometrically between `mu` and `l`.
    pub fn spread(dim: usize, mu: f64, l: f64, noise_var: f64) -> Self {
        let curvatures = (0..dim)
            .map(|i| {
                if dim == 1 {
                    mu
                } else {
                    mu * (l / mu).powf(i as f64 / (dim - 1) as f64)
                }
            })
            .collect();
        Self {
            curvatures,
            optimum: vec![0.0; dim],
            noise_var,
        }
    }

    pub fn strong_concavity(&self) -> f64 {
        self.curvatures.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn smoothness(&self) -> f64 {
        self.curvatures.iter().cloned().fold(0.0, f64::max)
    }

    /// Stationary mean gap of constant-step SGD,
    /// `sum_i eta s^2 / (2 (2 - eta l_i))` with `s^2 = noise_var / dim`.
    pub fn sgd_floor(&self, eta: f64) -> f64 {
        let s2 = self.noise_var / self.curvatures.len() as f64;
        self.curvatures.iter().map(|l| eta * s2 / (2.0 * (2.0 - eta * l))).sum()
    }
}

impl PolicyEnvironment for QuadraticTestbed {
    fn dim(&self) -> usize {
        self.curvatures.len()
    }
    fn objective(&self, theta: &DVector<f64>) -> f64 {
        -0.5 * self
            .curvatures
            .iter()
            .zip(&self.optimum)
            .zip(theta.iter())
            .map(|((l, c), t)| l * (t - c) * (t - c))
            .sum::<f64>()
    }
    fn optimal_value(&self) -> Option<f64> {
        Some(0.0)
    }
    fn exact_gradient(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        Some(DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| -self.curvatures[i] * (theta[i] - self.optimum[i])),
        ))
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
        let mut g = self.exact_gradient(theta).expect("analytic");
        if self.noise_var > 0.0 {
            let s = (self.noise_var / self.dim() as f64).sqrt();
            for gi in g.iter_mut() {
                *gi += s * gaussian(rng);
            }
        }
        Ok(GradientSample {
            naive: g.clone(),
            implemented: g,
        })
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One-step linear-Gaussian bandit: features `x ~ N(0, I)` (or a fixed
/// vector), action `a = <theta, x> + s z`, reward `-1/2 (a - <beta, x>)^2`.
/// Supports both gradient methods.
#[derive(Debug, Clone)]
pub struct LinearGaussianBandit {
    pub target: Vec<f64>,
    pub exploration_sd: f64,
    /// Use this feature vector on every draw instead of sampling.
    pub fixed_features: Option<Vec<f64>>,
}

impl LinearGaussianBandit {
    fn features(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match &self.fixed_features {
            Some(x) => DVector::from_column_slice(x),
            None => DVector::from_iterator(self.target.len(), (0..self.target.len()).map(|_| gaussian(rng))),
        }
    }
}

impl PolicyEnvironment for LinearGaussianBandit {
    fn dim(&self) -> usize {
        self.target.len()
    }
    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let diff = theta - DVector::from_column_slice(&self.target);
        let quad = match &self.fixed_features {
            Some(x) => diff.dot(&DVector::from_column_slice(x)).powi(2),
            None => diff.norm_squared(),
        };
        -0.5 * quad - 0.5 * self.exploration_sd * self.exploration_sd
    }
    fn optimal_value(&self) -> Option<f64> {
        Some(-0.5 * self.exploration_sd * self.exploration_sd)
    }
    fn exact_gradient(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        let diff = theta - DVector::from_column_slice(&self.target);
        Some(match &self.fixed_features {
            Some(x) => {
                let x = DVector::from_column_slice(x);
                -&x * diff.dot(&x)
            }
            None => -diff,
        })
    }
    fn gradient_sample(
        &self,
        theta: &DVector<f64>,
        method: GradientMethod,
        rng: &mut ChaCha8Rng,
    ) -> Result<GradientSample, RlError> {
        let x = self.features(rng);
        let z = if self.exploration_sd > 0.0 { gaussian(rng) } else { 0.0 };
        let mean_action = theta.dot(&x);
        let a = mean_action + self.exploration_sd * z;
        let err = a - DVector::from_column_slice(&self.target).dot(&x);
        let g = match method {
            GradientMethod::Pathwise => -&x * err,
            GradientMethod::Score => {
                if self.exploration_sd <= 0.0 {
                    return Err(RlError::Unsupported(method));
                }
                let reward = -0.5 * err * err;
                let s2 = self.exploration_sd * self.exploration_sd;
                &x * (reward * (a - mean_action) / s2)
            }
        };
        Ok(GradientSample {
            naive: g.clone(),
            implemented: g,
        })
    }
}

/// `gamma(K) = RL gap / MO gap` pointwise.
pub fn gap_ratio(rl_gap: &[f64], mo_gap: &[f64]) -> Vec<f64> {
    rl_gap.iter().zip(mo_gap).map(|(r, m)| r / m).collect()
}

/// Mean over the trailing `fraction` of a series.
pub fn plateau(series: &[f64], fraction: f64) -> f64 {
    let n = series.len();
    let start = ((1.0 - fraction) * n as f64).floor() as usize;
    crate::stats::mean(&series[start.min(n.saturating_sub(1))..])
}

/// Bounds from curvature: `(mu, L)` of a symmetric negative Hessian.
pub fn curvature_bounds(neg_hessian: &DMatrix<f64>) -> (f64, f64) {
    (min_sym_eigenvalue(neg_hessian), max_sym_eigenvalue(neg_hessian))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_policy_action() {
        let p = PolicyParams::new(DVector::from_vec(vec![0.0, -1.0, 0.0]), 1, 3).unwrap();
        let a = policy_action(&p, &DVector::from_vec(vec![1.0, 2.0, 0.7])).unwrap();
        assert_eq!(a[0], -2.0);
    }

    #[test]
    fn clipped_action_is_projection_of_raw() {
        use crate::mo_controller::SpeedCap;
        let params = PolicyParams::new(DVector::from_vec(vec![3.0, -1.0]), 1, 2).unwrap();
        let mut feasible = FeasibleSet::unconstrained(1);
        feasible.speed_cap = SpeedCap::Box { cap: vec![0.5] };
        let pol = LinearPolicy {
            params: params.clone(),
            clip: Some(feasible.clone()),
        };
        let x = DVector::from_vec(vec![1.0, 0.2]);
        let pos = DVector::from_vec(vec![0.0]);
        let raw = policy_action(&params, &x).unwrap();
        let expected = project_speed(&raw, &pos, &feasible, 0.01).unwrap();
        assert_eq!(pol.act(&x, &pos, 0.01).unwrap(), expected);
        assert_eq!(expected[0], 0.5);
    }

    #[test]
    fn deterministic_pathwise_is_exact() {
        let env = LinearGaussianBandit {
            target: vec![0.5, -0.2],
            exploration_sd: 0.0,
            fixed_features: Some(vec![1.0, 2.0]),
        };
        let theta = DVector::from_vec(vec![0.1, 0.3]);
        let mut rng = stream(1, Domain::Gradient, 0);
        let est = estimate_policy_gradient(&env, &theta, 8, GradientMethod::Pathwise, &mut rng).unwrap();
        assert_eq!(est.naive, env.exact_gradient(&theta).unwrap());
        assert!(est.cov_trace.abs() < 1e-28);
    }

    #[test]
    fn divergence_is_reported() {
        let env = QuadraticTestbed::spread(2, 1.0, 10.0, 0.0);
        let cfg = TrainConfig::plain(500, StepSchedule::Constant { eta: 0.5 });
        match train(&env, &DVector::from_vec(vec![1.0, 1.0]), &cfg, 0) {
            Err(RlError::Diverged { iteration, trace, .. }) => {
                assert_eq!(trace.thetas.len(), iteration + 1);
                assert!(trace.final_theta().norm() > DIVERGENCE_BOUND);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn orthogonal_bias_self_bias() {
        // gradient lives in the first coordinate, bias in the second
        let env = QuadraticTestbed {
            curvatures: vec![1.0, 0.0],
            optimum: vec![0.0, 0.0],
            noise_var: 0.0,
        };
        let mut cfg = TrainConfig::plain(50, StepSchedule::Constant { eta: 0.1 });
        cfg.contamination = Contamination::Additive { bias: vec![0.0, 0.3] };
        let t = train(&env, &DVector::from_vec(vec![1.0, 0.0]), &cfg, 0).unwrap();
        assert!((t.total_self_bias() - 0.1 * 50.0 * 0.09).abs() < 1e-12);
        assert!((self_bias_from_parts(&t) - t.total_self_bias()).abs() < 1e-12);
    }
}
