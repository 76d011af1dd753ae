//! Myopic-optimal controller.
//!
//! At each step the trading speed maximises the separable instantaneous gain
//!
//! ```text
//! <d, v> - <lambda, |v|> - 1/2 v^T Xi v,    d = mu - Q phi - grad HC(phi) - lambda_risk
//! ```
//!
//! then is projected onto the feasible set (speed cap, position box,
//! participation cap, window risk budget). The zero-trade wedge is exact:
//! `v = 0` whenever `|d_i| <= lambda_i` for every asset.
//!
//! Also here: the discrete transient-impact adjoint, shadow prices of a
//! terminal functional, feasibility projection and the KKT residual.

use crate::frictions::{lag_weights, window_lags, ImpactKernel};
use crate::ledger::HoldingCostModel;
use crate::numeric::{soft_threshold, KahanSum};
use crate::risk::gaussian_tail_proxy;
use crate::sde_engine::{bel_weight, flow_to_end, MarketPath, SdeError, SdeModel};
use crate::stats;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MoError {
    #[error("infeasible constraints: {0}")]
    Infeasible(String),
    #[error("temporary impact must have a positive diagonal and be positive definite")]
    ImpactNotPd,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Sde(#[from] SdeError),
}

/// Coefficients of the separable instantaneous gain.
#[derive(Debug, Clone)]
pub struct SeparableGain {
    /// Expected price drift per unit position.
    pub drift: DVector<f64>,
    /// Inventory penalty `Q`.
    pub inventory: DMatrix<f64>,
    /// Proportional cost per unit speed.
    pub l1: DVector<f64>,
    /// Curvature of the speed cost, positive definite.
    pub temp_impact: DMatrix<f64>,
    /// Holding cost and the mids it is evaluated at.
    pub holding: Option<(HoldingCostModel, DVector<f64>)>,
}

impl SeparableGain {
    pub fn n_assets(&self) -> usize {
        self.drift.len()
    }

    /// Drive `mu - Q phi - grad HC - lambda_risk`.
    pub fn drive(&self, position: &DVector<f64>, risk_price: &DVector<f64>) -> DVector<f64> {
        let mut d = &self.drift - &self.inventory * position - risk_price;
        if let Some((hc, mid)) = &self.holding {
            d -= hc.gradient(position, mid);
        }
        d
    }

    /// Value of the instantaneous objective at speed `v` for a given drive.
    pub fn objective(&self, drive: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let l1: f64 = v.iter().zip(self.l1.iter()).map(|(x, l)| l * x.abs()).sum();
        drive.dot(v) - l1 - 0.5 * v.dot(&(&self.temp_impact * v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpeedCap {
    None,
    /// `|v_i| <= cap_i`.
    Box { cap: Vec<f64> },
    /// `||v||_2 <= cap`.
    Norm { cap: f64 },
}

/// Window CVaR budget under the Gaussian proxy of the next-window loss.
#[derive(Debug, Clone)]
pub struct RiskBudget {
    pub cap: f64,
    pub alpha: f64,
    pub window: f64,
    pub drift: DVector<f64>,
    /// Price covariance per unit time.
    pub covariance: DMatrix<f64>,
}

impl RiskBudget {
    pub fn proxy_cvar(&self, position: &DVector<f64>) -> f64 {
        let mean = -position.dot(&self.drift) * self.window;
        let var = position.dot(&(&self.covariance * position)) * self.window;
        gaussian_tail_proxy(mean, var.max(0.0).sqrt(), self.alpha)
            .map(|(_, c)| c)
            .unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone)]
pub struct FeasibleSet {
    pub speed_cap: SpeedCap,
    pub position_lo: DVector<f64>,
    pub position_hi: DVector<f64>,
    /// `(ADV, cap)`: `|phi_i| <= cap * ADV_i`.
    pub participation: Option<(DVector<f64>, f64)>,
    pub risk_budget: Option<RiskBudget>,
}

impl FeasibleSet {
    pub fn unconstrained(n: usize) -> Self {
        Self {
            speed_cap: SpeedCap::None,
            position_lo: DVector::from_element(n, f64::NEG_INFINITY),
            position_hi: DVector::from_element(n, f64::INFINITY),
            participation: None,
            risk_budget: None,
        }
    }

    /// Effective position box after the participation cap.
    pub fn position_box(&self) -> Result<(DVector<f64>, DVector<f64>), MoError> {
        let mut lo = self.position_lo.clone();
        let mut hi = self.position_hi.clone();
        if let Some((adv, cap)) = &self.participation {
            for i in 0..lo.len() {
                let b = cap * adv[i];
                lo[i] = lo[i].max(-b);
                hi[i] = hi[i].min(b);
            }
        }
        for i in 0..lo.len() {
            if lo[i] > hi[i] {
                return Err(MoError::Infeasible(format!(
                    "position bounds for asset {i}: [{}, {}]",
                    lo[i], hi[i]
                )));
            }
        }
        Ok((lo, hi))
    }

    /// Box on the speed implied by the position constraints and a box cap.
    fn speed_box(&self, position: &DVector<f64>, dt: f64) -> Result<(DVector<f64>, DVector<f64>), MoError> {
        let (plo, phi) = self.position_box()?;
        let n = position.len();
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for i in 0..n {
            lo[i] = (plo[i] - position[i]) / dt;
            hi[i] = (phi[i] - position[i]) / dt;
            if let SpeedCap::Box { cap } = &self.speed_cap {
                lo[i] = lo[i].max(-cap[i]);
                hi[i] = hi[i].min(cap[i]);
            }
            if lo[i] > hi[i] {
                return Err(MoError::Infeasible(format!("speed bounds for asset {i}")));
            }
        }
        Ok((lo, hi))
    }
}

fn clip(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(v.len(), (0..v.len()).map(|i| v[i].clamp(lo[i], hi[i])))
}

fn ball(v: &DVector<f64>, r: f64) -> DVector<f64> {
    let n = v.norm();
    if n <= r {
        v.clone()
    } else {
        v * (r / n)
    }
}

/// Euclidean projection of a speed onto the feasible speeds, by Dykstra's
/// cyclic projections when a norm cap meets the box.
pub fn project_speed(
    v: &DVector<f64>,
    position: &DVector<f64>,
    feasible: &FeasibleSet,
    dt: f64,
) -> Result<DVector<f64>, MoError> {
    let (lo, hi) = feasible.speed_box(position, dt)?;
    let r = match feasible.speed_cap {
        SpeedCap::Norm { cap } => cap,
        _ => return Ok(clip(v, &lo, &hi)),
    };
    let dist_to_box: f64 = (0..lo.len())
        .map(|i| {
            let e = (lo[i].max(0.0) - hi[i].min(0.0)).max(0.0);
            e * e
        })
        .sum::<f64>()
        .sqrt();
    if dist_to_box > r {
        return Err(MoError::Infeasible("speed cap excludes the position box".into()));
    }
    let mut x = v.clone();
    let mut p = DVector::zeros(v.len());
    let mut q = DVector::zeros(v.len());
    for _ in 0..10_000 {
        let y = clip(&(&x + &p), &lo, &hi);
        p = &x + &p - &y;
        let x_new = ball(&(&y + &q), r);
        q = &y + &q - &x_new;
        let change = (&x_new - &x).amax();
        x = x_new;
        if change <= 1e-10 {
            break;
        }
    }
    // land exactly inside both sets
    let x = clip(&x, &lo, &hi);
    Ok(if x.norm() > r { ball(&x, r) } else { x })
}

/// Euclidean projection of a position onto the position box and
/// participation band.
pub fn project_feasible(position: &DVector<f64>, feasible: &FeasibleSet) -> Result<DVector<f64>, MoError> {
    let (lo, hi) = feasible.position_box()?;
    Ok(clip(position, &lo, &hi))
}

/// Solve `max <d, v> - <lambda, |v|> - 1/2 v^T Xi v` by coordinate-wise
/// proximal sweeps. Returns the maximiser and the number of sweeps.
pub fn prox_speed(
    drive: &DVector<f64>,
    l1: &DVector<f64>,
    xi: &DMatrix<f64>,
) -> Result<(DVector<f64>, usize), MoError> {
    let n = drive.len();
    if (0..n).any(|i| xi[(i, i)] <= 0.0) {
        return Err(MoError::ImpactNotPd);
    }
    let mut v = DVector::zeros(n);
    if (0..n).all(|i| drive[i].abs() <= l1[i]) {
        return Ok((v, 0));
    }
    for sweep in 1..=500 {
        let mut change: f64 = 0.0;
        for i in 0..n {
            let mut r = drive[i];
            for j in 0..n {
                if j != i {
                    r -= xi[(i, j)] * v[j];
                }
            }
            let new = soft_threshold(r, l1[i]) / xi[(i, i)];
            change = change.max((new - v[i]).abs());
            v[i] = new;
        }
        if change <= 1e-10 {
            return Ok((v, sweep));
        }
    }
    Ok((v, 500))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MyopicAction {
    pub speed: DVector<f64>,
    pub drive: DVector<f64>,
    pub in_wedge: bool,
    pub sweeps: usize,
    /// Factor applied to meet the risk budget (1 when not binding).
    pub risk_scale: f64,
}

/// One myopic decision over a step of length `dt`.
pub fn myopic_step(
    gain: &SeparableGain,
    position: &DVector<f64>,
    risk_price: &DVector<f64>,
    feasible: &FeasibleSet,
    dt: f64,
) -> Result<MyopicAction, MoError> {
    let n = gain.n_assets();
    if position.len() != n || risk_price.len() != n {
        return Err(MoError::Dimension("myopic inputs".into()));
    }
    let drive = gain.drive(position, risk_price);
    let in_wedge = (0..n).all(|i| drive[i].abs() <= gain.l1[i]);
    let (raw, sweeps) = prox_speed(&drive, &gain.l1, &gain.temp_impact)?;
    let mut speed = project_speed(&raw, position, feasible, dt)?;
    let mut risk_scale = 1.0;
    if let Some(budget) = &feasible.risk_budget {
        let after = |s: f64| budget.proxy_cvar(&(position + &speed * (s * dt)));
        if after(1.0) > budget.cap {
            if after(0.0) > budget.cap {
                risk_scale = 0.0;
            } else {
                let (mut lo, mut hi) = (0.0, 1.0);
                while hi - lo > 1e-12 {
                    let mid = 0.5 * (lo + hi);
                    if after(mid) <= budget.cap {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                risk_scale = lo;
            }
            speed *= risk_scale;
        }
    }
    Ok(MyopicAction {
        speed,
        drive,
        in_wedge,
        sweeps,
        risk_scale,
    })
}

/// Liquidation ramp toward a target position over the last `window` of
/// the horizon.
#[derive(Debug, Clone)]
pub struct TerminalRamp {
    pub target: DVector<f64>,
    pub window: f64,
}

/// Myopic policy with an optional terminal ramp.
#[derive(Debug, Clone)]
pub struct MyopicController {
    pub gain: SeparableGain,
    pub feasible: FeasibleSet,
    pub ramp: Option<TerminalRamp>,
}

impl MyopicController {
    pub fn speed(
        &self,
        time_left: f64,
        position: &DVector<f64>,
        risk_price: &DVector<f64>,
        dt: f64,
    ) -> Result<DVector<f64>, MoError> {
        if let Some(ramp) = &self.ramp {
            if time_left <= ramp.window + 1e-12 {
                let steps = (time_left / dt).round().max(1.0);
                let v = (&ramp.target - position) / (steps * dt);
                return project_speed(&v, position, &self.feasible, dt);
            }
        }
        Ok(myopic_step(&self.gain, position, risk_price, &self.feasible, dt)?.speed)
    }
}

/// Transient impact on the grid, `I_j = sum_{lag >= 1} C_lag v_{j - lag}`,
/// with the lag weights of [`crate::frictions::TradeHistory`]. `speeds[j]`
/// is the speed held over step `j`.
pub fn convolve_grid(kernel: &ImpactKernel, tau_fill: f64, dt: f64, speeds: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let weights = lag_weights(kernel, window_lags(tau_fill, dt), dt);
    let n = kernel.n_assets();
    (0..speeds.len())
        .map(|j| {
            let mut out = DVector::zeros(n);
            for (l, c) in weights.iter().enumerate().take(j) {
                out += c * &speeds[j - 1 - l];
            }
            out
        })
        .collect()
}

/// Adjoint of the transient impact: given the gain sensitivity `g_j` to the
/// impact over each step `j = 0..n`, returns on the grid points `0..=n`
///
/// ```text
/// p_i = sum_{lag = 1}^{tau_fill / dt} C_lag^T g_{i + lag}
/// ```
///
/// the exact transpose of [`convolve_grid`], so
/// `sum_j <g_j, dI_j> dt = sum_i <p_i, dv_i> dt`. `p` vanishes at the end
/// of the horizon.
pub fn volterra_adjoint(kernel: &ImpactKernel, tau_fill: f64, dt: f64, sens: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let steps = sens.len();
    let weights = lag_weights(kernel, window_lags(tau_fill, dt), dt);
    let n = kernel.n_assets();
    let mut p = vec![DVector::zeros(n); steps + 1];
    for (i, pi) in p.iter_mut().enumerate().take(steps) {
        for (l, c) in weights.iter().enumerate() {
            let j = i + 1 + l;
            if j >= steps {
                break;
            }
            *pi += c.transpose() * &sens[j];
        }
    }
    p
}

/// Terminal functional `f(Y_T)` with its gradient.
pub trait TerminalFunctional: Sync {
    fn value(&self, y: &[f64]) -> f64;
    fn gradient(&self, y: &[f64]) -> DVector<f64>;
}

/// `f(y) = 1/2 sum_i c_i y_i^2 + <b, y>`.
#[derive(Debug, Clone)]
pub struct QuadraticTerminal {
    pub curvature: DVector<f64>,
    pub linear: DVector<f64>,
}

impl TerminalFunctional for QuadraticTerminal {
    fn value(&self, y: &[f64]) -> f64 {
        y.iter()
            .enumerate()
            .map(|(i, &x)| 0.5 * self.curvature[i] * x * x + self.linear[i] * x)
            .sum()
    }
    fn gradient(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(y.len(), y.iter().enumerate().map(|(i, &x)| self.curvature[i] * x + self.linear[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowMethod {
    Pathwise,
    Bel,
}

#[derive(Debug, Clone)]
pub struct ShadowPrice {
    pub value: DVector<f64>,
    pub se: DVector<f64>,
    pub method: ShadowMethod,
}

/// Per-path samples of the shadow price at grid index `start`:
/// `V^T J[T<-t]^T grad f(Y_T)` or `f(Y_T) H`.
pub fn shadow_price_samples(
    model: &dyn SdeModel,
    path: &MarketPath,
    terminal: &dyn TerminalFunctional,
    start: usize,
    method: ShadowMethod,
) -> Result<DVector<f64>, MoError> {
    let end = path.n_steps();
    match method {
        ShadowMethod::Pathwise => {
            let to_end = flow_to_end(model, path, start, end)?;
            let mut v = DMatrix::zeros(model.state_dim(), model.noise_dim());
            model.diffusion(path.grid.time(start), path.state(start), &mut v);
            let g = terminal.gradient(path.terminal());
            Ok(v.transpose() * to_end[0].transpose() * g)
        }
        ShadowMethod::Bel => {
            let h = bel_weight(model, path, start, end)?;
            Ok(h * terminal.value(path.terminal()))
        }
    }
}

pub fn shadow_price(
    model: &dyn SdeModel,
    paths: &[MarketPath],
    terminal: &dyn TerminalFunctional,
    start: usize,
    method: ShadowMethod,
) -> Result<ShadowPrice, MoError> {
    let d = model.noise_dim();
    let samples: Vec<DVector<f64>> = paths
        .iter()
        .map(|p| shadow_price_samples(model, p, terminal, start, method))
        .collect::<Result<_, _>>()?;
    let mut value = DVector::zeros(d);
    let mut se = DVector::zeros(d);
    for k in 0..d {
        let xs: Vec<f64> = samples.iter().map(|s| s[k]).collect();
        let e = stats::Estimate::of(&xs);
        value[k] = e.mean;
        se[k] = e.se;
    }
    Ok(ShadowPrice { value, se, method })
}

/// Multipliers of the position constraints.
#[derive(Debug, Clone)]
pub struct Multipliers {
    pub upper: DVector<f64>,
    pub lower: DVector<f64>,
    pub participation: DVector<f64>,
}

impl Multipliers {
    pub fn zeros(n: usize) -> Self {
        Self {
            upper: DVector::zeros(n),
            lower: DVector::zeros(n),
            participation: DVector::zeros(n),
        }
    }

    /// Multipliers implied by an ascent gradient at a point: positive part of
    /// the gradient on active upper bounds, negative part on active lower.
    pub fn from_gradient(grad: &DVector<f64>, position: &DVector<f64>, feasible: &FeasibleSet) -> Result<Self, MoError> {
        let (lo, hi) = feasible.position_box()?;
        let n = grad.len();
        let mut m = Self::zeros(n);
        for i in 0..n {
            let tol = 1e-12 * (1.0 + position[i].abs());
            if (position[i] - hi[i]).abs() <= tol {
                m.upper[i] = grad[i].max(0.0);
            }
            if (position[i] - lo[i]).abs() <= tol {
                m.lower[i] = (-grad[i]).max(0.0);
            }
        }
        Ok(m)
    }
}

/// `||Pi_F(phi + grad) - phi|| + ||c(phi) v 0|| + ||mult . c(phi)||` for an
/// ascent gradient `grad`.
pub fn kkt_residual(
    grad: &DVector<f64>,
    position: &DVector<f64>,
    multipliers: &Multipliers,
    feasible: &FeasibleSet,
) -> Result<f64, MoError> {
    let stationarity = (project_feasible(&(position + grad), feasible)? - position).norm();
    let n = position.len();
    let mut viol = KahanSum::new();
    let mut comp = KahanSum::new();
    let mut add = |c: f64, mult: f64| {
        if c.is_finite() {
            viol.add(c.max(0.0).powi(2));
            comp.add((mult * c).powi(2));
        }
    };
    for i in 0..n {
        add(position[i] - feasible.position_hi[i], multipliers.upper[i]);
        add(feasible.position_lo[i] - position[i], multipliers.lower[i]);
        if let Some((adv, cap)) = &feasible.participation {
            add(position[i].abs() - cap * adv[i], multipliers.participation[i]);
        }
    }
    Ok(stationarity + viol.value().sqrt() + comp.value().sqrt())
}

/// Concave quadratic `J(phi) = <b, phi> - 1/2 phi^T H phi`.
#[derive(Debug, Clone)]
pub struct ConcaveQuadratic {
    pub linear: DVector<f64>,
    pub curvature: DMatrix<f64>,
}

impl ConcaveQuadratic {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.linear.dot(x) - 0.5 * x.dot(&(&self.curvature * x))
    }
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.linear - &self.curvature * x
    }
}

/// Projected gradient ascent; returns the iterate and its KKT residual per
/// iteration, starting with the initial point.
pub fn projected_ascent(
    problem: &ConcaveQuadratic,
    feasible: &FeasibleSet,
    start: &DVector<f64>,
    step: f64,
    iterations: usize,
) -> Result<Vec<(DVector<f64>, f64)>, MoError> {
    let mut x = project_feasible(start, feasible)?;
    let mut out = Vec::with_capacity(iterations + 1);
    for it in 0..=iterations {
        let g = problem.gradient(&x);
        let mult = Multipliers::from_gradient(&g, &x, feasible)?;
        out.push((x.clone(), kkt_residual(&g, &x, &mult, feasible)?));
        if it < iterations {
            x = project_feasible(&(&x + g * step), feasible)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn gain(drift: f64) -> SeparableGain {
        SeparableGain {
            drift: one(drift),
            inventory: DMatrix::zeros(1, 1),
            l1: one(0.1),
            temp_impact: DMatrix::from_element(1, 1, 1.0),
            holding: None,
        }
    }

    #[test]
    fn wedge_and_interior() {
        let f = FeasibleSet::unconstrained(1);
        let a = myopic_step(&gain(0.05), &one(0.0), &one(0.0), &f, 0.01).unwrap();
        assert_eq!(a.speed[0], 0.0);
        assert!(a.in_wedge);
        let b = myopic_step(&gain(0.5), &one(0.0), &one(0.0), &f, 0.01).unwrap();
        assert!((b.speed[0] - 0.4).abs() < 1e-10);
        let mut capped = FeasibleSet::unconstrained(1);
        capped.speed_cap = SpeedCap::Norm { cap: 0.3 };
        let c = myopic_step(&gain(0.5), &one(0.0), &one(0.0), &capped, 0.01).unwrap();
        assert!((c.speed[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn projections() {
        let mut f = FeasibleSet::unconstrained(1);
        f.position_lo = one(-1.0);
        f.position_hi = one(2.0);
        assert_eq!(project_feasible(&one(5.0), &f).unwrap()[0], 2.0);
        let mut g = FeasibleSet::unconstrained(1);
        g.participation = Some((one(10.0), 0.1));
        assert_eq!(project_feasible(&one(2.0), &g).unwrap()[0], 1.0);
        let mut bad = FeasibleSet::unconstrained(1);
        bad.position_lo = one(1.0);
        bad.position_hi = one(0.0);
        assert!(project_feasible(&one(0.5), &bad).is_err());
    }

    #[test]
    fn adjoint_vanishes_at_end() {
        let k = ImpactKernel::exponential(one(1.0), 1.0);
        let sens = vec![one(1.0); 1000];
        let p = volterra_adjoint(&k, 5.0, 1e-3, &sens);
        assert_eq!(p[1000][0], 0.0);
        assert!((p[0][0] - (1.0 - (-1.0f64).exp())).abs() < 2e-3);
    }

    #[test]
    fn kkt_interior_and_active() {
        let f = FeasibleSet::unconstrained(1);
        let r = kkt_residual(&one(0.3), &one(0.0), &Multipliers::zeros(1), &f).unwrap();
        assert!((r - 0.3).abs() < 1e-15);
        let mut b = FeasibleSet::unconstrained(1);
        b.position_hi = one(1.0);
        let mut m = Multipliers::zeros(1);
        m.upper[0] = 0.7;
        assert_eq!(kkt_residual(&one(0.7), &one(1.0), &m, &b).unwrap(), 0.0);
    }
}
