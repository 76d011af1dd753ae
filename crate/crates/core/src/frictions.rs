//! Execution and liquidation frictions.
//!
//! Taker execution price, per asset:
//!
//! ```text
//! P_exec = m + s sgn(v) + Xi v + (K * v)(t) + sgn(v) g(|q| / D)
//! ```
//!
//! where `v` is the trading speed, `(K * v)` the transient impact left by
//! trades over the last `tau_fill` and `g` the depth-overflow penalty.
//! Maker fills arrive as Poisson counts with intensity `L exp(-k |delta|)`.
//! The prudent liquidation mark is `m - sgn(phi) (s + H(|phi| / ADV, tau))`.

use crate::numeric::{min_sym_eigenvalue, sgn};
use crate::rng::poisson_inverse;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrictionError {
    #[error("depth exhausted for asset {asset}: zero depth with order {order}")]
    DepthExhausted { asset: usize, order: f64 },
    #[error("quote offset {offset} outside [{lo}, {hi}] on the {side} side")]
    QuoteOutOfBounds {
        side: &'static str,
        offset: f64,
        lo: f64,
        hi: f64,
    },
    #[error("temporary impact matrix must be symmetric positive semidefinite")]
    ImpactNotPsd,
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

/// Market quantities read off the current state.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSnapshot {
    pub mid: DVector<f64>,
    pub half_spread: DVector<f64>,
    pub depth: DVector<f64>,
    pub adv: DVector<f64>,
}

impl MarketSnapshot {
    pub fn uniform(n: usize, mid: f64, half_spread: f64, depth: f64, adv: f64) -> Self {
        Self {
            mid: DVector::from_element(n, mid),
            half_spread: DVector::from_element(n, half_spread),
            depth: DVector::from_element(n, depth),
            adv: DVector::from_element(n, adv),
        }
    }

    pub fn n_assets(&self) -> usize {
        self.mid.len()
    }
}

/// Transient impact kernel `K(lag)`, an `N x N` matrix.
#[derive(Clone)]
pub struct ImpactKernel {
    n: usize,
    f: Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>,
}

impl std::fmt::Debug for ImpactKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImpactKernel(n={})", self.n)
    }
}

impl ImpactKernel {
    pub fn new(n: usize, f: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        Self { n, f: Arc::new(f) }
    }

    pub fn zero(n: usize) -> Self {
        Self::new(n, move |_| DMatrix::zeros(n, n))
    }

    /// Diagonal `amplitude_i exp(-decay * lag)`.
    pub fn exponential(amplitude: DVector<f64>, decay: f64) -> Self {
        let n = amplitude.len();
        Self::new(n, move |lag| {
            DMatrix::from_diagonal(&(amplitude.clone() * (-decay * lag).exp()))
        })
    }

    pub fn eval(&self, lag: f64) -> DMatrix<f64> {
        (self.f)(lag)
    }

    pub fn n_assets(&self) -> usize {
        self.n
    }
}

/// Number of whole grid lags inside `[0, tau_fill]`.
pub fn window_lags(tau_fill: f64, dt: f64) -> usize {
    (tau_fill / dt + 1e-9).floor() as usize
}

/// Kernel mass of each past step: a speed held over the step that ended
/// `lag` steps ago contributes `dt (K((lag-1) dt) + K(lag dt)) / 2`.
/// Index `0` is lag one.
pub fn lag_weights(kernel: &ImpactKernel, lags: usize, dt: f64) -> Vec<DMatrix<f64>> {
    (1..=lags)
        .map(|lag| (kernel.eval((lag - 1) as f64 * dt) + kernel.eval(lag as f64 * dt)) * (0.5 * dt))
        .collect()
}

/// Ring buffer of past trading speeds on a uniform grid.
#[derive(Debug, Clone)]
pub struct TradeHistory {
    buf: VecDeque<DVector<f64>>,
    weights: Vec<DMatrix<f64>>,
}

impl TradeHistory {
    pub fn new(kernel: &ImpactKernel, tau_fill: f64, dt: f64) -> Self {
        let lags = window_lags(tau_fill, dt);
        Self {
            buf: VecDeque::with_capacity(lags + 1),
            weights: lag_weights(kernel, lags, dt),
        }
    }

    /// Record the speed traded over the step that just ended.
    pub fn push(&mut self, speed: DVector<f64>) {
        if self.weights.is_empty() {
            return;
        }
        if self.buf.len() == self.weights.len() {
            self.buf.pop_front();
        }
        self.buf.push_back(speed);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// `int_{(t - tau)^+}^t K(t - u) v(u) du` over the recorded past trades.
    pub fn convolve(&self, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        for (i, v) in self.buf.iter().rev().enumerate() {
            out += &self.weights[i] * v;
        }
        out
    }
}

/// Convex depth-overflow penalty `g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Overflow {
    None,
    /// `g(x) = coef * x^2`.
    Quadratic { coef: f64 },
}

impl Overflow {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Overflow::None => 0.0,
            Overflow::Quadratic { coef } => coef * x * x,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TakerModel {
    /// Temporary impact `Xi`, symmetric positive semidefinite.
    pub temp_impact: DMatrix<f64>,
    pub kernel: ImpactKernel,
    pub tau_fill: f64,
    pub overflow: Overflow,
}

impl TakerModel {
    pub fn new(
        temp_impact: DMatrix<f64>,
        kernel: ImpactKernel,
        tau_fill: f64,
        overflow: Overflow,
    ) -> Result<Self, FrictionError> {
        if !temp_impact.is_square() || temp_impact.nrows() != kernel.n_assets() {
            return Err(FrictionError::Invalid("impact dimensions disagree".into()));
        }
        let asym = (&temp_impact - temp_impact.transpose()).abs().max();
        if asym > 1e-12 || min_sym_eigenvalue(&temp_impact) < -1e-12 {
            return Err(FrictionError::ImpactNotPsd);
        }
        if !(tau_fill >= 0.0) {
            return Err(FrictionError::Invalid("tau_fill must be non-negative".into()));
        }
        Ok(Self {
            temp_impact,
            kernel,
            tau_fill,
            overflow,
        })
    }

    /// Frictionless except for the half-spread.
    pub fn spread_only(n: usize) -> Self {
        Self {
            temp_impact: DMatrix::zeros(n, n),
            kernel: ImpactKernel::zero(n),
            tau_fill: 0.0,
            overflow: Overflow::None,
        }
    }

    pub fn n_assets(&self) -> usize {
        self.temp_impact.nrows()
    }
}

/// Taker execution price for trading at `speed` with order size `order`.
pub fn exec_price_taker(
    model: &TakerModel,
    snap: &MarketSnapshot,
    speed: &DVector<f64>,
    order: &DVector<f64>,
    history: &TradeHistory,
) -> Result<DVector<f64>, FrictionError> {
    let n = model.n_assets();
    if speed.len() != n || order.len() != n || snap.n_assets() != n {
        return Err(FrictionError::Invalid("asset count mismatch".into()));
    }
    let transient = history.convolve(n);
    let linear = &model.temp_impact * speed;
    let mut p = DVector::zeros(n);
    for i in 0..n {
        let q = order[i].abs();
        let overflow = if q == 0.0 {
            0.0
        } else if snap.depth[i] <= 0.0 {
            return Err(FrictionError::DepthExhausted {
                asset: i,
                order: order[i],
            });
        } else {
            sgn(speed[i]) * model.overflow.eval(q / snap.depth[i])
        };
        p[i] = snap.mid[i] + snap.half_spread[i] * sgn(speed[i]) + linear[i] + transient[i] + overflow;
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Bid,
    Ask,
}

/// Single-asset limit-order fill model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MakerModel {
    pub bid_intensity: f64,
    pub ask_intensity: f64,
    pub bid_decay: f64,
    pub ask_decay: f64,
    /// Smallest allowed distance of a quote from mid.
    pub min_offset: f64,
    /// Largest allowed distance of a quote from mid.
    pub max_offset: f64,
}

impl MakerModel {
    pub fn symmetric(intensity: f64, decay: f64, max_offset: f64) -> Self {
        Self {
            bid_intensity: intensity,
            ask_intensity: intensity,
            bid_decay: decay,
            ask_decay: decay,
            min_offset: 0.0,
            max_offset,
        }
    }

    /// Fill intensity `L exp(-k |delta|)` for a quote at signed offset `delta`.
    pub fn intensity(&self, side: Side, offset: f64) -> f64 {
        match side {
            Side::Bid => self.bid_intensity * (-self.bid_decay * offset.abs()).exp(),
            Side::Ask => self.ask_intensity * (-self.ask_decay * offset.abs()).exp(),
        }
    }

    /// Check `ask` in `[min, max]` and `bid` in `[-max, -min]`.
    pub fn validate(&self, quotes: &Quotes) -> Result<(), FrictionError> {
        if !(quotes.ask >= self.min_offset && quotes.ask <= self.max_offset) {
            return Err(FrictionError::QuoteOutOfBounds {
                side: "ask",
                offset: quotes.ask,
                lo: self.min_offset,
                hi: self.max_offset,
            });
        }
        if !(quotes.bid <= -self.min_offset && quotes.bid >= -self.max_offset) {
            return Err(FrictionError::QuoteOutOfBounds {
                side: "bid",
                offset: quotes.bid,
                lo: -self.max_offset,
                hi: -self.min_offset,
            });
        }
        Ok(())
    }
}

/// Signed quote offsets from mid: `ask >= 0`, `bid <= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quotes {
    pub bid: f64,
    pub ask: f64,
}

impl Quotes {
    pub fn symmetric(half_width: f64) -> Self {
        Self {
            bid: -half_width,
            ask: half_width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fills {
    pub bid_count: u64,
    pub ask_count: u64,
    pub bid_price: f64,
    pub ask_price: f64,
}

/// Poisson fill counts over one step of length `dt`, from one uniform per
/// side (`u_bid`, `u_ask` in `(0, 1]`).
pub fn sample_maker_fills(
    model: &MakerModel,
    mid: f64,
    quotes: &Quotes,
    dt: f64,
    u_bid: f64,
    u_ask: f64,
) -> Result<Fills, FrictionError> {
    model.validate(quotes)?;
    let lb = model.intensity(Side::Bid, quotes.bid) * dt;
    let la = model.intensity(Side::Ask, quotes.ask) * dt;
    Ok(Fills {
        bid_count: poisson_inverse(lb, u_bid),
        ask_count: poisson_inverse(la, u_ask),
        bid_price: mid + quotes.bid,
        ask_price: mid + quotes.ask,
    })
}

/// Liquidation discount `H(x, tau) = coef * x / sqrt(tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiquidationDiscount {
    pub coef: f64,
    pub horizon: f64,
}

impl LiquidationDiscount {
    pub fn none() -> Self {
        Self {
            coef: 0.0,
            horizon: 1.0,
        }
    }

    pub fn eval(&self, participation: f64) -> f64 {
        self.coef * participation / self.horizon.sqrt()
    }
}

/// Prudent per-asset liquidation mark, floored at zero.
pub fn liq_price(
    snap: &MarketSnapshot,
    position: &DVector<f64>,
    discount: &LiquidationDiscount,
) -> Result<DVector<f64>, FrictionError> {
    let n = snap.n_assets();
    if position.len() != n {
        return Err(FrictionError::Invalid("asset count mismatch".into()));
    }
    let mut p = DVector::zeros(n);
    for i in 0..n {
        let s = sgn(position[i]);
        let h = if position[i] == 0.0 {
            0.0
        } else if snap.adv[i] <= 0.0 {
            return Err(FrictionError::Invalid(format!("non-positive ADV for asset {i}")));
        } else {
            discount.eval(position[i].abs() / snap.adv[i])
        };
        p[i] = (snap.mid[i] - s * (snap.half_spread[i] + h)).max(0.0);
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn exec_price_spread_plus_linear() {
        let m = TakerModel::new(
            DMatrix::from_element(1, 1, 0.01),
            ImpactKernel::zero(1),
            0.0,
            Overflow::None,
        )
        .unwrap();
        let snap = MarketSnapshot::uniform(1, 100.0, 0.05, 10.0, 10.0);
        let h = TradeHistory::new(&m.kernel, 0.0, 0.1);
        let p = exec_price_taker(&m, &snap, &one(1.0), &one(0.1), &h).unwrap();
        assert!((p[0] - 100.06).abs() < 1e-12);
        let p0 = exec_price_taker(&m, &snap, &one(0.0), &one(0.0), &h).unwrap();
        assert_eq!(p0[0], 100.0);
    }

    #[test]
    fn exponential_kernel_with_full_history() {
        let dt = 1e-3;
        let tau = 1.0;
        let m = TakerModel::new(
            DMatrix::zeros(1, 1),
            ImpactKernel::exponential(one(1.0), 1.0),
            tau,
            Overflow::None,
        )
        .unwrap();
        let mut h = TradeHistory::new(&m.kernel, tau, dt);
        for _ in 0..2000 {
            h.push(one(1.0));
        }
        let snap = MarketSnapshot::uniform(1, 0.0, 0.0, 1.0, 1.0);
        let p = exec_price_taker(&m, &snap, &one(1.0), &one(0.0), &h).unwrap();
        assert!((p[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-6);
    }

    #[test]
    fn zero_depth_with_order_fails() {
        let m = TakerModel::spread_only(1);
        let snap = MarketSnapshot::uniform(1, 100.0, 0.05, 0.0, 1.0);
        let h = TradeHistory::new(&m.kernel, 0.0, 0.1);
        let e = exec_price_taker(&m, &snap, &one(1.0), &one(1.0), &h).unwrap_err();
        assert!(matches!(e, FrictionError::DepthExhausted { asset: 0, .. }));
    }

    #[test]
    fn maker_intensity_value() {
        let m = MakerModel::symmetric(1.0, 1.5, 1.0);
        assert!((m.intensity(Side::Ask, 1.0) - 0.223_130_160_148_429_83).abs() < 1e-12);
    }

    #[test]
    fn maker_rejects_crossed_quote() {
        let m = MakerModel::symmetric(1.0, 1.5, 1.0);
        assert!(sample_maker_fills(&m, 100.0, &Quotes { bid: 0.1, ask: 0.1 }, 0.1, 0.5, 0.5).is_err());
    }

    #[test]
    fn liquidation_mark_long() {
        let snap = MarketSnapshot::uniform(1, 100.0, 0.05, 1.0, 1.0);
        let d = LiquidationDiscount {
            coef: 0.1,
            horizon: 1.0,
        };
        let p = liq_price(&snap, &one(1.0), &d).unwrap();
        assert!((p[0] - 99.85).abs() < 1e-12);
        assert_eq!(liq_price(&snap, &one(0.0), &d).unwrap()[0], 100.0);
    }
}
