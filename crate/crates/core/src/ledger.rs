//! Cash, position and wealth accounting.
//!
//! Taker cash accrues at
//!
//! ```text
//! G = -<P_exec, v> - HC(phi) + r_lend B^+ - r_borrow B^- - tax <m, |v|>
//! ```
//!
//! and the position at speed `v`. Wealth is `X = <phi, P_liq> + B`. Each step
//! splits `dX` into a mark-to-market part `<phi_prev, dP_liq>` and a realized
//! part holding everything else, so the two always add up to `dX`.

use crate::frictions::Fills;
use crate::numeric::sgn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite ledger value at time {0}")]
    NonFinite(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Interest on cash and transaction tax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CarryRates {
    /// Rate earned on positive cash.
    pub lend: f64,
    /// Rate paid on negative cash.
    pub borrow: f64,
    /// Proportional tax on traded notional.
    pub tax: f64,
}

impl CarryRates {
    pub fn carry(&self, cash: f64) -> f64 {
        self.lend * cash.max(0.0) - self.borrow * (-cash).max(0.0)
    }
}

/// `HC = lend_fee phi^- + hold_fee |phi| + penalty (margin - free_cash)^+
///       + 1/2 inventory_quad phi^2`, summed over assets, with
/// `margin = margin_rate <m, |phi|>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct HoldingCostModel {
    pub lend_fee: f64,
    pub hold_fee: f64,
    pub margin_rate: f64,
    pub free_cash: f64,
    pub margin_penalty: f64,
    #[serde(default)]
    pub inventory_quad: f64,
}

impl HoldingCostModel {
    pub fn margin(&self, position: &DVector<f64>, mid: &DVector<f64>) -> f64 {
        self.margin_rate * position.iter().zip(mid.iter()).map(|(p, m)| p.abs() * m).sum::<f64>()
    }

    pub fn cost(&self, position: &DVector<f64>, mid: &DVector<f64>) -> f64 {
        let mut c = 0.0;
        for &p in position.iter() {
            c += self.lend_fee * (-p).max(0.0) + self.hold_fee * p.abs() + 0.5 * self.inventory_quad * p * p;
        }
        c + self.margin_penalty * (self.margin(position, mid) - self.free_cash).max(0.0)
    }

    /// Subgradient of `cost` in the position, zero at kinks.
    pub fn gradient(&self, position: &DVector<f64>, mid: &DVector<f64>) -> DVector<f64> {
        let over = self.margin(position, mid) > self.free_cash;
        DVector::from_iterator(
            position.len(),
            position.iter().zip(mid.iter()).map(|(&p, &m)| {
                let lend = if p < 0.0 { -self.lend_fee } else { 0.0 };
                let margin = if over {
                    self.margin_penalty * self.margin_rate * m * sgn(p)
                } else {
                    0.0
                };
                lend + self.hold_fee * sgn(p) + margin + self.inventory_quad * p
            }),
        )
    }
}

/// Cash accrual rate of a taker trading at `speed`.
pub fn gain_rate(
    exec_price: &DVector<f64>,
    speed: &DVector<f64>,
    position: &DVector<f64>,
    mid: &DVector<f64>,
    cash: f64,
    rates: &CarryRates,
    holding: &HoldingCostModel,
) -> f64 {
    let traded: f64 = speed.iter().zip(mid.iter()).map(|(v, m)| v.abs() * m).sum();
    -exec_price.dot(speed) - holding.cost(position, mid) + rates.carry(cash) - rates.tax * traded
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerState {
    pub time: f64,
    pub cash: f64,
    pub position: DVector<f64>,
    /// Mark used for `liq_value`.
    pub liq_price: DVector<f64>,
    pub liq_value: f64,
    pub wealth: f64,
    pub realized_pnl: f64,
    pub mtm_pnl: f64,
}

impl LedgerState {
    pub fn new(time: f64, cash: f64, position: DVector<f64>, liq_price: DVector<f64>) -> Self {
        let liq_value = position.dot(&liq_price);
        Self {
            time,
            cash,
            position,
            liq_price,
            liq_value,
            wealth: liq_value + cash,
            realized_pnl: 0.0,
            mtm_pnl: 0.0,
        }
    }

    fn finish(&mut self, new_position: DVector<f64>, new_mark: DVector<f64>, new_cash: f64, dt: f64) -> Result<StepRecord, LedgerError> {
        let mtm = self.position.dot(&(&new_mark - &self.liq_price));
        let liq_value = new_position.dot(&new_mark);
        let wealth = liq_value + new_cash;
        let realized = (wealth - self.wealth) - mtm;
        self.time += dt;
        self.cash = new_cash;
        self.position = new_position;
        self.liq_price = new_mark;
        self.liq_value = liq_value;
        self.wealth = wealth;
        self.realized_pnl += realized;
        self.mtm_pnl += mtm;
        if !(wealth.is_finite() && new_cash.is_finite()) {
            return Err(LedgerError::NonFinite(self.time));
        }
        Ok(StepRecord {
            time: self.time,
            cash: self.cash,
            position: self.position.iter().cloned().collect(),
            liq_value: self.liq_value,
            wealth: self.wealth,
            realized_step: realized,
            mtm_step: mtm,
            gain_rate: 0.0,
        })
    }
}

/// One row of a ledger trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub time: f64,
    pub cash: f64,
    pub position: Vec<f64>,
    pub liq_value: f64,
    pub wealth: f64,
    pub realized_step: f64,
    pub mtm_step: f64,
    pub gain_rate: f64,
}

/// Inputs of a taker step. `new_liq_price` marks the post-step position at
/// the post-step state.
#[derive(Debug, Clone)]
pub struct TakerStep<'a> {
    pub exec_price: &'a DVector<f64>,
    pub speed: &'a DVector<f64>,
    pub mid: &'a DVector<f64>,
    pub new_liq_price: &'a DVector<f64>,
}

pub fn step_taker(
    state: &mut LedgerState,
    step: &TakerStep<'_>,
    rates: &CarryRates,
    holding: &HoldingCostModel,
    dt: f64,
) -> Result<StepRecord, LedgerError> {
    let n = state.position.len();
    if step.exec_price.len() != n || step.speed.len() != n || step.new_liq_price.len() != n {
        return Err(LedgerError::Dimension("taker step vectors".into()));
    }
    let g = gain_rate(
        step.exec_price,
        step.speed,
        &state.position,
        step.mid,
        state.cash,
        rates,
        holding,
    );
    let new_cash = state.cash + g * dt;
    let new_position = &state.position + step.speed * dt;
    let mut rec = state.finish(new_position, step.new_liq_price.clone(), new_cash, dt)?;
    rec.gain_rate = g;
    Ok(rec)
}

/// Single-asset maker step: fills at the quoted prices, holding cost and
/// carry on the start-of-step cash, optional tax on filled notional.
pub fn step_maker(
    state: &mut LedgerState,
    fills: &Fills,
    mid: f64,
    new_liq_price: f64,
    rates: &CarryRates,
    holding: &HoldingCostModel,
    apply_tax: bool,
    dt: f64,
) -> Result<StepRecord, LedgerError> {
    if state.position.len() != 1 {
        return Err(LedgerError::Dimension("maker ledger is single-asset".into()));
    }
    let nb = fills.bid_count as f64;
    let na = fills.ask_count as f64;
    let mid_v = DVector::from_element(1, mid);
    let hc = holding.cost(&state.position, &mid_v);
    let tax = if apply_tax { rates.tax * mid * (nb + na) } else { 0.0 };
    let new_cash = state.cash + fills.ask_price * na - fills.bid_price * nb - hc * dt
        + rates.carry(state.cash) * dt
        - tax;
    let new_position = DVector::from_element(1, state.position[0] + nb - na);
    state.finish(new_position, DVector::from_element(1, new_liq_price), new_cash, dt)
}

/// Write a trace as CSV with one position column per asset.
pub fn write_trace_csv<W: Write>(records: &[StepRecord], out: W) -> Result<(), LedgerError> {
    let mut w = csv::Writer::from_writer(out);
    let n = records.first().map(|r| r.position.len()).unwrap_or(0);
    let mut header = vec!["time".to_string(), "cash".to_string()];
    header.extend((0..n).map(|i| format!("position_{i}")));
    header.extend(
        ["liq_value", "wealth", "realized_step", "mtm_step", "gain_rate"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![fmt17(r.time), fmt17(r.cash)];
        row.extend(r.position.iter().map(|p| fmt17(*p)));
        row.extend(
            [r.liq_value, r.wealth, r.realized_step, r.mtm_step, r.gain_rate]
                .iter()
                .map(|x| fmt17(*x)),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Float with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frictions::Fills;

    fn one(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn gain_rate_buy_one_unit() {
        let g = gain_rate(&one(100.06), &one(1.0), &one(0.0), &one(100.0), 0.0, &CarryRates::default(), &HoldingCostModel::default());
        assert!((g + 100.06).abs() < 1e-12);
    }

    #[test]
    fn gain_rate_idle_cash_carry() {
        let rates = CarryRates {
            lend: 0.02,
            borrow: 0.05,
            tax: 0.0,
        };
        let g = gain_rate(&one(100.0), &one(0.0), &one(0.0), &one(100.0), 100.0, &rates, &HoldingCostModel::default());
        assert!((g - 2.0).abs() < 1e-12);
    }

    #[test]
    fn round_trip_costs_two_half_spreads() {
        let mid = one(100.0);
        let rates = CarryRates::default();
        let hc = HoldingCostModel::default();
        let mut st = LedgerState::new(0.0, 0.0, one(0.0), mid.clone());
        let x0 = st.wealth;
        step_taker(&mut st, &TakerStep { exec_price: &one(100.05), speed: &one(1.0), mid: &mid, new_liq_price: &one(99.95) }, &rates, &hc, 1.0).unwrap();
        step_taker(&mut st, &TakerStep { exec_price: &one(99.95), speed: &one(-1.0), mid: &mid, new_liq_price: &one(100.0) }, &rates, &hc, 1.0).unwrap();
        assert!((st.wealth - x0 + 0.10).abs() < 1e-12);
        assert!((st.realized_pnl + st.mtm_pnl - (st.wealth - x0)).abs() < 1e-12);
    }

    #[test]
    fn maker_captures_spread() {
        let mut st = LedgerState::new(0.0, 0.0, one(0.0), one(100.0));
        let fills = Fills { bid_count: 1, ask_count: 1, bid_price: 99.95, ask_price: 100.05 };
        step_maker(&mut st, &fills, 100.0, 100.0, &CarryRates::default(), &HoldingCostModel::default(), false, 0.01).unwrap();
        assert_eq!(st.position[0], 0.0);
        assert!((st.realized_pnl - 0.10).abs() < 1e-12);
    }

    #[test]
    fn holding_cost_pieces() {
        let hc = HoldingCostModel { lend_fee: 0.01, hold_fee: 0.002, margin_rate: 0.5, free_cash: 10.0, margin_penalty: 0.1, inventory_quad: 0.0 };
        let c = hc.cost(&one(-1.0), &one(100.0));
        assert!((c - (0.01 + 0.002 + 0.1 * 40.0)).abs() < 1e-12);
    }
}
