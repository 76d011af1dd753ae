//! Property tests for structural invariants.

use frictionlab::frictions::ImpactKernel;
use frictionlab::harness_cli::ScenarioConfig;
use frictionlab::ledger::{step_taker, CarryRates, HoldingCostModel, LedgerState, TakerStep};
use frictionlab::mo_controller::{
    convolve_grid, myopic_step, project_feasible, volterra_adjoint, FeasibleSet, SeparableGain,
};
use frictionlab::risk::{bpoe, entropic, TailSample};
use frictionlab::sde_engine::{convert_drift, DriftDirection, Gbm};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn dvec(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Wealth change splits exactly into realised and mark-to-market parts.
    #[test]
    fn ledger_pnl_decomposes(
        steps in prop::collection::vec((-5.0f64..5.0, 50.0f64..150.0, 0.0f64..0.5, 49.0f64..151.0), 1..40),
        cash0 in -100.0f64..100.0,
        lend in 0.0f64..0.05,
        borrow in 0.0f64..0.1,
        quad in 0.0f64..1.0,
    ) {
        let rates = CarryRates { lend, borrow, tax: 0.0 };
        let holding = HoldingCostModel { inventory_quad: quad, ..Default::default() };
        let dt = 0.01;
        let mut state = LedgerState::new(0.0, cash0, dvec(&[0.0]), dvec(&[100.0]));
        let start = state.wealth;
        for (speed, mid, half, mark) in steps {
            let v = dvec(&[speed]);
            let m = dvec(&[mid]);
            let exec = dvec(&[mid + half * speed.signum()]);
            let liq = dvec(&[mark]);
            step_taker(&mut state, &TakerStep { exec_price: &exec, speed: &v, mid: &m, new_liq_price: &liq }, &rates, &holding, dt).unwrap();
        }
        let total = state.wealth - start;
        let parts = state.realized_pnl + state.mtm_pnl;
        prop_assert!((total - parts).abs() <= 1e-9 * (1.0 + total.abs()));
        prop_assert!((state.wealth - state.cash - state.liq_value).abs() <= 1e-9 * (1.0 + state.wealth.abs()));
    }

    #[test]
    fn cvar_is_monotone_and_dominates(
        xs in prop::collection::vec(-10.0f64..10.0, 2..300),
        a1 in 0.01f64..0.98,
        gap in 0.0f64..0.5,
    ) {
        let a2 = (a1 + gap).min(0.99);
        let t = TailSample::new(&xs, None).unwrap();
        let (c1, c2) = (t.cvar(a1).unwrap(), t.cvar(a2).unwrap());
        prop_assert!(c2 >= c1 - 1e-12);
        prop_assert!(c1 >= t.var(a1).unwrap() - 1e-12);
        prop_assert!(c1 >= t.mean() - 1e-12);
        prop_assert!(c2 <= t.max() + 1e-12);
    }

    /// bPOE inverts CVaR on the interior of the loss range.
    #[test]
    fn bpoe_inverts_cvar(xs in prop::collection::vec(-10.0f64..10.0, 5..200), frac in 0.05f64..0.95) {
        let t = TailSample::new(&xs, None).unwrap();
        prop_assume!(t.max() - t.mean() > 1e-6);
        let tau = t.mean() + frac * (t.max() - t.mean());
        let p = bpoe(&xs, tau).unwrap();
        prop_assert!(p > 0.0 && p < 1.0);
        prop_assert!((t.cvar(1.0 - p).unwrap() - tau).abs() <= 1e-6 * (1.0 + tau.abs()));
    }

    #[test]
    fn entropic_exceeds_mean(xs in prop::collection::vec(-5.0f64..5.0, 2..200), gamma in 0.01f64..3.0) {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        prop_assert!(entropic(&xs, gamma).unwrap() >= m - 1e-12);
    }

    /// A drive inside the proportional-cost band gives exactly zero speed.
    #[test]
    fn no_trade_wedge_is_exact(
        raw in prop::collection::vec((0.05f64..3.0, -0.999f64..0.999, 0.1f64..5.0), 1..5),
    ) {
        let n = raw.len();
        let l1 = DVector::from_iterator(n, raw.iter().map(|r| r.0));
        let drive = DVector::from_iterator(n, raw.iter().map(|r| r.0 * r.1));
        let gain = SeparableGain {
            drift: drive,
            inventory: DMatrix::zeros(n, n),
            l1,
            temp_impact: DMatrix::from_diagonal(&DVector::from_iterator(n, raw.iter().map(|r| r.2))),
            holding: None,
        };
        let zero = DVector::zeros(n);
        let act = myopic_step(&gain, &zero, &zero, &FeasibleSet::unconstrained(n), 0.1).unwrap();
        prop_assert!(act.in_wedge);
        prop_assert!(act.speed.iter().all(|&v| v == 0.0));
    }

    /// Outside the band the speed has the sign of the excess drive.
    #[test]
    fn speed_follows_excess_drive(l1 in 0.0f64..2.0, excess in 0.01f64..5.0, sign in prop::bool::ANY, curv in 0.1f64..5.0) {
        let d = if sign { l1 + excess } else { -(l1 + excess) };
        let gain = SeparableGain {
            drift: dvec(&[d]),
            inventory: DMatrix::zeros(1, 1),
            l1: dvec(&[l1]),
            temp_impact: DMatrix::from_element(1, 1, curv),
            holding: None,
        };
        let zero = DVector::zeros(1);
        let v = myopic_step(&gain, &zero, &zero, &FeasibleSet::unconstrained(1), 0.1).unwrap().speed[0];
        prop_assert!((v - d.signum() * excess / curv).abs() <= 1e-9 * (1.0 + v.abs()));
    }

    #[test]
    fn projection_is_idempotent(
        xs in prop::collection::vec(-10.0f64..10.0, 1..6),
        lo in -5.0f64..0.0,
        width in 0.0f64..5.0,
    ) {
        let n = xs.len();
        let mut fs = FeasibleSet::unconstrained(n);
        fs.position_lo = DVector::from_element(n, lo);
        fs.position_hi = DVector::from_element(n, lo + width);
        let once = project_feasible(&dvec(&xs), &fs).unwrap();
        let twice = project_feasible(&once, &fs).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.iter().all(|&x| x >= lo && x <= lo + width));
    }

    /// `sum_j <g_j, I_j(v)> = sum_i <p_i, v_i>` and the costate ends at zero.
    #[test]
    fn volterra_adjoint_is_the_transpose(
        amp in 0.0f64..2.0,
        decay in 0.1f64..10.0,
        tau in 0.0f64..1.0,
        pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..40),
    ) {
        let dt = 0.05;
        let kernel = ImpactKernel::exponential(dvec(&[amp]), decay);
        let speeds: Vec<_> = pairs.iter().map(|p| dvec(&[p.0])).collect();
        let sens: Vec<_> = pairs.iter().map(|p| dvec(&[p.1])).collect();
        let conv = convolve_grid(&kernel, tau, dt, &speeds);
        let p = volterra_adjoint(&kernel, tau, dt, &sens);
        let lhs: f64 = conv.iter().zip(&sens).map(|(c, g)| c.dot(g)).sum();
        let rhs: f64 = p.iter().zip(&speeds).map(|(a, v)| a.dot(v)).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        prop_assert!(p.last().unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn drift_conversion_round_trips(mu in -1.0f64..1.0, sigma in 0.0f64..2.0, x in 0.01f64..1e3) {
        let m = Gbm::new(mu, sigma);
        let b = dvec(&[mu * x]);
        let s = convert_drift(&m, &b, DriftDirection::ItoToStratonovich, 0.0, &[x]);
        let back = convert_drift(&m, &s, DriftDirection::StratonovichToIto, 0.0, &[x]);
        prop_assert!((back[0] - b[0]).abs() <= 1e-10 * (1.0 + b[0].abs()));
        prop_assert!((s[0] - (mu - 0.5 * sigma * sigma) * x).abs() <= 1e-10 * (1.0 + x));
    }

    /// Canonical text survives a round trip and its hash ignores key order.
    #[test]
    fn config_canonical_form_is_stable(
        n_paths in 2usize..1_000_000,
        vol in 0.0f64..3.0,
        drift in -1.0f64..1.0,
        alpha in 0.5f64..0.999,
        name in "[a-z]{1,12}",
    ) {
        let a = format!("name = \"{name}\"\nn_paths = {n_paths}\n[market]\nvol = {vol:?}\ndrift = {drift:?}\n[risk]\nalpha = {alpha:?}\n");
        let b = format!("[risk]\nalpha = {alpha:?}\n[market]\ndrift = {drift:?}\nvol = {vol:?}\n");
        let b = format!("n_paths = {n_paths}\nname = \"{name}\"\n{b}");
        let ca = ScenarioConfig::parse(&a).unwrap();
        let cb = ScenarioConfig::parse(&b).unwrap();
        prop_assert_eq!(ca.hash(), cb.hash());
        let again = ScenarioConfig::parse(&ca.canonical()).unwrap();
        prop_assert_eq!(again.canonical(), ca.canonical());
        prop_assert_eq!(again, ca);
    }
}
