//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! straight to stdout (bypassing the test harness capture) and then asserts.

use std::fs;
use std::io::Write;
use std::path::Path;

use frictionlab::frictions::ImpactKernel;
use frictionlab::harness_cli::{
    audit_suite, cad_suite, converge_bench, dominance_suite, main_with_args, report_suite, simulate_market,
    AuditConfig, CadConfig, ConvergeConfig, DominanceConfig, MarketModel, Protocol, ReportConfig, RiskConfig,
    ScenarioConfig,
};
use frictionlab::mo_controller::{
    convolve_grid, myopic_step, projected_ascent, volterra_adjoint, ConcaveQuadratic, FeasibleSet, SeparableGain,
};
use frictionlab::sde_engine::{
    convert_drift, flow_jacobian, simulate_path, ArithmeticBrownian, DriftDirection, Gbm, OrnsteinUhlenbeck,
    SdeModel, TimeGrid,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {id:>2} {:<4} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn check(id: u32, name: &str, parts: &[(&str, bool, String)]) {
    let pass = parts.iter().all(|p| p.1);
    let detail = parts
        .iter()
        .map(|(n, ok, d)| format!("{n}[{}] {d}", if *ok { "ok" } else { "x" }))
        .collect::<Vec<_>>()
        .join("; ");
    report(id, name, pass, &detail);
    assert!(pass, "criterion {id} failed: {detail}");
}

#[test]
fn criterion_01_bias_probability_table() {
    let expected = [(0.3, 0.62), (0.5, 0.69), (0.7, 0.76), (1.0, 0.84), (1.3, 0.90), (1.6, 0.95)];
    let cfg = ReportConfig {
        z_values: expected.iter().map(|e| e.0).collect(),
        snr_values: vec![],
        risk_samples: 100,
        ..Default::default()
    };
    let r = report_suite(&cfg, &RiskConfig::default(), 1).unwrap();
    let parts: Vec<_> = r
        .bias_table
        .iter()
        .zip(&expected)
        .map(|((z, p), (ez, ep))| {
            (
                "z",
                (z - ez).abs() < 1e-12 && (p - ep).abs() <= 0.005,
                format!("{z:.2}->{p:.4} (table {ep})"),
            )
        })
        .collect();
    check(1, "normal-proxy positive-bias table", &parts);
}

fn converge_cfg() -> ConvergeConfig {
    ConvergeConfig::default()
}

#[test]
fn criterion_02_mo_geometric_convergence() {
    let r = converge_bench(&converge_cfg(), 2024).unwrap();
    check(
        2,
        "MO geometric convergence",
        &[
            ("contraction<=0.92", r.mo_contraction <= 0.92, format!("{:.5}", r.mo_contraction)),
            ("log-gap R2>=0.99", r.mo_fit.r2 >= 0.99, format!("{:.5}", r.mo_fit.r2)),
            ("iterations", r.mo_gap.len() == 201, format!("{}", r.mo_gap.len() - 1)),
        ],
    );
}

#[test]
fn criterion_03_sgd_variance_floor() {
    let r = converge_bench(&converge_cfg(), 2024).unwrap();
    let slope = r.plateau_fit.slope;
    let mut parts = vec![("loglog slope 1+-0.15", (slope - 1.0).abs() <= 0.15, format!("{slope:.4}"))];
    for i in 0..r.plateaus.len() {
        let (p, pred) = (r.plateaus[i], r.plateau_predicted[i]);
        parts.push((
            "plateau>=10% of prediction",
            p >= 0.1 * pred,
            format!("eta {:.0e}: {p:.4e} vs {pred:.4e}", r.plateau_etas[i]),
        ));
    }
    check(3, "constant-step variance floor", &parts);
}

#[test]
fn criterion_04_decreasing_step_rate() {
    let r = converge_bench(&converge_cfg(), 2024).unwrap();
    let slope = r.decreasing_fit.slope;
    check(
        4,
        "decreasing-step rate",
        &[("loglog slope -1+-0.2", (slope + 1.0).abs() <= 0.2, format!("{slope:.4}"))],
    );
}

#[test]
fn criterion_05_gap_ratio_divergence() {
    let r = converge_bench(&converge_cfg(), 2024).unwrap();
    let burn_in = 50;
    let increasing = (burn_in..r.gamma.len() - 1).all(|k| r.gamma[k + 1] > r.gamma[k]);
    let ratio = r.gamma_ratio(50, 200);
    check(
        5,
        "gap ratio divergence",
        &[
            ("gamma increasing after k=50", increasing, String::new()),
            ("gamma(200)/gamma(50)>10", ratio > 10.0, format!("{ratio:.3e}")),
        ],
    );
}

#[test]
fn criterion_06_dominance_suite() {
    let cfg = DominanceConfig::default();
    let s = dominance_suite(&cfg, 7, 100_000).unwrap();
    let mut parts = Vec::new();
    for (p, r) in &s.rows {
        let name = format!("{p:?}").to_lowercase();
        let pv = r.p_values;
        parts.push((
            "four orderings p<0.01",
            r.flags.all() && pv.mean < 0.01 && pv.variance < 0.01 && pv.cvar < 0.01 && pv.positivity < 0.01,
            format!(
                "{name}: p=({:.1e},{:.1e},{:.1e},{:.1e})",
                pv.mean, pv.variance, pv.cvar, pv.positivity
            ),
        ));
        if *p == Protocol::Taker {
            let rel = (r.mean_gap - r.predicted_mean_gap).abs() / r.predicted_mean_gap;
            parts.push((
                "mean gap within 20%",
                rel <= 0.2,
                format!("{:.5} vs {:.5}", r.mean_gap, r.predicted_mean_gap),
            ));
        }
    }
    let protocols: Vec<Protocol> = s.rows.iter().map(|r| r.0).collect();
    parts.push((
        "all protocols run",
        protocols == [Protocol::Taker, Protocol::Maker, Protocol::Trained],
        String::new(),
    ));
    check(6, "MO dominance suite", &parts);
}

#[test]
fn criterion_07_phantom_profit_audit() {
    let cfg = AuditConfig::default();
    let s = audit_suite(&cfg, 5, 20_000).unwrap();
    let worst = s
        .adapted
        .iter()
        .map(|r| (r.report.pi_ph.mean / r.report.pi_ph.se).abs())
        .fold(0.0, f64::max);
    let fit = s.lookahead.fit;
    let d = &s.decomposition;
    let smallest = s
        .self_bias
        .iter()
        .min_by(|a, b| a.leak.total_cmp(&b.leak))
        .expect("self-bias grid");
    check(
        7,
        "phantom-profit audit",
        &[
            (
                "adapted |pi|<3SE",
                worst < 3.0 && s.adapted.len() == cfg.adapted.len() * 20,
                format!("max |z| {worst:.3} over {} runs", s.adapted.len()),
            ),
            (
                "lookahead slope>0, R2>=0.9",
                fit.slope > 0.0 && fit.r2 >= 0.9,
                format!("slope {:.4e} R2 {:.4}", fit.slope, fit.r2),
            ),
            (
                "2x2 additive",
                d.additive(),
                format!("residual {:.3e} se {:.3e}", d.residual.mean, d.residual.se),
            ),
            (
                "self-bias vs phantom within 30%",
                (smallest.ratio - 1.0).abs() <= 0.3,
                format!("leak {} ratio {:.4}", smallest.leak, smallest.ratio),
            ),
        ],
    );
}

#[test]
fn criterion_08_risk_oracles() {
    let cfg = ReportConfig {
        z_values: vec![],
        snr_values: vec![],
        ..Default::default()
    };
    let risk = RiskConfig {
        alpha: 0.95,
        entropic_gamma: 0.5,
    };
    let r = report_suite(&cfg, &risk, 8).unwrap().risk;
    // phi(z_0.95) / 0.05 for the standard normal
    let cvar_exact = 2.062_712_807_9;
    let ent_z = (r.entropic - r.entropic_closed) / r.entropic_se;
    check(
        8,
        "risk oracles",
        &[
            ("CVaR within 1e-2", (r.cvar - cvar_exact).abs() <= 1e-2, format!("{:.5}", r.cvar)),
            ("bPOE inverse 1e-6", r.bpoe_inverse_error <= 1e-6, format!("{:.2e}", r.bpoe_inverse_error)),
            ("entropic within 3SE", ent_z.abs() <= 3.0, format!("{:.5} z {ent_z:.3}", r.entropic)),
        ],
    );
}

#[test]
fn criterion_09_sde_accuracy() {
    let mut cfg = ScenarioConfig::default();
    cfg.market.model = MarketModel::Gbm;
    cfg.market.n_steps = 256;
    cfg.market.record_paths = 0;
    let (m, _, _) = simulate_market(&cfg, 9, 100_000).unwrap();

    // Round trip against the hand-derived Stratonovich drift of GBM.
    let mut roundtrip: f64 = 0.0;
    let mut analytic: f64 = 0.0;
    let gbm = Gbm::new(0.05, 0.2);
    for &x in &[0.5, 1.0, 37.0, 100.0] {
        let ito = DVector::from_element(1, 0.05 * x);
        let strat = convert_drift(&gbm, &ito, DriftDirection::ItoToStratonovich, 0.0, &[x]);
        let back = convert_drift(&gbm, &strat, DriftDirection::StratonovichToIto, 0.0, &[x]);
        roundtrip = roundtrip.max((back[0] - ito[0]).abs());
        analytic = analytic.max((strat[0] - (0.05 - 0.02) * x).abs());
    }
    let ou = OrnsteinUhlenbeck::new(1.5, 0.3, 0.4);
    let abm = ArithmeticBrownian::new(
        DVector::from_vec(vec![0.1, -0.2]),
        DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.1, 0.2]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]),
    )
    .unwrap();
    for (model, x) in [(&ou as &dyn SdeModel, vec![0.7]), (&abm, vec![1.0, 2.0])] {
        let mut b = vec![0.0; x.len()];
        model.ito_drift(0.0, &x, &mut b);
        let ito = DVector::from_vec(b);
        let s = convert_drift(model, &ito, DriftDirection::ItoToStratonovich, 0.0, &x);
        let back = convert_drift(model, &s, DriftDirection::StratonovichToIto, 0.0, &x);
        roundtrip = roundtrip.max((back - ito).amax());
    }

    // Flow identity on GBM paths.
    let grid = TimeGrid::new(0.0, 1.0, 256).unwrap();
    let mut flow_err: f64 = 0.0;
    for p in 0..20 {
        let path = simulate_path(&gbm, &grid, &[100.0], 9, p).unwrap().unwrap();
        for s in [0, 64, 200] {
            let j = flow_jacobian(&gbm, &path, s, 256).unwrap();
            let ratio = path.terminal()[0] / path.state(s)[0];
            flow_err = flow_err.max((j.terminal()[(0, 0)] - ratio).abs() / ratio.abs());
        }
    }
    check(
        9,
        "SDE weak accuracy and identities",
        &[
            ("GBM mean 3SE", m.mean_z().abs() <= 3.0, format!("z {:.3}", m.mean_z())),
            ("GBM variance 3SE", m.variance_z().abs() <= 3.0, format!("z {:.3}", m.variance_z())),
            ("drift round trip 1e-10", roundtrip <= 1e-10, format!("{roundtrip:.2e}")),
            ("GBM Stratonovich drift", analytic <= 1e-10, format!("{analytic:.2e}")),
            ("flow = Y_T/Y_s 1e-4", flow_err <= 1e-4, format!("{flow_err:.2e}")),
        ],
    );
}

#[test]
fn criterion_10_myopic_controller() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);

    // No-trade wedge: drive strictly inside the proportional-cost band.
    let mut wedge_max: f64 = 0.0;
    let mut wedge_flag = true;
    for _ in 0..500 {
        let n = rng.random_range(1..5);
        let l1 = DVector::from_fn(n, |_, _| rng.random_range(0.1..2.0));
        let drive = DVector::from_fn(n, |i, _| l1[i] * rng.random_range(-0.999..0.999));
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let gain = SeparableGain {
            drift: drive,
            inventory: DMatrix::zeros(n, n),
            l1,
            temp_impact: &a * a.transpose() + DMatrix::identity(n, n) * 0.5,
            holding: None,
        };
        let zero = DVector::zeros(n);
        let act = myopic_step(&gain, &zero, &zero, &FeasibleSet::unconstrained(n), 0.01).unwrap();
        wedge_flag &= act.in_wedge;
        wedge_max = wedge_max.max(act.speed.amax());
    }

    // Volterra adjoint against a brute-force transpose of the convolution.
    let n = 2;
    let steps = 40;
    let dt = 0.05;
    let tau = 0.6;
    let kernel = ImpactKernel::exponential(DVector::from_vec(vec![0.8, 0.3]), 2.5);
    let sens: Vec<DVector<f64>> = (0..steps)
        .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let p = volterra_adjoint(&kernel, tau, dt, &sens);
    let mut adj_err: f64 = 0.0;
    for i in 0..steps {
        for a in 0..n {
            let mut unit = vec![DVector::zeros(n); steps];
            unit[i][a] = 1.0;
            let conv = convolve_grid(&kernel, tau, dt, &unit);
            let brute: f64 = conv.iter().zip(&sens).map(|(c, g)| c.dot(g)).sum();
            adj_err = adj_err.max((brute - p[i][a]).abs());
        }
    }
    let terminal_zero = p[steps].iter().all(|&x| x == 0.0);

    // Converged box-constrained concave quadratic.
    let dim = 6;
    let b = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    let h = &b * b.transpose() + DMatrix::identity(dim, dim);
    let problem = ConcaveQuadratic {
        linear: DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0)),
        curvature: h.clone(),
    };
    let mut fs = FeasibleSet::unconstrained(dim);
    fs.position_lo = DVector::from_element(dim, -0.5);
    fs.position_hi = DVector::from_element(dim, 0.5);
    let l = h.symmetric_eigenvalues().max();
    let run = projected_ascent(&problem, &fs, &DVector::zeros(dim), 1.0 / l, 5000).unwrap();
    let kkt = run.last().unwrap().1;
    let bench_kkt = *converge_bench(
        &ConvergeConfig {
            plateau_etas: vec![1e-2, 2e-2],
            plateau_iterations: 100,
            plateau_seeds: 1,
            decreasing_checkpoints: vec![10],
            decreasing_seeds: 1,
            rl_seeds: 1,
            ..Default::default()
        },
        10,
    )
    .unwrap()
    .kkt_residual
    .last()
    .unwrap();
    check(
        10,
        "myopic controller",
        &[
            ("wedge speed exactly 0", wedge_flag && wedge_max == 0.0, format!("max |v| {wedge_max:e}")),
            ("adjoint 1e-8", adj_err <= 1e-8, format!("{adj_err:.2e}")),
            ("terminal costate exactly 0", terminal_zero, String::new()),
            ("KKT <=1e-6", kkt <= 1e-6 && bench_kkt <= 1e-6, format!("{kkt:.2e}, {bench_kkt:.2e}")),
        ],
    );
}

#[test]
fn criterion_11_cad_lab() {
    let cfg = CadConfig::default();
    let s = cad_suite(&cfg, 11, 20_000).unwrap();
    let zero = s.surplus.rows.iter().find(|r| r.epsilon == 0.0).expect("epsilon 0 row");
    let full = s.surplus.rows.iter().find(|r| r.epsilon == 1.0).expect("epsilon 1 row");
    let fit = &s.share_scan.fits[0].fit;
    let ci = fit.intercept_ci95();
    let blocked = s.blocked.rows[0].surplus_fraction;
    check(
        11,
        "CAD premium",
        &[
            (
                "eps=0 CI contains 0",
                zero.ci.0 <= 0.0 && 0.0 <= zero.ci.1,
                format!("[{:.3e}, {:.3e}]", zero.ci.0, zero.ci.1),
            ),
            (
                "surplus delta>0 p<0.01",
                full.delta > 0.0 && full.p_value < 0.01,
                format!("delta {:.4} p {:.1e}", full.delta, full.p_value),
            ),
            (
                "share fit intercept CI contains 0",
                ci.0 <= 0.0 && 0.0 <= ci.1,
                format!("[{:.3e}, {:.3e}]", ci.0, ci.1),
            ),
            ("share slope>0", fit.slope > 0.0, format!("{:.4}", fit.slope)),
            ("costly frictions block surplus", blocked == 0.0, format!("fraction {blocked}")),
        ],
    );
}

fn run_cli(cmd: &str, cfg: &Path, seed: u64, out: &Path, threads: usize) -> i32 {
    main_with_args([
        "frictionlab",
        cmd,
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
        "--threads",
        &threads.to_string(),
    ])
}

const SMALL_CONFIG: &str = r#"
name = "determinism"
n_paths = 300

[market]
n_steps = 32

[policy]
kind = "perturbed_mo"
iterations = 50

[converge]
iterations = 60
rl_seeds = 3
plateau_etas = [0.01, 0.02]
plateau_iterations = 400
plateau_seeds = 2
decreasing_checkpoints = [10, 40]
decreasing_seeds = 3

[dominance]
agents = 4
paths_per_agent = 50
train_iterations = 10

[dominance.taker]
n_steps = 10

[dominance.maker]
n_steps = 10

[audit]
adapted_seeds = 2
self_bias_leaks = [0.2]
self_bias_iterations = 10

[audit.scenario]
n_steps = 64
bar_steps = 16

[cad]
premium_paths = 200
n_steps = 10

[report]
snr_values = [0.05]
snr_iterations = 20
snr_runs = 200
risk_samples = 5000
"#;

#[test]
fn criterion_12_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let commands = ["simulate", "mo-run", "rl-run", "converge", "dominance", "audit", "cad", "report"];
    let mut parts = Vec::new();
    for cmd in commands {
        let a = dir.path().join(format!("{cmd}-a"));
        let b = dir.path().join(format!("{cmd}-b"));
        let codes = (run_cli(cmd, &cfg, 12, &a, 1), run_cli(cmd, &cfg, 12, &b, 2));
        let mut same = codes == (0, 0);
        let mut n_files = 0;
        if same {
            let mut names: Vec<_> = fs::read_dir(&a)
                .unwrap()
                .map(|e| e.unwrap().file_name().into_string().unwrap())
                .filter(|n| n != "manifest.json")
                .collect();
            names.sort();
            n_files = names.len();
            for name in &names {
                same &= fs::read(a.join(name)).unwrap() == fs::read(b.join(name)).unwrap();
            }
            same &= n_files > 0;
        }
        parts.push((cmd, same, format!("exit {codes:?}, {n_files} files")));
    }
    check(12, "byte-identical reruns", &parts);
}
