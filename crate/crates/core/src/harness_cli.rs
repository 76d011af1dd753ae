//! Scenario configuration, experiment orchestration and output.
//!
//! Every experiment is a pure function of `(config, seed, paths)` that
//! returns typed results; `run_scenario` writes them as CSV next to a
//! `manifest.json`. Floats are written at 17 significant digits.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cad_lab::{surplus_and_scan, CadError, CadScan, ImpactTestbed, ScanSetup};
use crate::frictions::{
    exec_price_taker, liq_price, FrictionError, ImpactKernel, LiquidationDiscount, MarketSnapshot, Overflow,
    TakerModel, TradeHistory,
};
use crate::ledger::{fmt17, step_taker, write_trace_csv, CarryRates, HoldingCostModel, LedgerError, LedgerState, TakerStep};
use crate::mo_controller::{
    projected_ascent, ConcaveQuadratic, FeasibleSet, MoError, MyopicController, SeparableGain, SpeedCap,
};
use crate::phantom_audit::{
    decompose_phantom, lookahead_scan, phantom_profit, positive_bias_prob, self_bias_check, snr_experiment,
    AuditError, AuditScenario, BiasMethod, Decomposition, LeakageSpec, LeakyLinearEnv, LookaheadScan, PhantomReport,
    SelfBiasCheck, SnrRow, Strategy,
};
use crate::pnl_analytics::{
    distribution_features, dominance_report, trained_dominance, DominanceReport, MakerScenario, PerturbationGen,
    PerturbationSpec, PnlError, QuadraticScenario,
};
use crate::risk::{bpoe, entropic, entropic_se, RiskError, TailSample};
use crate::rl_controller::{
    gap_ratio, plateau, train, LinearPolicy, PolicyEnvironment, PolicyParams, QuadraticTestbed, RlError,
    StepSchedule, TrainConfig, TrainTrace,
};
use crate::rng::{Domain, GaussianStream};
use crate::sde_engine::{
    check_blowups, map_paths, ArithmeticBrownian, Gbm, OrnsteinUhlenbeck, SdeError, SdeModel, TimeGrid,
};
use crate::stats::{linear_fit, loglog_fit, mean, Estimate, LinearFit};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<SdeError> for CliError {
    fn from(e: SdeError) -> Self {
        match e {
            SdeError::TooManyBlowups { .. } | SdeError::SingularMalliavin { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<RlError> for CliError {
    fn from(e: RlError) -> Self {
        match e {
            RlError::Diverged { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<LedgerError> for CliError {
    fn from(e: LedgerError) -> Self {
        match e {
            LedgerError::NonFinite(_) => CliError::Numerical(e.to_string()),
            LedgerError::Csv(_) | LedgerError::Io(_) => CliError::Io(e.to_string()),
            LedgerError::Dimension(_) => CliError::Validation(e.to_string()),
        }
    }
}

impl From<RiskError> for CliError {
    fn from(e: RiskError) -> Self {
        match e {
            RiskError::NonFinite => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<MoError> for CliError {
    fn from(e: MoError) -> Self {
        match e {
            MoError::Sde(s) => s.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<FrictionError> for CliError {
    fn from(e: FrictionError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<PnlError> for CliError {
    fn from(e: PnlError) -> Self {
        match e {
            PnlError::Rl(r) => r.into(),
            PnlError::Ledger(l) => l.into(),
            PnlError::Risk(r) => r.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<AuditError> for CliError {
    fn from(e: AuditError) -> Self {
        match e {
            AuditError::Rl(r) => r.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<CadError> for CliError {
    fn from(e: CadError) -> Self {
        match e {
            CadError::Sde(s) => s.into(),
            CadError::Mo(m) => m.into(),
            CadError::Invalid(_) => CliError::Validation(e.to_string()),
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarketModel {
    #[default]
    Abm,
    Gbm,
    Ou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketConfig {
    pub model: MarketModel,
    pub n_assets: usize,
    pub mid0: f64,
    pub drift: f64,
    pub vol: f64,
    /// OU only.
    pub mean_reversion: f64,
    pub horizon: f64,
    pub n_steps: usize,
    /// Full paths written by `simulate`.
    pub record_paths: usize,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            model: MarketModel::Abm,
            n_assets: 1,
            mid0: 100.0,
            drift: 0.05,
            vol: 0.2,
            mean_reversion: 1.0,
            horizon: 1.0,
            n_steps: 256,
            record_paths: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrictionConfig {
    pub half_spread: f64,
    pub temp_impact: f64,
    pub transient_amplitude: f64,
    pub transient_decay: f64,
    pub tau_fill: f64,
    pub overflow_coef: f64,
    pub depth: f64,
    pub adv: f64,
    pub liquidation_coef: f64,
}

impl Default for FrictionConfig {
    fn default() -> Self {
        Self {
            half_spread: 0.01,
            temp_impact: 0.1,
            transient_amplitude: 0.0,
            transient_decay: 1.0,
            tau_fill: 0.0,
            overflow_coef: 0.0,
            depth: 1e6,
            adv: 1e6,
            liquidation_coef: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LedgerConfig {
    pub lend: f64,
    pub borrow: f64,
    pub tax: f64,
    pub inventory_quad: f64,
    pub hold_fee: f64,
    pub lend_fee: f64,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self {
            lend: 0.0,
            borrow: 0.0,
            tax: 0.0,
            inventory_quad: 0.1,
            hold_fee: 0.0,
            lend_fee: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FeasibleConfig {
    /// Per-asset speed cap.
    pub speed_cap: Option<f64>,
    pub position_lo: Option<f64>,
    pub position_hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    pub alpha: f64,
    pub entropic_gamma: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            entropic_gamma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Mo,
    Rl,
    PerturbedMo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Variance of the speed perturbation for `perturbed_mo`.
    pub perturbation_floor: f64,
    pub perturbation_lag: usize,
    /// Linear policy `speed = theta[0] + theta[1] * position` for `rl`.
    pub theta: Vec<f64>,
    /// `rl-run`: iterations, step, batch and injected noise.
    pub iterations: usize,
    pub eta: f64,
    pub batch: usize,
    pub injected_noise: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Mo,
            perturbation_floor: 0.01,
            perturbation_lag: 1,
            theta: vec![0.0, 0.0],
            iterations: 200,
            eta: 0.05,
            batch: 1,
            injected_noise: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeConfig {
    pub dim: usize,
    pub mu: f64,
    pub smoothness: f64,
    pub iterations: usize,
    pub noise_var: f64,
    pub rl_eta: f64,
    pub rl_seeds: usize,
    /// Upper position bound for the constrained KKT run.
    pub box_hi: f64,
    pub plateau_etas: Vec<f64>,
    pub plateau_iterations: usize,
    pub plateau_seeds: usize,
    pub plateau_fraction: f64,
    pub decreasing_checkpoints: Vec<usize>,
    pub decreasing_offset: f64,
    pub decreasing_seeds: usize,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        Self {
            dim: 4,
            mu: 1.0,
            smoothness: 10.0,
            iterations: 200,
            noise_var: 1.0,
            rl_eta: 0.05,
            rl_seeds: 1024,
            box_hi: 1.5,
            plateau_etas: vec![1e-3, 1e-2, 1e-1],
            plateau_iterations: 100_000,
            plateau_seeds: 4,
            plateau_fraction: 0.2,
            decreasing_checkpoints: vec![100, 316, 1000, 3162, 10_000],
            decreasing_offset: 20.0,
            decreasing_seeds: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Taker,
    Maker,
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DominanceConfig {
    pub protocols: Vec<Protocol>,
    pub alpha: f64,
    pub level: f64,
    pub taker: QuadraticScenario,
    pub taker_floor: f64,
    pub taker_lag: usize,
    pub maker: MakerScenario,
    pub maker_floor: f64,
    pub agents: usize,
    pub paths_per_agent: usize,
    pub train_iterations: usize,
    pub train_eta: f64,
}

impl Default for DominanceConfig {
    fn default() -> Self {
        Self {
            protocols: vec![Protocol::Taker, Protocol::Maker, Protocol::Trained],
            alpha: 0.95,
            level: 0.01,
            taker: QuadraticScenario::default(),
            taker_floor: 0.09,
            taker_lag: 1,
            maker: MakerScenario::default(),
            maker_floor: 2.0 * 0.03 * 0.03,
            agents: 200,
            paths_per_agent: 500,
            train_iterations: 100,
            train_eta: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub scenario: AuditScenario,
    /// Causal strategies checked for zero phantom profit.
    pub adapted: Vec<Strategy>,
    pub adapted_seeds: usize,
    pub lookahead_windows: Vec<usize>,
    pub lookahead_gain: f64,
    pub decomposition_strategy: Strategy,
    pub decomposition_window: usize,
    pub info_alpha: f64,
    pub info_gain: f64,
    pub self_bias_leaks: Vec<f64>,
    pub self_bias_drift: f64,
    pub self_bias_past: usize,
    pub self_bias_ahead: usize,
    pub self_bias_iterations: usize,
    pub self_bias_eta: f64,
    pub inventory_quad: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            scenario: AuditScenario::default(),
            adapted: vec![
                Strategy::Constant { position: 1.0 },
                Strategy::Momentum { gain: 0.5, window: 32 },
            ],
            adapted_seeds: 20,
            lookahead_windows: vec![1, 2, 4, 8, 16],
            lookahead_gain: 1.0,
            decomposition_strategy: Strategy::Momentum { gain: 0.5, window: 32 },
            decomposition_window: 8,
            info_alpha: 0.3,
            info_gain: 1.0,
            self_bias_leaks: vec![0.1, 0.2, 0.4],
            self_bias_drift: 0.0,
            self_bias_past: 32,
            self_bias_ahead: 16,
            self_bias_iterations: 200,
            self_bias_eta: 0.1,
            inventory_quad: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CadScanConfig {
    pub epsilons: Vec<f64>,
    pub shares: Vec<f64>,
    pub drift: f64,
    pub l1: f64,
    pub temp_impact: f64,
    pub speed_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CadConfig {
    pub vol: f64,
    pub impact: f64,
    pub vol_impact: f64,
    pub risk_aversion: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub premium_paths: usize,
    /// Cheap frictions: the premium should pay.
    pub surplus: CadScanConfig,
    /// Costly frictions: no grid point clears the surplus condition.
    pub blocked: CadScanConfig,
    /// Share scan toward the nonatomic limit.
    pub share_scan: CadScanConfig,
}

impl Default for CadConfig {
    fn default() -> Self {
        Self {
            vol: 1.0,
            impact: 1.0,
            vol_impact: 0.0,
            risk_aversion: 0.05,
            horizon: 1.0,
            n_steps: 50,
            premium_paths: 20_000,
            surplus: CadScanConfig {
                epsilons: vec![0.0, 0.5, 1.0],
                shares: vec![1.0],
                drift: 0.0,
                l1: 0.02,
                temp_impact: 0.2,
                speed_cap: 1.0,
            },
            blocked: CadScanConfig {
                epsilons: vec![0.5],
                shares: vec![1.0],
                drift: 0.0,
                l1: 2.0,
                temp_impact: 1.0,
                speed_cap: 1.0,
            },
            share_scan: CadScanConfig {
                epsilons: vec![1.0],
                shares: vec![0.2, 0.1, 0.05, 0.02, 0.01],
                drift: 0.0,
                l1: 0.0,
                temp_impact: 1e-4,
                speed_cap: 1.0,
            },
        }
    }
}

impl Default for CadScanConfig {
    fn default() -> Self {
        CadConfig::default().surplus
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub z_values: Vec<f64>,
    pub snr_values: Vec<f64>,
    pub snr_iterations: usize,
    pub snr_runs: usize,
    pub snr_delta_sd: f64,
    /// Standard-normal samples for the risk oracles.
    pub risk_samples: usize,
    pub bpoe_thresholds: Vec<f64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            z_values: vec![0.3, 0.5, 0.7, 1.0, 1.3, 1.6],
            snr_values: vec![0.01, 0.05, 0.1],
            snr_iterations: 100,
            snr_runs: 20_000,
            snr_delta_sd: 1.0,
            risk_samples: 1_000_000,
            bpoe_thresholds: vec![1.0, 2.0, 2.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub n_paths: usize,
    pub market: MarketConfig,
    pub frictions: FrictionConfig,
    pub ledger: LedgerConfig,
    pub feasible: FeasibleConfig,
    pub risk: RiskConfig,
    pub policy: PolicyConfig,
    pub converge: ConvergeConfig,
    pub dominance: DominanceConfig,
    pub audit: AuditConfig,
    pub cad: CadConfig,
    pub report: ReportConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            n_paths: 10_000,
            market: MarketConfig::default(),
            frictions: FrictionConfig::default(),
            ledger: LedgerConfig::default(),
            feasible: FeasibleConfig::default(),
            risk: RiskConfig::default(),
            policy: PolicyConfig::default(),
            converge: ConvergeConfig::default(),
            dominance: DominanceConfig::default(),
            audit: AuditConfig::default(),
            cad: CadConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

fn positive(name: &str, x: f64) -> Result<(), CliError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive and finite, got {x}")))
    }
}

fn non_negative(name: &str, x: f64) -> Result<(), CliError> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be non-negative and finite, got {x}")))
    }
}

fn level(name: &str, x: f64) -> Result<(), CliError> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must lie in (0, 1), got {x}")))
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text: every field, defaults filled, fixed order.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_paths < 2 {
            return Err(invalid("n_paths must be at least 2"));
        }
        let m = &self.market;
        if m.n_assets == 0 || m.n_steps == 0 {
            return Err(invalid("market needs at least one asset and one step"));
        }
        positive("market.horizon", m.horizon)?;
        non_negative("market.vol", m.vol)?;
        if m.model == MarketModel::Gbm {
            positive("market.mid0", m.mid0)?;
        }
        let f = &self.frictions;
        non_negative("frictions.half_spread", f.half_spread)?;
        positive("frictions.temp_impact", f.temp_impact)?;
        non_negative("frictions.transient_amplitude", f.transient_amplitude)?;
        positive("frictions.transient_decay", f.transient_decay)?;
        non_negative("frictions.tau_fill", f.tau_fill)?;
        non_negative("frictions.overflow_coef", f.overflow_coef)?;
        positive("frictions.depth", f.depth)?;
        positive("frictions.adv", f.adv)?;
        non_negative("frictions.liquidation_coef", f.liquidation_coef)?;
        let l = &self.ledger;
        for (n, x) in [
            ("ledger.lend", l.lend),
            ("ledger.borrow", l.borrow),
            ("ledger.tax", l.tax),
            ("ledger.inventory_quad", l.inventory_quad),
            ("ledger.hold_fee", l.hold_fee),
            ("ledger.lend_fee", l.lend_fee),
        ] {
            non_negative(n, x)?;
        }
        if let Some(c) = self.feasible.speed_cap {
            positive("feasible.speed_cap", c)?;
        }
        if let (Some(lo), Some(hi)) = (self.feasible.position_lo, self.feasible.position_hi) {
            if lo > hi {
                return Err(invalid("feasible.position_lo exceeds position_hi"));
            }
        }
        level("risk.alpha", self.risk.alpha)?;
        positive("risk.entropic_gamma", self.risk.entropic_gamma)?;
        let p = &self.policy;
        non_negative("policy.perturbation_floor", p.perturbation_floor)?;
        if p.perturbation_lag == 0 || p.batch == 0 {
            return Err(invalid("policy.perturbation_lag and policy.batch must be positive"));
        }
        if p.theta.len() != 2 {
            return Err(invalid("policy.theta must have two entries"));
        }
        positive("policy.eta", p.eta)?;
        non_negative("policy.injected_noise", p.injected_noise)?;
        let c = &self.converge;
        if c.dim == 0 || c.iterations < 2 || c.rl_seeds == 0 || c.plateau_seeds == 0 || c.decreasing_seeds == 0 {
            return Err(invalid("converge sizes must be positive"));
        }
        positive("converge.mu", c.mu)?;
        if !(c.smoothness >= c.mu) {
            return Err(invalid("converge.smoothness must be at least mu"));
        }
        non_negative("converge.noise_var", c.noise_var)?;
        positive("converge.rl_eta", c.rl_eta)?;
        level("converge.plateau_fraction", c.plateau_fraction)?;
        for &e in &c.plateau_etas {
            positive("converge.plateau_etas", e)?;
            if e * c.smoothness >= 2.0 {
                return Err(invalid(format!("plateau step {e} is unstable at smoothness {}", c.smoothness)));
            }
        }
        if c.decreasing_checkpoints.iter().any(|&k| k == 0) {
            return Err(invalid("converge.decreasing_checkpoints must be positive"));
        }
        let d = &self.dominance;
        level("dominance.alpha", d.alpha)?;
        level("dominance.level", d.level)?;
        non_negative("dominance.taker_floor", d.taker_floor)?;
        non_negative("dominance.maker_floor", d.maker_floor)?;
        if d.taker_lag == 0 || d.agents == 0 || d.paths_per_agent == 0 {
            return Err(invalid("dominance sizes must be positive"));
        }
        if d.taker.n_steps < 2 || d.maker.n_steps == 0 {
            return Err(invalid("dominance scenarios need steps"));
        }
        positive("dominance.taker.inventory_quad", d.taker.inventory_quad)?;
        positive("dominance.maker.decay", d.maker.decay)?;
        positive("dominance.maker.intensity", d.maker.intensity)?;
        let a = &self.audit;
        a.scenario.validate()?;
        if a.adapted_seeds == 0 || a.lookahead_windows.is_empty() {
            return Err(invalid("audit needs seeds and look-ahead windows"));
        }
        let cad = &self.cad;
        positive("cad.horizon", cad.horizon)?;
        if cad.n_steps == 0 || cad.premium_paths < 2 {
            return Err(invalid("cad needs steps and at least two premium paths"));
        }
        for s in [&cad.surplus, &cad.blocked, &cad.share_scan] {
            if s.epsilons.iter().any(|e| !(0.0..=1.0).contains(e)) {
                return Err(invalid("cad epsilons must lie in [0, 1]"));
            }
            if s.shares.iter().any(|x| !(*x >= 0.0)) {
                return Err(invalid("cad shares must be non-negative"));
            }
            non_negative("cad.l1", s.l1)?;
            positive("cad.temp_impact", s.temp_impact)?;
            positive("cad.speed_cap", s.speed_cap)?;
        }
        let r = &self.report;
        if r.snr_runs < 40 || r.risk_samples < 2 {
            return Err(invalid("report sample sizes too small"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- output

/// CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| CliError::Io(e.to_string()))
    }
}

fn f(x: f64) -> String {
    fmt17(x)
}

fn u(x: usize) -> String {
    x.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config_name: String,
    pub command: String,
    pub seed: u64,
    pub n_paths: usize,
    pub threads: usize,
    pub version: String,
    pub files: Vec<ManifestFile>,
    pub wall_clock_seconds: f64,
    pub blowups: usize,
}

/// Tables plus extra files produced by one experiment.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub tables: Vec<Table>,
    /// Non-CSV outputs: name and contents.
    pub extra: Vec<(String, Vec<u8>)>,
    pub blowups: usize,
}

// ---------------------------------------------------------------- simulate

fn market_model(m: &MarketConfig) -> Result<Box<dyn SdeModel>, CliError> {
    let n = m.n_assets;
    Ok(match m.model {
        MarketModel::Abm => Box::new(ArithmeticBrownian::new(
            DVector::from_element(n, m.drift),
            DMatrix::identity(n, n) * m.vol,
            DMatrix::identity(n, n),
        )?),
        MarketModel::Gbm if n == 1 => Box::new(Gbm::new(m.drift, m.vol)),
        MarketModel::Ou if n == 1 => Box::new(OrnsteinUhlenbeck::new(m.mean_reversion, m.mid0, m.vol)),
        _ => return Err(invalid("gbm and ou markets are single-asset")),
    })
}

/// Closed-form terminal mean and variance of the first coordinate.
fn closed_form_moments(m: &MarketConfig) -> (f64, f64) {
    let (x0, t) = (m.mid0, m.horizon);
    match m.model {
        MarketModel::Abm => (x0 + m.drift * t, m.vol * m.vol * t),
        MarketModel::Gbm => {
            let mean = x0 * (m.drift * t).exp();
            (mean, mean * mean * ((m.vol * m.vol * t).exp() - 1.0))
        }
        MarketModel::Ou => {
            let k = m.mean_reversion;
            (x0, m.vol * m.vol * (1.0 - (-2.0 * k * t).exp()) / (2.0 * k))
        }
    }
}

/// Terminal moments against their closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentCheck {
    pub mean: Estimate,
    pub variance: Estimate,
    pub closed_mean: f64,
    pub closed_variance: f64,
    pub blowups: usize,
}

impl MomentCheck {
    pub fn mean_z(&self) -> f64 {
        (self.mean.mean - self.closed_mean) / self.mean.se
    }
    pub fn variance_z(&self) -> f64 {
        (self.variance.mean - self.closed_variance) / self.variance.se
    }
}

pub fn simulate_market(cfg: &ScenarioConfig, seed: u64, n_paths: usize) -> Result<(MomentCheck, Table, Table), CliError> {
    let m = &cfg.market;
    let model = market_model(m)?;
    let grid = TimeGrid::new(0.0, m.horizon, m.n_steps)?;
    let y0 = vec![m.mid0; model.state_dim()];
    let record = m.record_paths.min(n_paths);
    let mapped = map_paths(model.as_ref(), &grid, &y0, n_paths, seed, |i, p| {
        let full = (i < record).then(|| (0..=p.n_steps()).map(|k| p.state(k).to_vec()).collect::<Vec<_>>());
        (i, p.terminal()[0], full)
    })?;
    check_blowups(mapped.blown_up, n_paths)?;
    let mut paths = Table::new(
        "paths.csv",
        &std::iter::once("path")
            .chain(["step", "time"])
            .chain((0..model.state_dim()).map(|_| "state"))
            .collect::<Vec<_>>(),
    );
    paths.columns = ["path", "step", "time"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..model.state_dim()).map(|j| format!("state_{j}")))
        .collect();
    for (i, _, full) in &mapped.values {
        if let Some(states) = full {
            for (k, s) in states.iter().enumerate() {
                let mut row = vec![u(*i), u(k), f(grid.time(k))];
                row.extend(s.iter().map(|&x| f(x)));
                paths.push(row);
            }
        }
    }
    let xs: Vec<f64> = mapped.values.iter().map(|v| v.1).collect();
    let mean_est = Estimate::of(&xs);
    let mu = mean_est.mean;
    let sq: Vec<f64> = xs.iter().map(|x| (x - mu) * (x - mu)).collect();
    let mut var_est = Estimate::of(&sq);
    let n = xs.len() as f64;
    var_est.mean *= n / (n - 1.0);
    let (closed_mean, closed_variance) = closed_form_moments(m);
    let check = MomentCheck {
        mean: mean_est,
        variance: var_est,
        closed_mean,
        closed_variance,
        blowups: mapped.blown_up,
    };
    let mut terminal = Table::new("terminal.csv", &["statistic", "estimate", "se", "closed_form", "z"]);
    terminal.push(vec!["mean".into(), f(check.mean.mean), f(check.mean.se), f(closed_mean), f(check.mean_z())]);
    terminal.push(vec![
        "variance".into(),
        f(check.variance.mean),
        f(check.variance.se),
        f(closed_variance),
        f(check.variance_z()),
    ]);
    Ok((check, paths, terminal))
}

// ---------------------------------------------------------------- mo-run

fn feasible_set(cfg: &ScenarioConfig) -> FeasibleSet {
    let n = cfg.market.n_assets;
    let mut fs = FeasibleSet::unconstrained(n);
    if let Some(c) = cfg.feasible.speed_cap {
        fs.speed_cap = SpeedCap::Box { cap: vec![c; n] };
    }
    if let Some(lo) = cfg.feasible.position_lo {
        fs.position_lo = DVector::from_element(n, lo);
    }
    if let Some(hi) = cfg.feasible.position_hi {
        fs.position_hi = DVector::from_element(n, hi);
    }
    fs
}

fn holding_model(cfg: &ScenarioConfig) -> HoldingCostModel {
    HoldingCostModel {
        lend_fee: cfg.ledger.lend_fee,
        hold_fee: cfg.ledger.hold_fee,
        inventory_quad: cfg.ledger.inventory_quad,
        ..Default::default()
    }
}

struct PathRun {
    wealth: f64,
    realized: f64,
    mtm: f64,
    records: Vec<crate::ledger::StepRecord>,
}

/// Taker ledger along one market path under the configured policy.
fn run_taker_path(cfg: &ScenarioConfig, seed: u64, path: u64, keep: bool) -> Result<PathRun, CliError> {
    let m = &cfg.market;
    let fr = &cfg.frictions;
    let n = m.n_assets;
    let grid = TimeGrid::new(0.0, m.horizon, m.n_steps)?;
    let dt = grid.dt;
    let model = market_model(m)?;
    let kernel = if fr.transient_amplitude > 0.0 {
        ImpactKernel::exponential(DVector::from_element(n, fr.transient_amplitude), fr.transient_decay)
    } else {
        ImpactKernel::zero(n)
    };
    let overflow = if fr.overflow_coef > 0.0 {
        Overflow::Quadratic { coef: fr.overflow_coef }
    } else {
        Overflow::None
    };
    let taker = TakerModel::new(DMatrix::identity(n, n) * fr.temp_impact, kernel.clone(), fr.tau_fill, overflow)?;
    let mut history = TradeHistory::new(&kernel, fr.tau_fill, dt);
    let holding = holding_model(cfg);
    let rates = CarryRates {
        lend: cfg.ledger.lend,
        borrow: cfg.ledger.borrow,
        tax: cfg.ledger.tax,
    };
    let discount = LiquidationDiscount {
        coef: fr.liquidation_coef,
        horizon: 1.0,
    };
    let feasible = feasible_set(cfg);
    let controller = MyopicController {
        gain: SeparableGain {
            drift: DVector::from_element(n, m.drift),
            inventory: DMatrix::zeros(n, n),
            l1: DVector::from_element(n, fr.half_spread),
            temp_impact: DMatrix::identity(n, n) * fr.temp_impact,
            holding: Some((holding, DVector::from_element(n, m.mid0))),
        },
        feasible: feasible.clone(),
        ramp: None,
    };
    let rl_policy = LinearPolicy {
        params: PolicyParams::new(DVector::from_column_slice(&cfg.policy.theta), 1, 2)?,
        clip: Some(feasible),
    };
    let pert_spec = PerturbationSpec {
        floor: cfg.policy.perturbation_floor,
        lag: cfg.policy.perturbation_lag,
    };
    let mut pert = (cfg.policy.kind == PolicyKind::PerturbedMo).then(|| PerturbationGen::new(&pert_spec, n, seed, path));
    let mut eps = vec![0.0; n];
    let snap_at = |mid: &[f64]| MarketSnapshot {
        mid: DVector::from_column_slice(mid),
        half_spread: DVector::from_element(n, fr.half_spread),
        depth: DVector::from_element(n, fr.depth),
        adv: DVector::from_element(n, fr.adv),
    };
    let mut records = Vec::new();
    let (mut wealth, mut realized, mut mtm) = (f64::NAN, 0.0, 0.0);
    let zero = DVector::zeros(n);
    let market = crate::sde_engine::simulate_path(model.as_ref(), &grid, &vec![m.mid0; n], seed, path)?;
    let Some(market) = market else {
        return Err(CliError::Numerical(format!("market path {path} blew up")));
    };
    let mut state = LedgerState::new(0.0, 0.0, DVector::zeros(n), DVector::from_column_slice(market.state(0)));
    for k in 0..grid.n_steps {
        let snap = snap_at(market.state(k));
        let time_left = grid.horizon() - grid.time(k);
        let speed = match cfg.policy.kind {
            PolicyKind::Mo => controller.speed(time_left, &state.position, &zero, dt)?,
            PolicyKind::PerturbedMo => {
                let mut v = controller.speed(time_left, &state.position, &zero, dt)?;
                if let Some(g) = pert.as_mut() {
                    g.next(&mut eps);
                }
                v += DVector::from_column_slice(&eps);
                v
            }
            PolicyKind::Rl => {
                if n != 1 {
                    return Err(invalid("the linear rl policy is single-asset"));
                }
                let features = DVector::from_vec(vec![1.0, state.position[0]]);
                rl_policy.act(&features, &state.position, dt)?
            }
        };
        let order = &speed * dt;
        let exec = exec_price_taker(&taker, &snap, &speed, &order, &history)?;
        let next_pos = &state.position + &order;
        let next_snap = snap_at(market.state(k + 1));
        let liq = liq_price(&next_snap, &next_pos, &discount)?;
        let rec = step_taker(
            &mut state,
            &TakerStep {
                exec_price: &exec,
                speed: &speed,
                mid: &snap.mid,
                new_liq_price: &liq,
            },
            &rates,
            &holding,
            dt,
        )?;
        history.push(speed);
        if keep {
            records.push(rec);
        }
        wealth = state.wealth;
        realized = state.realized_pnl;
        mtm = state.mtm_pnl;
    }
    Ok(PathRun {
        wealth,
        realized,
        mtm,
        records,
    })
}

pub fn mo_run(cfg: &ScenarioConfig, seed: u64, n_paths: usize) -> Result<Artifacts, CliError> {
    if n_paths < crate::pnl_analytics::MIN_PATHS {
        return Err(invalid(format!("mo-run needs at least {} paths", crate::pnl_analytics::MIN_PATHS)));
    }
    let runs = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| run_taker_path(cfg, seed, i, i == 0))
        .collect::<Result<Vec<_>, _>>()?;
    let mut trace = Vec::new();
    write_trace_csv(&runs[0].records, &mut trace)?;
    let mut pnl = Table::new("pnl.csv", &["path", "wealth", "realized", "mtm"]);
    for (i, r) in runs.iter().enumerate() {
        pnl.push(vec![u(i), f(r.wealth), f(r.realized), f(r.mtm)]);
    }
    let wealth: Vec<f64> = runs.iter().map(|r| r.wealth).collect();
    let feats = distribution_features(&wealth, cfg.risk.alpha, 200, seed)?;
    let mut features = Table::new("features.csv", &["feature", "value", "se", "ci_lo", "ci_hi"]);
    for (name, ft) in [
        ("mean", feats.mean),
        ("variance", feats.variance),
        ("cvar_loss", feats.cvar_loss),
        ("p_positive", feats.p_positive),
    ] {
        features.push(vec![name.into(), f(ft.value), f(ft.se), f(ft.ci.0), f(ft.ci.1)]);
    }
    for (name, v) in [
        ("gaussian_var_loss", feats.gaussian_var_loss),
        ("gaussian_cvar_loss", feats.gaussian_cvar_loss),
        ("cantelli_lower", feats.cantelli_lower),
        ("cantelli_upper", feats.cantelli_upper),
    ] {
        features.push(vec![name.into(), f(v), f(0.0), f(v), f(v)]);
    }
    let mut art = Artifacts {
        tables: vec![pnl, features],
        ..Default::default()
    };
    art.extra.push(("trace.csv".into(), trace));
    Ok(art)
}

// ---------------------------------------------------------------- rl-run

pub fn rl_run(cfg: &ScenarioConfig, seed: u64) -> Result<(TrainTrace, Table), CliError> {
    let c = &cfg.converge;
    let p = &cfg.policy;
    let env = converge_testbed(c);
    let mut tc = TrainConfig::plain(p.iterations, StepSchedule::Constant { eta: p.eta });
    tc.batch = p.batch;
    tc.injected_noise = p.injected_noise;
    let trace = train(&env, &DVector::zeros(c.dim), &tc, seed)?;
    let mut cols: Vec<String> = ["iteration", "eta", "objective", "gap", "self_bias", "grad_cov_trace"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend((0..c.dim).map(|i| format!("theta_{i}")));
    let mut t = Table {
        name: "training.csv".into(),
        columns: cols,
        rows: Vec::new(),
    };
    for k in 0..trace.thetas.len() {
        let step = |v: &Vec<f64>| v.get(k).copied().unwrap_or(f64::NAN);
        let mut row = vec![
            u(k),
            f(step(&trace.etas)),
            f(trace.objective[k]),
            f(trace.gap[k]),
            f(if k == 0 { 0.0 } else { trace.self_bias[k - 1] }),
            f(step(&trace.grad_cov_trace)),
        ];
        row.extend(trace.thetas[k].iter().map(|&x| f(x)));
        t.push(row);
    }
    Ok((trace, t))
}

// ---------------------------------------------------------------- converge

fn converge_optimum(dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| if i % 2 == 0 { 1.0 + 0.5 * i as f64 } else { -(1.0 + 0.5 * i as f64) })
        .collect()
}

fn converge_testbed(c: &ConvergeConfig) -> QuadraticTestbed {
    let mut tb = QuadraticTestbed::spread(c.dim, c.mu, c.smoothness, c.noise_var);
    tb.optimum = converge_optimum(c.dim);
    tb
}

/// Gap of a diagonal concave quadratic, computed from the distance to the
/// optimum to avoid cancellation.
fn diag_gap(curv: &[f64], x: &DVector<f64>, star: &[f64]) -> f64 {
    curv.iter()
        .zip(star)
        .zip(x.iter())
        .map(|((l, s), xi)| 0.5 * l * (xi - s) * (xi - s))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergeReport {
    pub mo_gap: Vec<f64>,
    pub rl_gap: Vec<f64>,
    pub gamma: Vec<f64>,
    pub kkt_residual: Vec<f64>,
    /// `exp(slope)` of `ln gap` against iteration.
    pub mo_contraction: f64,
    pub mo_fit: LinearFit,
    pub plateau_etas: Vec<f64>,
    pub plateaus: Vec<f64>,
    pub plateau_predicted: Vec<f64>,
    pub plateau_fit: LinearFit,
    pub decreasing_k: Vec<usize>,
    pub decreasing_gap: Vec<Estimate>,
    pub decreasing_fit: LinearFit,
}

impl ConvergeReport {
    /// `gamma(k2) / gamma(k1)`.
    pub fn gamma_ratio(&self, k1: usize, k2: usize) -> f64 {
        self.gamma[k2] / self.gamma[k1]
    }
}

/// MO projected ascent against constant-step SGD on the same quadratic,
/// the SGD floor across step sizes and the decreasing-step rate.
pub fn converge_bench(cfg: &ConvergeConfig, seed: u64) -> Result<ConvergeReport, CliError> {
    let tb = converge_testbed(cfg);
    let dim = cfg.dim;
    let star = tb.optimum.clone();
    let curv = tb.curvatures.clone();
    let h = DMatrix::from_diagonal(&DVector::from_column_slice(&curv));
    let problem = ConcaveQuadratic {
        linear: &h * DVector::from_column_slice(&star),
        curvature: h,
    };
    let step = 1.0 / cfg.smoothness;
    let start = DVector::zeros(dim);
    let free = projected_ascent(&problem, &FeasibleSet::unconstrained(dim), &start, step, cfg.iterations)?;
    let mo_gap: Vec<f64> = free.iter().map(|(x, _)| diag_gap(&curv, x, &star)).collect();

    let mut boxed = FeasibleSet::unconstrained(dim);
    boxed.position_hi = DVector::from_element(dim, cfg.box_hi);
    let constrained = projected_ascent(&problem, &boxed, &start, step, cfg.iterations)?;
    let kkt_residual: Vec<f64> = constrained.iter().map(|(_, r)| *r).collect();

    // RL at matched effort, averaged over seeds
    let tc = TrainConfig::plain(cfg.iterations, StepSchedule::Constant { eta: cfg.rl_eta });
    let runs = (0..cfg.rl_seeds as u64)
        .into_par_iter()
        .map(|s| train(&tb, &start, &tc, seed.wrapping_add(s)).map(|t| t.gap))
        .collect::<Result<Vec<_>, _>>()?;
    let rl_gap: Vec<f64> = (0..=cfg.iterations)
        .map(|k| mean(&runs.iter().map(|g| g[k]).collect::<Vec<_>>()))
        .collect();
    let gamma = gap_ratio(&rl_gap, &mo_gap);

    let ks: Vec<f64> = (0..mo_gap.len()).filter(|&k| mo_gap[k] > 0.0).map(|k| k as f64).collect();
    let lg: Vec<f64> = (0..mo_gap.len()).filter(|&k| mo_gap[k] > 0.0).map(|k| mo_gap[k].ln()).collect();
    let mo_fit = linear_fit(&ks, &lg);

    // Variance floor: start at the optimum, average the trailing window.
    let mut plateaus = Vec::new();
    let mut predicted = Vec::new();
    let optimum = DVector::from_column_slice(&star);
    for (e, &eta) in cfg.plateau_etas.iter().enumerate() {
        let tc = TrainConfig::plain(cfg.plateau_iterations, StepSchedule::Constant { eta });
        let levels = (0..cfg.plateau_seeds as u64)
            .into_par_iter()
            .map(|s| {
                train(&tb, &optimum, &tc, seed.wrapping_add(1000 * (e as u64 + 1) + s))
                    .map(|t| plateau(&t.gap, cfg.plateau_fraction))
            })
            .collect::<Result<Vec<_>, _>>()?;
        plateaus.push(mean(&levels));
        predicted.push(tb.sgd_floor(eta));
    }
    let plateau_fit = loglog_fit(&cfg.plateau_etas, &plateaus);

    // Decreasing step: gap at each checkpoint over independent seeds.
    let max_k = cfg.decreasing_checkpoints.iter().copied().max().unwrap_or(0);
    let sched = StepSchedule::Decreasing {
        scale: 2.0,
        mu: cfg.mu,
        offset: cfg.decreasing_offset,
    };
    let tc = TrainConfig::plain(max_k, sched);
    let per_seed = (0..cfg.decreasing_seeds as u64)
        .into_par_iter()
        .map(|s| {
            train(&tb, &start, &tc, seed.wrapping_add(1_000_000 + s))
                .map(|t| cfg.decreasing_checkpoints.iter().map(|&k| t.gap[k]).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let decreasing_gap: Vec<Estimate> = (0..cfg.decreasing_checkpoints.len())
        .map(|j| Estimate::of(&per_seed.iter().map(|g| g[j]).collect::<Vec<_>>()))
        .collect();
    let decreasing_fit = loglog_fit(
        &cfg.decreasing_checkpoints.iter().map(|&k| k as f64).collect::<Vec<_>>(),
        &decreasing_gap.iter().map(|e| e.mean).collect::<Vec<_>>(),
    );
    let _ = tb.optimal_value();
    Ok(ConvergeReport {
        mo_contraction: mo_fit.slope.exp(),
        mo_fit,
        mo_gap,
        rl_gap,
        gamma,
        kkt_residual,
        plateau_etas: cfg.plateau_etas.clone(),
        plateaus,
        plateau_predicted: predicted,
        plateau_fit,
        decreasing_k: cfg.decreasing_checkpoints.clone(),
        decreasing_gap,
        decreasing_fit,
    })
}

fn converge_tables(r: &ConvergeReport) -> Vec<Table> {
    let mut curve = Table::new("convergence.csv", &["iteration", "mo_gap", "rl_gap", "gamma", "kkt_residual"]);
    for k in 0..r.mo_gap.len() {
        curve.push(vec![u(k), f(r.mo_gap[k]), f(r.rl_gap[k]), f(r.gamma[k]), f(r.kkt_residual[k])]);
    }
    let mut pl = Table::new("plateau.csv", &["eta", "plateau", "predicted_floor"]);
    for i in 0..r.plateaus.len() {
        pl.push(vec![f(r.plateau_etas[i]), f(r.plateaus[i]), f(r.plateau_predicted[i])]);
    }
    let mut dec = Table::new("decreasing.csv", &["iterations", "gap", "se"]);
    for (k, e) in r.decreasing_k.iter().zip(&r.decreasing_gap) {
        dec.push(vec![u(*k), f(e.mean), f(e.se)]);
    }
    let mut rates = Table::new("rates.csv", &["metric", "value"]);
    let last = r.gamma.len() - 1;
    for (name, v) in [
        ("mo_contraction", r.mo_contraction),
        ("mo_log_gap_r2", r.mo_fit.r2),
        ("plateau_loglog_slope", r.plateau_fit.slope),
        ("decreasing_loglog_slope", r.decreasing_fit.slope),
        ("gamma_ratio_last_over_quarter", r.gamma_ratio(last / 4, last)),
        ("final_kkt_residual", *r.kkt_residual.last().unwrap_or(&f64::NAN)),
    ] {
        rates.push(vec![name.into(), f(v)]);
    }
    vec![curve, pl, dec, rates]
}

// ---------------------------------------------------------------- dominance

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceSuite {
    pub rows: Vec<(Protocol, DominanceReport)>,
    /// Learned-target dispersion of the trained protocol.
    pub dispersion: Option<f64>,
}

pub fn dominance_suite(cfg: &DominanceConfig, seed: u64, n_paths: usize) -> Result<DominanceSuite, CliError> {
    let mut rows = Vec::new();
    let mut dispersion = None;
    for &p in &cfg.protocols {
        let report = match p {
            Protocol::Taker => {
                let s = &cfg.taker;
                let spec = PerturbationSpec {
                    floor: cfg.taker_floor,
                    lag: cfg.taker_lag,
                };
                let mo = s.simulate(seed, 0, n_paths, s.mo_target(), None)?;
                let rl = s.simulate(seed, 0, n_paths, s.mo_target(), Some(&spec))?;
                dominance_report(&mo, &rl, &spec, s.strong_concavity(), s.charged_horizon(), cfg.alpha, cfg.level)?
            }
            Protocol::Maker => {
                let s = &cfg.maker;
                let spec = PerturbationSpec::gaussian(cfg.maker_floor);
                let mo = s.simulate(seed, 0, n_paths, None)?;
                let rl = s.simulate(seed, 0, n_paths, Some(&spec))?;
                dominance_report(&mo, &rl, &spec, s.strong_concavity(), s.horizon, cfg.alpha, cfg.level)?
            }
            Protocol::Trained => {
                let t = trained_dominance(
                    &cfg.taker,
                    cfg.agents,
                    cfg.paths_per_agent,
                    cfg.train_iterations,
                    cfg.train_eta,
                    seed,
                    cfg.alpha,
                )?;
                dispersion = Some(t.dispersion);
                t.report
            }
        };
        rows.push((p, report));
    }
    Ok(DominanceSuite { rows, dispersion })
}

fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::Taker => "taker",
        Protocol::Maker => "maker",
        Protocol::Trained => "trained",
    }
}

fn dominance_table(s: &DominanceSuite) -> Table {
    let mut t = Table::new(
        "dominance.csv",
        &[
            "protocol",
            "n_paths",
            "mean_gap",
            "mean_gap_se",
            "predicted_mean_gap",
            "var_gap",
            "cvar_gap",
            "cvar_gap_se",
            "ppos_gap",
            "ppos_gap_se",
            "p_mean",
            "p_variance",
            "p_cvar",
            "p_positivity",
            "all_hold",
        ],
    );
    for (p, r) in &s.rows {
        t.push(vec![
            protocol_name(*p).into(),
            u(r.n_paths),
            f(r.mean_gap),
            f(r.mean_gap_se),
            f(r.predicted_mean_gap),
            f(r.var_gap),
            f(r.cvar_gap),
            f(r.cvar_gap_se),
            f(r.ppos_gap),
            f(r.ppos_gap_se),
            f(r.p_values.mean),
            f(r.p_values.variance),
            f(r.p_values.cvar),
            f(r.p_values.positivity),
            r.flags.all().to_string(),
        ]);
    }
    t
}

// ---------------------------------------------------------------- audit

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptedRow {
    pub strategy: usize,
    pub seed: u64,
    pub report: PhantomReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSuite {
    pub adapted: Vec<AdaptedRow>,
    pub lookahead: LookaheadScan,
    pub decomposition: Decomposition,
    pub self_bias: Vec<SelfBiasCheck>,
}

pub fn audit_suite(cfg: &AuditConfig, seed: u64, n_paths: usize) -> Result<AuditSuite, CliError> {
    let scn = &cfg.scenario;
    let mut adapted = Vec::new();
    for (i, s) in cfg.adapted.iter().enumerate() {
        for j in 0..cfg.adapted_seeds as u64 {
            let sd = seed.wrapping_add(j);
            adapted.push(AdaptedRow {
                strategy: i,
                seed: sd,
                report: phantom_profit(scn, s, &LeakageSpec::None, n_paths, sd)?,
            });
        }
    }
    let lookahead = lookahead_scan(
        scn,
        &Strategy::Constant { position: 0.0 },
        cfg.lookahead_gain,
        &cfg.lookahead_windows,
        n_paths,
        seed,
    )?;
    let decomposition = decompose_phantom(
        scn,
        &cfg.decomposition_strategy,
        &LeakageSpec::InfoDrift {
            alpha: cfg.info_alpha,
            gain: cfg.info_gain,
        },
        &LeakageSpec::Lookahead {
            window: cfg.decomposition_window,
            gain: cfg.lookahead_gain,
        },
        n_paths,
        seed,
    )?;
    let mut bias_scn = *scn;
    bias_scn.drift = cfg.self_bias_drift;
    let self_bias = cfg
        .self_bias_leaks
        .iter()
        .map(|&leak| {
            let env = LeakyLinearEnv {
                scenario: bias_scn,
                inventory_quad: cfg.inventory_quad,
                past: cfg.self_bias_past,
                leak,
                ahead: cfg.self_bias_ahead,
                noise_sd: 0.0,
            };
            self_bias_check(&env, cfg.self_bias_iterations, cfg.self_bias_eta, n_paths, seed)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AuditSuite {
        adapted,
        lookahead,
        decomposition,
        self_bias,
    })
}

fn audit_tables(s: &AuditSuite) -> Vec<Table> {
    let mut ad = Table::new("adapted.csv", &["strategy", "seed", "pi_ph", "se", "z"]);
    for r in &s.adapted {
        let e = r.report.pi_ph;
        ad.push(vec![u(r.strategy), r.seed.to_string(), f(e.mean), f(e.se), f(e.mean / e.se)]);
    }
    let mut la = Table::new("lookahead.csv", &["window", "window_time", "pi_ph", "se", "bound"]);
    for i in 0..s.lookahead.windows.len() {
        let r = &s.lookahead.reports[i];
        la.push(vec![
            u(s.lookahead.windows[i]),
            f(s.lookahead.window_time[i]),
            f(r.pi_ph.mean),
            f(r.pi_ph.se),
            f(r.bound),
        ]);
    }
    let d = &s.decomposition;
    let mut dc = Table::new("decomposition.csv", &["cell", "mean", "se"]);
    for (name, e) in [
        ("none", d.none),
        ("info_only", d.info_only),
        ("lookahead_only", d.lookahead_only),
        ("both", d.both),
        ("info_premium", d.info_premium),
        ("skorokhod", d.skorokhod),
        ("total", d.total),
        ("residual", d.residual),
    ] {
        dc.push(vec![name.into(), f(e.mean), f(e.se)]);
    }
    let mut sb = Table::new(
        "self_bias.csv",
        &["leak", "self_bias", "phantom", "phantom_se", "phantom_analytic", "ratio"],
    );
    for c in &s.self_bias {
        sb.push(vec![
            f(c.leak),
            f(c.self_bias),
            f(c.phantom.mean),
            f(c.phantom.se),
            f(c.phantom_analytic),
            f(c.ratio),
        ]);
    }
    let fit = &s.lookahead.fit;
    let mut af = Table::new("audit_fit.csv", &["metric", "value"]);
    for (name, v) in [
        ("lookahead_slope", fit.slope),
        ("lookahead_intercept", fit.intercept),
        ("lookahead_r2", fit.r2),
        ("decomposition_residual", d.residual.mean),
        ("decomposition_residual_se", d.residual.se),
    ] {
        af.push(vec![name.into(), f(v)]);
    }
    vec![ad, la, dc, sb, af]
}

// ---------------------------------------------------------------- cad

#[derive(Debug, Clone)]
pub struct CadSuite {
    pub surplus: CadScan,
    pub blocked: CadScan,
    pub share_scan: CadScan,
}

fn cad_scan(cfg: &CadConfig, scan: &CadScanConfig, seed: u64, n_paths: usize) -> Result<CadScan, CliError> {
    let tb = ImpactTestbed {
        n_assets: 1,
        vol: cfg.vol,
        impact: cfg.impact,
        risk_aversion: cfg.risk_aversion,
        horizon: cfg.horizon,
        n_steps: cfg.n_steps,
        vol_impact: cfg.vol_impact,
    };
    let cad = tb.model(1.0)?;
    let gain = SeparableGain {
        drift: DVector::from_element(1, scan.drift),
        inventory: DMatrix::zeros(1, 1),
        l1: DVector::from_element(1, scan.l1),
        temp_impact: DMatrix::from_element(1, 1, scan.temp_impact),
        holding: None,
    };
    let feasible = FeasibleSet {
        speed_cap: SpeedCap::Box { cap: vec![scan.speed_cap] },
        ..FeasibleSet::unconstrained(1)
    };
    let utility = tb.utility();
    let setup = ScanSetup {
        cad: &cad,
        gain: &gain,
        feasible: &feasible,
        utility: &utility,
        grid: tb.grid()?,
        y0: vec![0.0],
        initial_position: DVector::zeros(1),
        n_paths,
        premium_paths: cfg.premium_paths,
        seed,
    };
    Ok(surplus_and_scan(&setup, &scan.epsilons, &scan.shares)?)
}

pub fn cad_suite(cfg: &CadConfig, seed: u64, n_paths: usize) -> Result<CadSuite, CliError> {
    Ok(CadSuite {
        surplus: cad_scan(cfg, &cfg.surplus, seed, n_paths)?,
        blocked: cad_scan(cfg, &cfg.blocked, seed, n_paths)?,
        share_scan: cad_scan(cfg, &cfg.share_scan, seed, n_paths)?,
    })
}

fn cad_artifacts(s: &CadSuite) -> Result<(Vec<Table>, Vec<u8>), CliError> {
    let mut rows = Table::new(
        "cad.csv",
        &[
            "scan",
            "epsilon",
            "share_scale",
            "delta",
            "delta_se",
            "ci_lo",
            "ci_hi",
            "p_value",
            "surplus_fraction",
            "min_margin",
            "chi_norm",
            "traded",
        ],
    );
    let mut fits = Table::new(
        "cad_fit.csv",
        &["scan", "epsilon", "slope", "intercept", "intercept_ci_lo", "intercept_ci_hi", "origin_slope", "r2"],
    );
    let mut json_rows = Vec::new();
    for (name, scan) in [("surplus", &s.surplus), ("blocked", &s.blocked), ("share_scan", &s.share_scan)] {
        for r in &scan.rows {
            rows.push(vec![
                name.into(),
                f(r.epsilon),
                f(r.share_scale),
                f(r.delta),
                f(r.delta_se),
                f(r.ci.0),
                f(r.ci.1),
                f(r.p_value),
                f(r.surplus_fraction),
                f(r.margin_range.0),
                f(r.chi_norm),
                f(r.traded),
            ]);
            json_rows.push(r.clone());
        }
        for ft in &scan.fits {
            let ci = ft.fit.intercept_ci95();
            fits.push(vec![
                name.into(),
                f(ft.epsilon),
                f(ft.fit.slope),
                f(ft.fit.intercept),
                f(ci.0),
                f(ci.1),
                f(ft.origin_slope),
                f(ft.fit.r2),
            ]);
        }
    }
    let json = serde_json::to_vec_pretty(&json_rows)?;
    Ok((vec![rows, fits], json))
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskChecks {
    pub cvar: f64,
    pub alpha: f64,
    /// Largest `|CVaR_{1 - bPOE(tau)} - tau|` over the thresholds.
    pub bpoe_inverse_error: f64,
    pub entropic: f64,
    pub entropic_se: f64,
    pub entropic_closed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSuite {
    /// `(z_eff, P[bias > 0])` under the normal proxy.
    pub bias_table: Vec<(f64, f64)>,
    pub snr: Vec<SnrRow>,
    pub risk: RiskChecks,
}

fn standard_normals(seed: u64, n: usize) -> Vec<f64> {
    const CHUNK: usize = 4096;
    let chunks = n.div_ceil(CHUNK);
    let mut out: Vec<f64> = (0..chunks as u64)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut g = GaussianStream::new(seed, Domain::Scenario, c, 1);
            let mut z = [0.0];
            (0..CHUNK).map(move |_| {
                g.next_block(&mut z);
                z[0]
            })
        })
        .collect();
    out.truncate(n);
    out
}

/// Paired samples with mean `z` and unit sample variance, so the proxy
/// sees `z_eff = z` exactly.
fn unit_pair(z: f64) -> (Vec<f64>, Vec<f64>) {
    let a = std::f64::consts::FRAC_1_SQRT_2;
    (vec![z + a, z - a], vec![0.0, 0.0])
}

pub fn report_suite(cfg: &ReportConfig, risk: &RiskConfig, seed: u64) -> Result<ReportSuite, CliError> {
    let bias_table = cfg
        .z_values
        .iter()
        .map(|&z| {
            let (zs, ds) = unit_pair(z);
            positive_bias_prob(&zs, &ds, BiasMethod::NormalProxy).map(|p| (p.z_eff, p.prob))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let snr = cfg
        .snr_values
        .iter()
        .map(|&s| snr_experiment(s, cfg.snr_iterations, cfg.snr_delta_sd, cfg.snr_runs, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let xs = standard_normals(seed, cfg.risk_samples);
    let tail = TailSample::new(&xs, None)?;
    let cvar = tail.cvar(risk.alpha)?;
    let mut bpoe_err: f64 = 0.0;
    for &tau in &cfg.bpoe_thresholds {
        let p = crate::risk::bpoe_sorted(&tail, tau)?;
        if p > 0.0 && p < 1.0 {
            bpoe_err = bpoe_err.max((tail.cvar(1.0 - p)? - tau).abs());
        }
    }
    let _ = bpoe;
    let g = risk.entropic_gamma;
    Ok(ReportSuite {
        bias_table,
        snr,
        risk: RiskChecks {
            cvar,
            alpha: risk.alpha,
            bpoe_inverse_error: bpoe_err,
            entropic: entropic(&xs, g)?,
            entropic_se: entropic_se(&xs, g)?,
            entropic_closed: 0.5 * g,
        },
    })
}

fn report_tables(r: &ReportSuite) -> Vec<Table> {
    let mut bt = Table::new("bias_table.csv", &["z_eff", "p_positive"]);
    for (z, p) in &r.bias_table {
        bt.push(vec![f(*z), f(*p)]);
    }
    let mut sn = Table::new("snr.csv", &["snr", "iterations", "z_eff", "p_empirical", "p_normal", "p_lr"]);
    for s in &r.snr {
        sn.push(vec![f(s.snr), u(s.iterations), f(s.z_eff), f(s.p_empirical), f(s.p_normal), f(s.p_lr)]);
    }
    let mut rc = Table::new("risk_checks.csv", &["metric", "value"]);
    for (name, v) in [
        ("cvar", r.risk.cvar),
        ("alpha", r.risk.alpha),
        ("bpoe_inverse_error", r.risk.bpoe_inverse_error),
        ("entropic", r.risk.entropic),
        ("entropic_se", r.risk.entropic_se),
        ("entropic_closed", r.risk.entropic_closed),
    ] {
        rc.push(vec![name.into(), f(v)]);
    }
    vec![bt, sn, rc]
}

// ---------------------------------------------------------------- driver

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Simulate,
    MoRun,
    RlRun,
    Converge,
    Dominance,
    Audit,
    Cad,
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::MoRun => "mo-run",
            Command::RlRun => "rl-run",
            Command::Converge => "converge",
            Command::Dominance => "dominance",
            Command::Audit => "audit",
            Command::Cad => "cad",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "frictionlab", version, about = "Friction-aware portfolio-control laboratory")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `n_paths` from the config.
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Run one experiment and return its artifacts without touching disk.
pub fn run_experiment(command: Command, cfg: &ScenarioConfig, seed: u64, n_paths: usize) -> Result<Artifacts, CliError> {
    Ok(match command {
        Command::Simulate => {
            let (check, paths, terminal) = simulate_market(cfg, seed, n_paths)?;
            Artifacts {
                tables: vec![paths, terminal],
                blowups: check.blowups,
                ..Default::default()
            }
        }
        Command::MoRun => mo_run(cfg, seed, n_paths)?,
        Command::RlRun => Artifacts {
            tables: vec![rl_run(cfg, seed)?.1],
            ..Default::default()
        },
        Command::Converge => Artifacts {
            tables: converge_tables(&converge_bench(&cfg.converge, seed)?),
            ..Default::default()
        },
        Command::Dominance => Artifacts {
            tables: vec![dominance_table(&dominance_suite(&cfg.dominance, seed, n_paths)?)],
            ..Default::default()
        },
        Command::Audit => Artifacts {
            tables: audit_tables(&audit_suite(&cfg.audit, seed, n_paths)?),
            ..Default::default()
        },
        Command::Cad => {
            let (tables, json) = cad_artifacts(&cad_suite(&cfg.cad, seed, n_paths)?)?;
            Artifacts {
                tables,
                extra: vec![("cad_report.json".into(), json)],
                blowups: 0,
            }
        }
        Command::Report => Artifacts {
            tables: report_tables(&report_suite(&cfg.report, &cfg.risk, seed)?),
            ..Default::default()
        },
    })
}

/// Load, validate, run and write outputs plus `manifest.json`.
pub fn run_scenario(cli: &Cli) -> Result<RunManifest, CliError> {
    let started = Instant::now();
    let cfg = ScenarioConfig::load(&cli.config)?;
    let n_paths = cli.paths.unwrap_or(cfg.n_paths);
    if n_paths < 2 {
        return Err(invalid("--paths must be at least 2"));
    }
    let threads = match cli.threads {
        Some(0) => return Err(invalid("--threads must be positive")),
        Some(t) => t,
        None => rayon::current_num_threads(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    let art = pool.install(|| run_experiment(cli.command, &cfg, cli.seed, n_paths))?;
    fs::create_dir_all(&cli.out)?;
    let mut files = Vec::new();
    for t in &art.tables {
        fs::write(cli.out.join(&t.name), t.to_csv()?)?;
        files.push(ManifestFile {
            name: t.name.clone(),
            columns: t.columns.clone(),
            rows: t.rows.len(),
        });
    }
    for (name, bytes) in &art.extra {
        fs::write(cli.out.join(name), bytes)?;
        let (columns, rows) = if name.ends_with(".csv") {
            let text = String::from_utf8_lossy(bytes);
            let header = text.lines().next().map(|h| h.split(',').map(str::to_string).collect());
            (header.unwrap_or_default(), text.lines().count().saturating_sub(1))
        } else {
            (Vec::new(), 0)
        };
        files.push(ManifestFile {
            name: name.clone(),
            columns,
            rows,
        });
    }
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        config_name: cfg.name.clone(),
        command: cli.command.name().into(),
        seed: cli.seed,
        n_paths,
        threads,
        version: ARTIFACT_VERSION.into(),
        files,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        blowups: art.blowups,
    };
    fs::write(cli.out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run_scenario(&cli) {
        Ok(m) => {
            log::info!("{} finished in {:.3}s", m.command, m.wall_clock_seconds);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ScenarioConfig::parse("n_paths = 100\nbogus = 1\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = ScenarioConfig::parse("[market]\nvolatility = 1.0\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = ScenarioConfig::parse("name = \"x\"\nn_paths = 500\n[market]\nvol = 0.3\ndrift = 0.1\n").unwrap();
        let b = ScenarioConfig::parse("[market]\ndrift = 0.1\nvol = 0.3\n\n").unwrap();
        let b = ScenarioConfig {
            name: "x".into(),
            n_paths: 500,
            ..b
        };
        assert_eq!(a.hash(), b.hash());
        let c = ScenarioConfig::parse("n_paths = 500\nname = \"x\"\n[market]\nvol = 0.3\ndrift = 0.1\n").unwrap();
        assert_eq!(a.hash(), c.hash());
    }

    #[test]
    fn canonical_round_trip() {
        let cfg = ScenarioConfig::default();
        let again = ScenarioConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.canonical(), again.canonical());
    }

    #[test]
    fn validation_catches_bad_levels() {
        let err = ScenarioConfig::parse("[risk]\nalpha = 1.5\n").unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
    }

    #[test]
    fn missing_config_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let code = main_with_args([
            "frictionlab",
            "simulate",
            "--config",
            dir.path().join("nope.toml").to_str().unwrap(),
            "--seed",
            "1",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn smoke_simulate_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(&cfg, "n_paths = 200\n[market]\nn_steps = 16\n").unwrap();
        let out = dir.path().join("out");
        let code = main_with_args([
            "frictionlab",
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "42",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let m: RunManifest = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.seed, 42);
        let term = m.files.iter().find(|f| f.name == "terminal.csv").unwrap();
        assert_eq!(term.columns, ["statistic", "estimate", "se", "closed_form", "z"]);
        let text = fs::read_to_string(out.join("terminal.csv")).unwrap();
        assert!(text.starts_with("statistic,estimate,se,closed_form,z"));
    }

    #[test]
    fn blowups_exit_three() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(&cfg, "n_paths = 200\n[market]\nmodel = \"gbm\"\nvol = 1e4\n").unwrap();
        let code = main_with_args([
            "frictionlab",
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "1",
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ]);
        assert_eq!(code, 3);
    }

    #[test]
    fn mo_run_is_deterministic_across_thread_counts() {
        let mut cfg = ScenarioConfig::default();
        cfg.market.n_steps = 20;
        cfg.policy.kind = PolicyKind::PerturbedMo;
        let a = rl_pool(1).install(|| mo_run(&cfg, 3, 120)).unwrap();
        let b = rl_pool(3).install(|| mo_run(&cfg, 3, 120)).unwrap();
        for (x, y) in a.tables.iter().zip(&b.tables) {
            assert_eq!(x.to_csv().unwrap(), y.to_csv().unwrap());
        }
        assert_eq!(a.extra, b.extra);
    }

    fn rl_pool(n: usize) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()
    }
}
