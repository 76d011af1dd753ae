//! Friction-aware execution and portfolio-control laboratory.

pub mod cad_lab;
pub mod frictions;
pub mod harness_cli;
pub mod ledger;
pub mod mo_controller;
pub mod numeric;
pub mod phantom_audit;
pub mod pnl_analytics;
pub mod risk;
pub mod rl_controller;
pub mod rng;
pub mod sde_engine;
pub mod stats;
