//! PPO agents for single-ESS voltage support and the environments they
//! train in.

mod env;
mod policy;
mod ppo;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use env::{BanditEnv, CentralEnv, CentralReward, LocalEnv, LOCAL_STATE_DIM};
pub use policy::{GaussianPolicy, ValueNet};
pub use ppo::{
    compute_targets, ppo_update, telemetry_csv, train_agent, PpoConfig, PpoStats, Rollout,
    TrainedAgent, Transition, UpdateRecord,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlError {
    #[error("non-finite value during update: {0}")]
    NonFinite(String),
    #[error("empty trajectory")]
    Empty,
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Voltage band, relaxation margins and reward weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub v_min: f64,
    pub v_max: f64,
    /// Margin added to the lower limit.
    pub relax_low: f64,
    /// Margin subtracted from the upper limit.
    pub relax_high: f64,
    pub w_power: f64,
    pub w_penalty: f64,
    pub penalty: f64,
    /// Compensation price per unit of ESS power.
    pub price: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            v_min: 0.95,
            v_max: 1.05,
            relax_low: 0.02,
            relax_high: 0.02,
            w_power: 1.0,
            w_penalty: 1.0,
            penalty: 100.0,
            price: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(self.relax_low >= 0.0 && self.relax_high >= 0.0) {
            return Err(RlError::Config("relaxation margins must be non-negative".into()));
        }
        if !(self.v_max - self.relax_high > self.v_min + self.relax_low) {
            return Err(RlError::Config("relaxed voltage band is empty".into()));
        }
        Ok(())
    }

    pub fn in_relaxed_band(&self, v: f64) -> bool {
        !(v > self.v_max - self.relax_high || v < self.v_min + self.relax_low)
    }
}

/// Centralised reward: `−C·Σ|P| + Σ min{0, (V̄ − V̲)/2 − |V_m − V̄|}`,
/// evaluated literally. `power_abs` is the summed absolute ESS power in
/// whatever unit the caller prices.
pub fn reward_central(voltages: &[f64], power_abs: f64, cfg: &RewardConfig) -> f64 {
    let half = (cfg.v_max - cfg.v_min) / 2.0;
    let voltage_term: f64 = voltages.iter().map(|&v| (half - (v - cfg.v_max).abs()).min(0.0)).sum();
    -cfg.price * power_abs + voltage_term
}

/// Local reward with relaxed limits. The penalty branch applies whenever
/// the estimate leaves the relaxed band; otherwise only the power cost is
/// charged. `power_abs` is `|P_b|` in units of the rated power.
pub fn reward_local(v_est: f64, power_abs: f64, cfg: &RewardConfig) -> f64 {
    if cfg.in_relaxed_band(v_est) {
        -cfg.w_power * power_abs
    } else {
        -cfg.w_power * cfg.price * power_abs - cfg.w_penalty * cfg.penalty
    }
}

/// Per-step result of an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Power actually applied after clipping, watts (charging positive).
    pub applied_w: f64,
    pub soc: f64,
    /// Voltage the reward was computed on, p.u.
    pub voltage: f64,
    pub violation: bool,
    pub nonconverged: bool,
}

/// Common contract of the training environments. Actions are in watts.
pub trait Env {
    fn state_dim(&self) -> usize;
    fn action_bounds(&self) -> (f64, f64);
    /// Starts a new episode and returns its first observation.
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action_w: f64) -> EnvStep;
    /// Called before each rollout; environments with storage reset SOC here.
    fn begin_rollout(&mut self) {}
}
