//! Online de-confliction of independently trained ESS agents.
//!
//! Agents report their intended action and local voltage estimate to their
//! neighbours. Actions are first derated by a common scaler `β`, then
//! adjusted as little as possible so that a fitted polynomial voltage
//! surrogate stays inside the band.

mod online;
mod qp;
mod step;
mod surrogate;

use thiserror::Error;

use crate::assets::Headroom;
use crate::grid::GridError;

pub use online::{
    beta_sweep_csv, episode_log_csv, run_online, surrogate_samples, BetaSweepRow, Controller, Dither, LogRow,
    OnlineAgent, OnlineConfig, OnlineLog,
};
pub use qp::{Qp, QpOutcome};
pub use step::{coordinate_step, StepConfig, StepOutcome};
pub use surrogate::{
    fit_sensitivity, SensitivitySurrogate, SurrogateConfig, SurrogateFitReport, SurrogateSample,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoordinationError {
    #[error("scaling factor {0} outside [0, 1]")]
    InvalidBeta(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("surrogate fit: {0}")]
    Fit(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// What an agent shares with its neighbours at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentReport {
    pub node: String,
    /// Intended action after the local guard, watts (charging positive).
    pub action_w: f64,
    /// Local estimate at the intended action, p.u.
    pub v_est: f64,
    /// Local estimate with the ESS idle, p.u.
    pub v_base: f64,
    /// Power the derated ESS can absorb or deliver this step.
    pub headroom: Headroom,
}

pub fn check_beta(beta: f64) -> Result<(), CoordinationError> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(CoordinationError::InvalidBeta(beta))
    }
}

/// `ã = β·a`. Capacities are derated with [`crate::assets::EssSpec::derated`].
pub fn scale_actions(actions_w: &[f64], beta: f64) -> Result<Vec<f64>, CoordinationError> {
    check_beta(beta)?;
    Ok(actions_w.iter().map(|a| beta * a).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::EssSpec;

    #[test]
    fn scaling() {
        let a = [60_000.0, -30_000.0];
        assert_eq!(scale_actions(&a, 1.0).unwrap(), a.to_vec());
        assert_eq!(scale_actions(&a, 0.0).unwrap(), vec![0.0, -0.0]);
        assert_eq!(scale_actions(&[60_000.0], 0.2).unwrap(), vec![12_000.0]);
        assert_eq!(scale_actions(&a, 1.2), Err(CoordinationError::InvalidBeta(1.2)));
        assert!(scale_actions(&a, f64::NAN).is_err());
        let spec = EssSpec::new("R9", 60_000.0, 3_000_000.0, 0.25).derated(0.2);
        assert_eq!((spec.p_max, spec.e_rated), (12_000.0, 600_000.0));
    }
}
