use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EssError {
    #[error("invalid ESS spec: {0}")]
    InvalidSpec(String),
    #[error("SOC {soc} outside [{min}, {max}]")]
    SocOutOfBounds { soc: f64, min: f64, max: f64 },
}

/// Battery parameters. Power is in watts with charging positive; energy in
/// watt-hours; `dt_h` is the control interval in hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssSpec {
    pub node: String,
    pub p_max: f64,
    pub p_min: f64,
    pub e_rated: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub pf: f64,
    pub dt_h: f64,
}

impl EssSpec {
    /// Symmetric power limits `[-p_max, p_max]`, unity power factor.
    pub fn new(node: impl Into<String>, p_max: f64, e_rated: f64, dt_h: f64) -> Self {
        Self {
            node: node.into(),
            p_max,
            p_min: -p_max,
            e_rated,
            soc_min: 0.1,
            soc_max: 0.9,
            pf: 1.0,
            dt_h,
        }
    }

    pub fn validate(&self) -> Result<(), EssError> {
        let bad = |m: &str| Err(EssError::InvalidSpec(format!("{}: {m}", self.node)));
        if !(0.0 <= self.soc_min && self.soc_min < self.soc_max && self.soc_max <= 1.0) {
            return bad("need 0 <= soc_min < soc_max <= 1");
        }
        if !(self.p_min <= 0.0 && 0.0 <= self.p_max) {
            return bad("need p_min <= 0 <= p_max");
        }
        if !(self.e_rated > 0.0) {
            return bad("rated energy must be positive");
        }
        if !(self.dt_h > 0.0) {
            return bad("time step must be positive");
        }
        if !(self.pf > 0.0 && self.pf <= 1.0) {
            return bad("power factor must lie in (0, 1]");
        }
        Ok(())
    }

    /// Same device with its rated energy and power limits derated by `beta`.
    pub fn derated(&self, beta: f64) -> Self {
        Self {
            p_max: self.p_max * beta,
            p_min: self.p_min * beta,
            e_rated: self.e_rated * beta,
            ..self.clone()
        }
    }

    /// Feasible power range for the next interval given the SOC.
    pub fn headroom(&self, state: EssState) -> Headroom {
        let per_w = self.dt_h / self.e_rated;
        let charge = ((self.soc_max - state.soc) / per_w).max(0.0).min(self.p_max);
        let discharge = ((state.soc - self.soc_min) / per_w).max(0.0).min(-self.p_min);
        Headroom { charge, discharge }
    }
}

/// Largest charging and discharging power (both non-negative watts) that
/// keep power and SOC within bounds over one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Headroom {
    pub charge: f64,
    pub discharge: f64,
}

impl Headroom {
    pub fn clamp(&self, p: f64) -> f64 {
        p.clamp(-self.discharge, self.charge)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssState {
    pub soc: f64,
}

impl EssState {
    pub fn new(spec: &EssSpec, soc: f64) -> Result<Self, EssError> {
        if soc < spec.soc_min || soc > spec.soc_max || !soc.is_finite() {
            return Err(EssError::SocOutOfBounds { soc, min: spec.soc_min, max: spec.soc_max });
        }
        Ok(Self { soc })
    }
}

/// Advances the SOC by one interval. The requested power is clipped to the
/// power limits and to what the SOC window allows; the clipped value is
/// returned alongside the new state.
pub fn step_soc(spec: &EssSpec, state: EssState, p_b: f64) -> (EssState, f64) {
    let p = if p_b.is_finite() { p_b } else { 0.0 };
    let applied = spec.headroom(state).clamp(p);
    if applied == 0.0 {
        return (state, 0.0);
    }
    let soc = (state.soc + applied * spec.dt_h / spec.e_rated).clamp(spec.soc_min, spec.soc_max);
    (EssState { soc }, applied)
}
