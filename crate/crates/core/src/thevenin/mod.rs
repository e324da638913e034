//! Local voltage estimation at a single metered node.
//!
//! The rest of the feeder is reduced to a source `E` behind an impedance
//! `Z`, fitted from two consecutive smart-meter samples. The voltage for a
//! new operating point follows from the biquadratic power-voltage relation
//! of that equivalent; a piecewise polynomial corrector and a learned
//! sensitivity model then refine the raw value.

mod corrector;
mod history;
mod pipeline;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corrector::{fit_piecewise, CorrectorConfig, PiecewiseCorrector, Segment, SegmentFit};
pub use history::{simulate_node_history, ActionSource, MeterRecord};
pub use pipeline::{
    build_pipeline_rows, fit_pipeline, trace_csv, LocalEstimate, LocalPipeline, PipelineConfig,
    PipelineFitReport, PipelineRow, PipelineState, SensitivityModel, StepInputs, TraceRow,
    N_FEATURES,
};

/// Current-difference guard in p.u.
pub const CURRENT_GUARD: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheveninError {
    #[error("operating point beyond the loadability of the equivalent")]
    Infeasible,
    #[error("too few samples to fit any corrector segment")]
    Underdetermined,
    #[error("{0}")]
    Fit(String),
}

/// One smart-meter reading, per-unit. `p` and `q` are consumption
/// (load convention) and `current` is the phasor drawn by the node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmSample {
    pub t: usize,
    pub voltage: Complex64,
    pub current: Complex64,
    pub p: f64,
    pub q: f64,
}

impl SmSample {
    /// Reconstructs the phasors from magnitude-only metering, taking the
    /// local voltage as the angle reference: `I = conj((P + jQ) / V)`.
    pub fn from_meter(t: usize, v: f64, p: f64, q: f64) -> Self {
        let voltage = Complex64::new(v, 0.0);
        let current = (Complex64::new(p, q) / voltage).conj();
        Self { t, voltage, current, p, q }
    }

    /// A sample with known phasors (e.g. from a power-flow solution).
    pub fn from_phasors(t: usize, voltage: Complex64, current: Complex64) -> Self {
        let s = voltage * current.conj();
        Self { t, voltage, current, p: s.re, q: s.im }
    }

    pub fn v(&self) -> f64 {
        self.voltage.norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheveninParams {
    pub e_th: f64,
    pub r_th: f64,
    pub x_th: f64,
    /// False when the values were carried over instead of re-estimated.
    pub fresh: bool,
}

impl TheveninParams {
    /// An ideal source with no impedance.
    pub fn stiff(e_th: f64) -> Self {
        Self { e_th, r_th: 0.0, x_th: 0.0, fresh: false }
    }

    pub fn z_abs(&self) -> f64 {
        self.r_th.hypot(self.x_th)
    }

    fn stale(self) -> Self {
        Self { fresh: false, ..self }
    }
}

/// Thevenin parameters from two operating points.
///
/// `Z = (V₁ − V₂)/(I₂ − I₁)` and `E = (V₁·I₂ − V₂·I₁)/(I₂ − I₁)`. If the
/// current barely changed (`|ΔI| < CURRENT_GUARD`) or the result is not
/// usable, `prev` is returned with `fresh = false`. A negative resistance
/// is clamped to zero.
pub fn estimate_thevenin(s_prev: &SmSample, s_next: &SmSample, prev: TheveninParams) -> TheveninParams {
    let di = s_next.current - s_prev.current;
    if !(di.norm() >= CURRENT_GUARD) {
        return prev.stale();
    }
    let z = (s_prev.voltage - s_next.voltage) / di;
    let e = (s_prev.voltage * s_next.current - s_next.voltage * s_prev.current) / di;
    let e_th = e.norm();
    if !(e_th > 0.0) || !e_th.is_finite() || !z.re.is_finite() || !z.im.is_finite() {
        return prev.stale();
    }
    TheveninParams { e_th, r_th: z.re.max(0.0), x_th: z.im, fresh: true }
}

/// Left side of `V⁴ + bV² + c = 0` for the equivalent, with `p`, `q` net
/// injections (generation positive).
pub fn quartic_residual(params: &TheveninParams, p: f64, q: f64, v: f64) -> f64 {
    let (b, c) = quartic_coefficients(params, p, q);
    let v2 = v * v;
    v2 * v2 + b * v2 + c
}

fn quartic_coefficients(params: &TheveninParams, p: f64, q: f64) -> (f64, f64) {
    let (r, x, e) = (params.r_th, params.x_th, params.e_th);
    let b = -2.0 * (r * p + x * q) - e * e;
    let c = (p * p + q * q) * (r * r + x * x);
    (b, c)
}

/// High-voltage root of `V⁴ + bV² + c = 0` where
/// `b = −2(r·P + x·Q) − E²` and `c = (P² + Q²)(r² + x²)`.
///
/// `p` and `q` are net injections at the node (generation positive), so a
/// load enters with a negative sign.
pub fn solve_quartic_voltage(params: &TheveninParams, p: f64, q: f64) -> Result<f64, TheveninError> {
    let (b, c) = quartic_coefficients(params, p, q);
    if c == 0.0 && b < 0.0 {
        // Root is exactly sqrt(-b); avoids cancellation in the general form.
        return Ok((-b).sqrt());
    }
    let disc = b * b - 4.0 * c;
    if !(disc >= 0.0) {
        return Err(TheveninError::Infeasible);
    }
    let sq = disc.sqrt();
    // Pick the numerically stable form for the larger root.
    let v2 = if b <= 0.0 { (-b + sq) / 2.0 } else { 2.0 * c / (-b - sq) };
    if !(v2 > 0.0) || !v2.is_finite() {
        return Err(TheveninError::Infeasible);
    }
    Ok(v2.sqrt())
}
