use serde::{Deserialize, Serialize};

use super::TheveninError;
use crate::approx::fit_poly;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectorConfig {
    /// Lower threshold, p.u. (390 V on a 400 V base).
    pub v_low: f64,
    /// Upper threshold, p.u.
    pub v_high: f64,
    pub order: usize,
    /// Raw estimates above this are treated as equal to it.
    pub input_cap: f64,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        Self { v_low: 0.975, v_high: 1.0, order: 3, input_cap: 1.5 }
    }
}

/// Polynomial fitted on one segment, in the scaled coordinate
/// `z = (v − center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFit {
    pub center: f64,
    pub scale: f64,
    /// Ascending powers of `z`.
    pub coeffs: Vec<f64>,
    /// Range of raw estimates seen in training.
    pub input_range: (f64, f64),
    /// Range of true voltages seen in training.
    pub output_range: (f64, f64),
    pub points: usize,
    pub rms_residual: f64,
}

impl SegmentFit {
    fn eval(&self, v: f64) -> f64 {
        let v = v.clamp(self.input_range.0, self.input_range.1);
        let z = (v - self.center) / self.scale;
        let y = self.coeffs.iter().rev().fold(0.0, |acc, c| acc * z + c);
        y.clamp(self.output_range.0, self.output_range.1)
    }

    /// Coefficients in ascending powers of the raw estimate `v`.
    pub fn coefficients_in_v(&self) -> Vec<f64> {
        // Expand sum_k c_k ((v - m)/s)^k binomially.
        let n = self.coeffs.len();
        let mut out = vec![0.0; n];
        for (k, &c) in self.coeffs.iter().enumerate() {
            let ck = c / self.scale.powi(k as i32);
            let mut binom = 1.0;
            for j in 0..=k {
                // term: C(k, j) v^j (-m)^(k-j)
                out[j] += ck * binom * (-self.center).powi((k - j) as i32);
                binom = binom * (k - j) as f64 / (j + 1) as f64;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Segment {
    /// Too few points to fit; the estimate passes through unchanged.
    Identity,
    Poly(SegmentFit),
}

/// Three-segment correction of raw quartic estimates: below `v_low`,
/// between the thresholds (both ends inclusive), above `v_high`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseCorrector {
    pub config: CorrectorConfig,
    pub segments: [Segment; 3],
}

impl PiecewiseCorrector {
    pub fn identity(config: CorrectorConfig) -> Self {
        Self { config, segments: [Segment::Identity, Segment::Identity, Segment::Identity] }
    }

    /// Segment index for a raw estimate: 0 low, 1 middle, 2 high.
    pub fn segment_of(&self, v_hat: f64) -> usize {
        let v = self.capped(v_hat);
        if v < self.config.v_low {
            0
        } else if v <= self.config.v_high {
            1
        } else {
            2
        }
    }

    fn capped(&self, v_hat: f64) -> f64 {
        if v_hat.is_nan() {
            self.config.input_cap
        } else {
            v_hat.clamp(0.0, self.config.input_cap)
        }
    }

    /// Corrected estimate. Total: any non-negative (or NaN) input maps to a
    /// finite output.
    pub fn correct(&self, v_hat: f64) -> f64 {
        let v = self.capped(v_hat);
        match &self.segments[self.segment_of(v)] {
            Segment::Identity => v,
            Segment::Poly(fit) => fit.eval(v),
        }
    }

    pub fn fitted_segments(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::Poly(_))).count()
    }
}

/// Least-squares fit of true voltage on raw estimate, separately per
/// segment. Segments with fewer than `order + 1` distinct points stay as
/// identity; if no segment can be fitted the history is rejected.
pub fn fit_piecewise(
    history: &[(f64, f64)],
    config: CorrectorConfig,
) -> Result<PiecewiseCorrector, TheveninError> {
    if !(config.v_low < config.v_high) {
        return Err(TheveninError::Fit("corrector thresholds must satisfy v_low < v_high".into()));
    }
    let mut corr = PiecewiseCorrector::identity(config);
    let mut buckets: [Vec<(f64, f64)>; 3] = Default::default();
    for &(v_hat, v_true) in history {
        if !v_true.is_finite() {
            continue;
        }
        let v = corr.capped(v_hat);
        buckets[corr.segment_of(v)].push((v, v_true));
    }
    for (seg, pts) in buckets.iter().enumerate() {
        let mut distinct: Vec<f64> = pts.iter().map(|p| p.0).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < config.order + 1 {
            continue;
        }
        let lo = distinct[0];
        let hi = distinct[distinct.len() - 1];
        let center = 0.5 * (lo + hi);
        let scale = if hi > lo { 0.5 * (hi - lo) } else { 1.0 };
        let xs: Vec<Vec<f64>> = pts.iter().map(|p| vec![(p.0 - center) / scale]).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let fit = fit_poly(&xs, &ys, config.order).map_err(|e| TheveninError::Fit(e.to_string()))?;
        let y_lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let y_hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        corr.segments[seg] = Segment::Poly(SegmentFit {
            center,
            scale,
            coeffs: fit.model.coeffs().to_vec(),
            input_range: (lo, hi),
            output_range: (y_lo, y_hi),
            points: pts.len(),
            rms_residual: fit.rms_residual,
        });
    }
    if corr.fitted_segments() == 0 {
        return Err(TheveninError::Underdetermined);
    }
    Ok(corr)
}
