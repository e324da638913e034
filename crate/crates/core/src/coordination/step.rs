use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::qp::{Qp, QpOutcome};
use super::{AgentReport, CoordinationError, SensitivitySurrogate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub v_min: f64,
    pub v_max: f64,
    /// Trust radius per linearisation, as a fraction of each rated power.
    pub trust_radius: f64,
    pub max_iter: usize,
    /// Stop once the largest move (fraction of rated power) is below this.
    pub step_tol: f64,
    /// Weight on squared band violation, violation measured in percent of
    /// nominal voltage, used once the hard subproblem is infeasible.
    pub penalty: f64,
    /// Voltage residual (p.u.) above which the outcome is flagged.
    pub feas_tol: f64,
    /// Allowance for surrogate error: the band is narrowed by this much
    /// (p.u.) on both sides before solving.
    pub margin: f64,
}

impl StepConfig {
    fn tightened(&self) -> Result<Self, CoordinationError> {
        let (lo, hi) = (self.v_min + self.margin, self.v_max - self.margin);
        if !(self.margin >= 0.0 && lo < hi) {
            return Err(CoordinationError::Config(format!("margin {} leaves an empty band", self.margin)));
        }
        Ok(Self { v_min: lo, v_max: hi, margin: 0.0, ..*self })
    }
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            v_min: 0.95,
            v_max: 1.05,
            trust_radius: 0.1,
            max_iter: 50,
            step_tol: 1e-6,
            penalty: 1e4,
            feas_tol: 1e-6,
            margin: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// Adjusted actions, watts.
    pub a_star: Vec<f64>,
    /// Surrogate voltages at `a_star`.
    pub v_pred: Vec<f64>,
    /// Residual band violations remain under the surrogate.
    pub infeasible: bool,
    pub max_residual: f64,
    pub iterations: usize,
    /// Some subproblem fell back to the penalty formulation.
    pub penalized: bool,
}

/// Clamps to `[lo, hi]` and pins values within rounding of a bound onto it.
fn snap(v: f64, lo: f64, hi: f64) -> f64 {
    let tol = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
    if v >= hi - tol {
        hi
    } else if v <= lo + tol {
        lo
    } else {
        v
    }
}

fn residual(v: &[f64], cfg: &StepConfig) -> f64 {
    v.iter().map(|&x| (cfg.v_min - x).max(x - cfg.v_max).max(0.0)).fold(0.0, f64::max)
}

/// Smallest squared adjustment of the scaled actions `scaled_w` that keeps
/// every surrogate voltage in `[v_min, v_max]` and every action inside its
/// report's headroom.
///
/// Solved by sequential linearisation of the surrogate inside a trust box;
/// each subproblem is a QP. When a subproblem has no feasible point the
/// band becomes a quadratic penalty, and if the final point still violates
/// the band the outcome is flagged rather than failing.
pub fn coordinate_step(
    reports: &[AgentReport],
    scaled_w: &[f64],
    surrogate: &SensitivitySurrogate,
    cfg: &StepConfig,
) -> Result<StepOutcome, CoordinationError> {
    let cfg = &cfg.tightened()?;
    let k = reports.len();
    if k == 0 || scaled_w.len() != k || surrogate.len() != k {
        return Err(CoordinationError::Config("reports, actions and surrogate must have equal width".into()));
    }
    for (r, m) in reports.iter().zip(&surrogate.members) {
        if &r.node != m {
            return Err(CoordinationError::Config(format!("report for {} where {} was expected", r.node, m)));
        }
    }
    let p: Vec<f64> = surrogate.p_scale.clone();
    let v_base: Vec<f64> = reports.iter().map(|r| r.v_base).collect();
    let lo: Vec<f64> = reports.iter().zip(&p).map(|(r, p)| -r.headroom.discharge / p).collect();
    let hi: Vec<f64> = reports.iter().zip(&p).map(|(r, p)| r.headroom.charge / p).collect();
    let target: Vec<f64> = scaled_w.iter().zip(&p).map(|(a, p)| a / p).collect();

    let in_box = (0..k).all(|i| lo[i] <= target[i] && target[i] <= hi[i]);
    if in_box {
        let v = surrogate.predict(scaled_w, &v_base);
        if v.iter().all(|&x| cfg.v_min <= x && x <= cfg.v_max) {
            return Ok(StepOutcome {
                a_star: scaled_w.to_vec(),
                v_pred: v,
                infeasible: false,
                max_residual: 0.0,
                iterations: 0,
                penalized: false,
            });
        }
    }

    let mut x: Vec<f64> = (0..k).map(|i| target[i].clamp(lo[i], hi[i])).collect();
    let mut iterations = 0;
    let mut penalized = false;
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let (v, jac) = surrogate.linearize(&x, &v_base);
        let tlo: Vec<f64> = (0..k).map(|i| lo[i].max(x[i] - cfg.trust_radius)).collect();
        let thi: Vec<f64> = (0..k).map(|i| hi[i].min(x[i] + cfg.trust_radius)).collect();
        let next = match subproblem(&x, &target, &v, &jac, &tlo, &thi, None, cfg) {
            Some(y) => y,
            None => {
                penalized = true;
                subproblem(&x, &target, &v, &jac, &tlo, &thi, Some(cfg.penalty), cfg)
                    .ok_or_else(|| CoordinationError::Fit("penalty subproblem failed".into()))?
            }
        };
        let step = (0..k).map(|i| (next[i] - x[i]).abs()).fold(0.0, f64::max);
        x = (0..k).map(|i| snap(next[i], lo[i], hi[i])).collect();
        if step < cfg.step_tol {
            break;
        }
    }
    let a_star: Vec<f64> = (0..k)
        .map(|i| {
            let h = reports[i].headroom;
            if x[i] == hi[i] {
                h.charge
            } else if x[i] == lo[i] {
                -h.discharge
            } else {
                (x[i] * p[i]).clamp(-h.discharge, h.charge)
            }
        })
        .collect();
    let v_pred = surrogate.predict(&a_star, &v_base);
    let max_residual = residual(&v_pred, cfg);
    Ok(StepOutcome { a_star, v_pred, infeasible: max_residual > cfg.feas_tol, max_residual, iterations, penalized })
}

/// Linearised subproblem around `x`. With `penalty` the band constraints get
/// non-negative slacks priced at `penalty·(100·s)²`.
#[allow(clippy::too_many_arguments)]
fn subproblem(
    x: &[f64],
    target: &[f64],
    v: &[f64],
    jac: &[Vec<f64>],
    lo: &[f64],
    hi: &[f64],
    penalty: Option<f64>,
    cfg: &StepConfig,
) -> Option<Vec<f64>> {
    let k = x.len();
    let m = v.len();
    let ns = if penalty.is_some() { 2 * m } else { 0 };
    let n = k + ns;
    let mut g_mat = DMatrix::zeros(n, n);
    let mut g_vec = DVector::zeros(n);
    for i in 0..k {
        g_mat[(i, i)] = 2.0;
        g_vec[i] = -2.0 * target[i];
    }
    if let Some(w) = penalty {
        for j in 0..ns {
            g_mat[(k + j, k + j)] = 2.0 * w * 1e4;
        }
    }
    let rows = 2 * k + 2 * m + ns;
    let mut c = DMatrix::zeros(rows, n);
    let mut b = DVector::zeros(rows);
    let mut r = 0;
    for i in 0..k {
        c[(r, i)] = 1.0;
        b[r] = lo[i];
        r += 1;
        c[(r, i)] = -1.0;
        b[r] = -hi[i];
        r += 1;
    }
    for j in 0..m {
        // v + J(y − x) ≥ v_min  and  −v − J(y − x) ≥ −v_max
        let offset: f64 = (0..k).map(|i| jac[j][i] * x[i]).sum();
        for i in 0..k {
            c[(r, i)] = jac[j][i];
            c[(r + 1, i)] = -jac[j][i];
        }
        b[r] = cfg.v_min - v[j] + offset;
        b[r + 1] = -cfg.v_max + v[j] - offset;
        if penalty.is_some() {
            c[(r, k + 2 * j)] = 1.0;
            c[(r + 1, k + 2 * j + 1)] = 1.0;
        }
        r += 2;
    }
    for j in 0..ns {
        c[(r, k + j)] = 1.0;
        r += 1;
    }
    match (Qp { g_mat, g_vec, c, b }).solve() {
        QpOutcome::Solved { x, .. } => Some(x.as_slice()[..k].to_vec()),
        QpOutcome::Infeasible => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::PolyModel;
    use crate::assets::Headroom;

    /// `V_m = v0_m + Σ_i s_mi·a_i/P̄` as a degree-1 polynomial surrogate.
    pub(crate) fn linear_surrogate(p: f64, sens: &[Vec<f64>]) -> SensitivitySurrogate {
        let k = sens.len();
        let models = sens
            .iter()
            .enumerate()
            .map(|(m, row)| {
                let mut coeffs = vec![0.0; 1 + 2 * k];
                coeffs[0] = 1.0;
                coeffs[1..=k].copy_from_slice(row);
                // (Ṽ − 1)·20 → Ṽ − 1
                coeffs[1 + k + m] = 0.05;
                PolyModel::from_coeffs(2 * k, 1, coeffs).unwrap()
            })
            .collect();
        SensitivitySurrogate { members: (0..k).map(|i| format!("n{i}")).collect(), p_scale: vec![p; k], models }
    }

    fn report(i: usize, v_base: f64, p: f64) -> AgentReport {
        AgentReport {
            node: format!("n{i}"),
            action_w: 0.0,
            v_est: v_base,
            v_base,
            headroom: Headroom { charge: p, discharge: p },
        }
    }

    #[test]
    fn feasible_actions_are_returned_exactly() {
        let sur = linear_surrogate(1000.0, &[vec![-0.01, -0.005], vec![-0.005, -0.01]]);
        let reps = [report(0, 1.0, 1000.0), report(1, 1.0, 1000.0)];
        let a = [123.456, -77.0];
        let out = coordinate_step(&reps, &a, &sur, &StepConfig::default()).unwrap();
        assert_eq!(out.a_star, a.to_vec());
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn charging_below_band_is_reduced() {
        let sur = linear_surrogate(1000.0, &[vec![-0.04, -0.02], vec![-0.02, -0.04]]);
        let reps = [report(0, 0.96, 1000.0), report(1, 0.97, 1000.0)];
        let out = coordinate_step(&reps, &[1000.0, 1000.0], &sur, &StepConfig::default()).unwrap();
        assert!(!out.infeasible);
        assert!(out.v_pred.iter().all(|&v| v >= 0.95 - 1e-9));
        assert!(out.a_star[0] < 1000.0);
    }

    #[test]
    fn impossible_band_is_flagged_with_least_violation() {
        let sur = linear_surrogate(1000.0, &[vec![-0.01]]);
        let reps = [report(0, 0.90, 1000.0)];
        let out = coordinate_step(&reps, &[0.0], &sur, &StepConfig::default()).unwrap();
        assert!(out.infeasible && out.penalized);
        // Full discharge lifts the voltage by 0.01; still short.
        assert!((out.a_star[0] + 1000.0).abs() < 1e-6);
        assert!((out.max_residual - 0.04).abs() < 1e-6);
    }

    #[test]
    fn actions_respect_headroom() {
        let sur = linear_surrogate(1000.0, &[vec![-0.01]]);
        let mut rep = report(0, 1.0, 1000.0);
        rep.headroom = Headroom { charge: 200.0, discharge: 0.0 };
        let out = coordinate_step(&[rep], &[900.0], &sur, &StepConfig::default()).unwrap();
        assert_eq!(out.a_star, vec![200.0]);
    }
}
