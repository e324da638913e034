use serde::{Deserialize, Serialize};

use super::CoordinationError;
use crate::approx::{fit_poly, PolyModel};

/// One logged step of a neighbourhood: actions, zero-action local
/// estimates and the voltages that were then measured, member by member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSample {
    pub actions_w: Vec<f64>,
    pub v_base: Vec<f64>,
    pub v_true: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub degree: usize,
    pub train_fraction: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { degree: 4, train_fraction: 0.8 }
    }
}

/// Polynomial map from the neighbourhood's actions and voltage estimates to
/// each member's voltage. Inputs are normalised as `a / P̄` and
/// `(Ṽ − 1)·20`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySurrogate {
    pub members: Vec<String>,
    /// Rated power per member, watts.
    pub p_scale: Vec<f64>,
    pub models: Vec<PolyModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateFitReport {
    pub train_rows: usize,
    pub validation_rows: usize,
    pub train_rmse: f64,
    pub validation_rmse: f64,
    /// Design rank per member model.
    pub ranks: Vec<usize>,
}

impl SurrogateFitReport {
    /// Held-out error more than ten times the training error.
    pub fn overfit(&self) -> bool {
        self.validation_rmse > 10.0 * self.train_rmse.max(1e-12)
    }
}

impl SensitivitySurrogate {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Normalised input vector for actions (watts) and base estimates.
    pub fn inputs(&self, actions_w: &[f64], v_base: &[f64]) -> Vec<f64> {
        let k = self.len();
        let mut x = Vec::with_capacity(2 * k);
        x.extend((0..k).map(|i| actions_w[i] / self.p_scale[i]));
        x.extend(v_base.iter().take(k).map(|v| (v - 1.0) * 20.0));
        x
    }

    pub fn predict(&self, actions_w: &[f64], v_base: &[f64]) -> Vec<f64> {
        let x = self.inputs(actions_w, v_base);
        self.models.iter().map(|m| m.eval(&x)).collect()
    }

    /// Prediction and its Jacobian with respect to the normalised actions
    /// `a / P̄` (one row per member voltage).
    pub fn linearize(&self, actions_norm: &[f64], v_base: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let k = self.len();
        let mut x = actions_norm.to_vec();
        x.extend(v_base.iter().take(k).map(|v| (v - 1.0) * 20.0));
        let mut values = Vec::with_capacity(k);
        let mut jac = Vec::with_capacity(k);
        for m in &self.models {
            values.push(m.eval(&x));
            jac.push(m.input_gradient(&x)[..k].to_vec());
        }
        (values, jac)
    }
}

/// Least-squares fit of one polynomial per member on the leading
/// `train_fraction` of the samples; the rest is held out.
pub fn fit_sensitivity(
    members: Vec<String>,
    p_scale: Vec<f64>,
    samples: &[SurrogateSample],
    cfg: &SurrogateConfig,
) -> Result<(SensitivitySurrogate, SurrogateFitReport), CoordinationError> {
    let k = members.len();
    if k == 0 || p_scale.len() != k {
        return Err(CoordinationError::Config("surrogate needs one rated power per member".into()));
    }
    if p_scale.iter().any(|p| !(*p > 0.0)) {
        return Err(CoordinationError::Config("rated powers must be positive".into()));
    }
    if samples.iter().any(|s| s.actions_w.len() != k || s.v_base.len() != k || s.v_true.len() != k) {
        return Err(CoordinationError::Config("sample width does not match the neighbourhood".into()));
    }
    let n_train = ((samples.len() as f64) * cfg.train_fraction).round() as usize;
    let n_train = n_train.clamp(1.min(samples.len()), samples.len());
    if n_train == 0 {
        return Err(CoordinationError::Fit("no samples".into()));
    }
    let mut shell = SensitivitySurrogate { members, p_scale, models: Vec::new() };
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| shell.inputs(&s.actions_w, &s.v_base)).collect();
    let mut ranks = Vec::with_capacity(k);
    for m in 0..k {
        let ys: Vec<f64> = samples[..n_train].iter().map(|s| s.v_true[m]).collect();
        let fit = fit_poly(&xs[..n_train], &ys, cfg.degree).map_err(|e| CoordinationError::Fit(e.to_string()))?;
        ranks.push(fit.rank);
        shell.models.push(fit.model);
    }
    let rmse = |range: std::ops::Range<usize>| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in range {
            for (m, model) in shell.models.iter().enumerate() {
                let e = model.eval(&xs[i]) - samples[i].v_true[m];
                sum += e * e;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            (sum / count as f64).sqrt()
        }
    };
    let report = SurrogateFitReport {
        train_rows: n_train,
        validation_rows: samples.len() - n_train,
        train_rmse: rmse(0..n_train),
        validation_rmse: rmse(n_train..samples.len()),
        ranks,
    };
    Ok((shell, report))
}
