//! Scalar-output function approximators with hand-written gradients, a
//! small Adam trainer and least-squares polynomial fits.

mod dense;
mod encoder;
mod poly;
mod scale;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dense::{Activation, DenseNet};
pub use encoder::{EncoderShape, TinyEncoder};
pub use poly::{fit_poly, fit_poly_with, monomial_exponents, PolyFit, PolyModel, DEFAULT_RIDGE};
pub use scale::{RobustScaler, Standardizer};

#[derive(Debug, Error, PartialEq)]
pub enum ApproxError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// A differentiable map from a fixed-length input vector to one scalar,
/// parameterised by a flat parameter vector.
pub trait Model {
    fn input_dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn forward(&self, x: &[f64]) -> f64;
    /// Writes `∂f/∂θ` into `grad` (overwriting it) and returns `f(x)`.
    fn value_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn n_params(&self) -> usize {
        self.params().len()
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }

    pub fn reset_moments(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, epochs: 200, batch_size: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-dataset MSE before training.
    pub initial_loss: f64,
    /// Best full-dataset MSE after each epoch (non-increasing).
    pub losses: Vec<f64>,
    /// Epochs whose step was rejected and rolled back.
    pub backtracks: usize,
    pub final_lr: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(self.initial_loss)
    }

    /// Loss curve as `epoch,loss` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        out.push_str(&format!("0,{}\n", self.initial_loss));
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, l));
        }
        out
    }
}

pub fn mse<M: Model + ?Sized>(model: &M, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let e = model.forward(x) - y;
        acc += e * e;
    }
    acc / xs.len().max(1) as f64
}

/// Minibatch Adam on mean squared error.
///
/// After every epoch the full-data loss is compared with the best seen so
/// far; a worse epoch is rolled back to the best parameters and the
/// learning rate halved, so the reported curve never increases.
pub fn train_regressor<M: Model + ?Sized>(
    model: &mut M,
    xs: &[Vec<f64>],
    ys: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainReport, ApproxError> {
    if xs.is_empty() {
        return Err(ApproxError::EmptyDataset);
    }
    if xs.len() != ys.len() {
        return Err(ApproxError::DimensionMismatch { expected: xs.len(), got: ys.len() });
    }
    let dim = model.input_dim();
    if let Some(bad) = xs.iter().find(|x| x.len() != dim) {
        return Err(ApproxError::DimensionMismatch { expected: dim, got: bad.len() });
    }

    let n = model.n_params();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(n, cfg.lr);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut grad = vec![0.0; n];
    let mut acc = vec![0.0; n];
    let batch = cfg.batch_size.max(1);

    let initial = mse(model, xs, ys);
    if !initial.is_finite() {
        return Err(ApproxError::NonFinite { epoch: 0 });
    }
    let mut best = initial;
    let mut best_params = model.params().to_vec();
    let mut report = TrainReport { initial_loss: initial, ..Default::default() };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let scale = 2.0 / chunk.len() as f64;
            for &i in chunk {
                let f = model.value_and_grad(&xs[i], &mut grad);
                let d = scale * (f - ys[i]);
                for (a, g) in acc.iter_mut().zip(&grad) {
                    *a += d * g;
                }
            }
            adam.step(model.params_mut(), &acc);
        }
        let loss = mse(model, xs, ys);
        if loss.is_finite() && loss <= best {
            best = loss;
            best_params.copy_from_slice(model.params());
        } else {
            model.params_mut().copy_from_slice(&best_params);
            adam.lr *= 0.5;
            adam.reset_moments();
            report.backtracks += 1;
            if !loss.is_finite() && adam.lr < 1e-12 {
                return Err(ApproxError::NonFinite { epoch });
            }
        }
        report.losses.push(best);
    }
    report.final_lr = adam.lr;
    Ok(report)
}

/// Largest relative deviation between the analytic parameter gradient and a
/// central finite difference with step `eps`.
///
/// Relative deviation is `|a − n| / max(|a|, |n|, 1e-6)`, so entries where
/// both gradients are tiny are compared absolutely.
pub fn grad_check<M: Model + Clone>(model: &M, x: &[f64], eps: f64) -> f64 {
    let mut analytic = vec![0.0; model.n_params()];
    model.value_and_grad(x, &mut analytic);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..model.n_params() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + eps;
        let up = probe.forward(x);
        probe.params_mut()[i] = orig - eps;
        let down = probe.forward(x);
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

pub const CHECKPOINT_FORMAT: &str = "voltreg-model";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned parameter dump. `manifest` lists named parameter blocks with
/// their shapes; `params` is the flat vector in the same order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub manifest: Vec<(String, Vec<usize>)>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(
        kind: &str,
        config: serde_json::Value,
        manifest: Vec<(String, Vec<usize>)>,
        params: Vec<f64>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            config,
            manifest,
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, ApproxError> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ApproxError::Checkpoint(e.to_string()))?;
        Self::from_value(v)
    }

    pub fn from_value(v: serde_json::Value) -> Result<Self, ApproxError> {
        let ck: Checkpoint =
            serde_json::from_value(v).map_err(|e| ApproxError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(ApproxError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let total: usize = ck.manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if total != ck.params.len() {
            return Err(ApproxError::DimensionMismatch { expected: total, got: ck.params.len() });
        }
        Ok(ck)
    }

    pub(crate) fn expect_kind(&self, kind: &str) -> Result<(), ApproxError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(ApproxError::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }

    #[test]
    fn rejects_mismatched_dataset() {
        let mut net = DenseNet::new(&[2, 1], Activation::Tanh, 0);
        let err = train_regressor(&mut net, &[vec![1.0]], &[1.0], &TrainConfig::default());
        assert_eq!(err.unwrap_err(), ApproxError::DimensionMismatch { expected: 2, got: 1 });
        let err = train_regressor(&mut net, &[], &[], &TrainConfig::default());
        assert_eq!(err.unwrap_err(), ApproxError::EmptyDataset);
    }

    #[test]
    fn checkpoint_rejects_wrong_format() {
        let ck = Checkpoint::new("dense", serde_json::Value::Null, vec![("w".into(), vec![2])], vec![1.0, 2.0]);
        let text = ck.to_json().replace("voltreg-model", "other");
        assert!(Checkpoint::from_json(&text).is_err());
        let short = Checkpoint { params: vec![1.0], ..ck.clone() };
        assert!(Checkpoint::from_json(&short.to_json()).is_err());
        assert_eq!(Checkpoint::from_json(&ck.to_json()).unwrap(), ck);
    }
}
