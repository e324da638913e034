use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approx::{Activation, ApproxError, Checkpoint, DenseNet, Model};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

/// Gaussian policy over a pre-squash variable `u`; the action is
/// `lo + (tanh(u) + 1)/2 · (hi − lo)`, so every sample is inside the bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mean: DenseNet,
    pub log_std: f64,
    pub lo: f64,
    pub hi: f64,
}

impl GaussianPolicy {
    pub fn new(state_dim: usize, hidden: &[usize], bounds: (f64, f64), seed: u64) -> Self {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut mean = DenseNet::new(&sizes, Activation::Tanh, seed);
        mean.scale_output_layer(0.01);
        Self { mean, log_std: -0.5, lo: bounds.0, hi: bounds.1 }
    }

    pub fn squash(&self, u: f64) -> f64 {
        self.lo + 0.5 * (u.tanh() + 1.0) * (self.hi - self.lo)
    }

    pub fn mean_u(&self, state: &[f64]) -> f64 {
        self.mean.forward(state)
    }

    /// Action at the distribution mean.
    pub fn act_deterministic(&self, state: &[f64]) -> f64 {
        self.squash(self.mean_u(state))
    }

    /// Samples `(action, u, log p(u))`.
    pub fn sample<R: Rng>(&self, state: &[f64], rng: &mut R) -> (f64, f64, f64) {
        let mu = self.mean_u(state);
        let eps: f64 = rng.sample(StandardNormal);
        let u = mu + self.log_std.exp() * eps;
        (self.squash(u), u, self.log_prob_at(mu, u))
    }

    pub fn log_prob_at(&self, mu: f64, u: f64) -> f64 {
        let z = (u - mu) / self.log_std.exp();
        -0.5 * z * z - self.log_std - 0.5 * LOG_2PI
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "mean": self.mean.to_checkpoint(),
            "log_std": self.log_std,
            "bounds": [self.lo, self.hi],
        })
        .to_string()
    }

    pub fn from_json(text: &str) -> Result<Self, ApproxError> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ApproxError::Checkpoint(e.to_string()))?;
        let mean = DenseNet::from_checkpoint(&Checkpoint::from_value(v["mean"].clone())?)?;
        let num = |x: &serde_json::Value| {
            x.as_f64().ok_or_else(|| ApproxError::Checkpoint("expected a number".into()))
        };
        Ok(Self { mean, log_std: num(&v["log_std"])?, lo: num(&v["bounds"][0])?, hi: num(&v["bounds"][1])? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    pub net: DenseNet,
}

impl ValueNet {
    pub fn new(state_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self { net: DenseNet::new(&sizes, Activation::Tanh, seed) }
    }

    pub fn value(&self, state: &[f64]) -> f64 {
        self.net.forward(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_stay_in_bounds() {
        let mut pol = GaussianPolicy::new(3, &[8], (-60000.0, 60000.0), 1);
        pol.log_std = 3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let (a, u, lp) = pol.sample(&[0.1, 0.2, 0.3], &mut rng);
            assert!((-60000.0..=60000.0).contains(&a));
            assert!(lp.is_finite() && u.is_finite());
        }
    }

    #[test]
    fn log_prob_is_gaussian() {
        let pol = GaussianPolicy { log_std: 0.0, ..GaussianPolicy::new(1, &[2], (0.0, 1.0), 0) };
        assert!((pol.log_prob_at(0.0, 0.0) + 0.5 * LOG_2PI).abs() < 1e-15);
        assert!((pol.log_prob_at(1.0, 3.0) - (-2.0 - 0.5 * LOG_2PI)).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip() {
        let pol = GaussianPolicy::new(4, &[5, 5], (-1.0, 2.0), 3);
        assert_eq!(GaussianPolicy::from_json(&pol.to_json()).unwrap(), pol);
    }
}
