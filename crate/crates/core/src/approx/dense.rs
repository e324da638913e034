use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ApproxError, Checkpoint, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a` and input `z`.
    fn slope(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected network with a linear scalar output.
///
/// Parameters are stored layer by layer as a row-major `out × in` weight
/// block followed by the bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

impl DenseNet {
    /// `sizes` runs from the input width to the output width, which must be 1.
    /// Weights are drawn from `U(−1/√fan_in, 1/√fan_in)`, biases start at zero.
    pub fn new(sizes: &[usize], activation: Activation, seed: u64) -> Self {
        assert!(sizes.len() >= 2 && *sizes.last().unwrap() == 1, "scalar output required");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] {
                params.push(rng.random_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Self { sizes: sizes.to_vec(), activation, params }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        let mut net = Self::new(sizes, activation, 0);
        net.params.iter_mut().for_each(|p| *p = 0.0);
        net
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Scales the final layer so initial outputs start near zero.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let n_in = self.sizes[self.sizes.len() - 2];
        let start = self.params.len() - n_in - 1;
        for p in &mut self.params[start..start + n_in] {
            *p *= factor;
        }
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = 0;
        self.sizes.windows(2).map(move |w| {
            let here = off;
            off += w[0] * w[1] + w[1];
            (here, w[0], w[1])
        })
    }

    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (l, (_, n_in, n_out)) in self.layers().enumerate() {
            out.push((format!("layer{l}.weight"), vec![n_out, n_in]));
            out.push((format!("layer{l}.bias"), vec![n_out]));
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = serde_json::json!({ "sizes": self.sizes, "activation": self.activation });
        Checkpoint::new("dense", cfg, self.manifest(), self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ApproxError> {
        ck.expect_kind("dense")?;
        let sizes: Vec<usize> = serde_json::from_value(ck.config["sizes"].clone())
            .map_err(|e| ApproxError::Checkpoint(e.to_string()))?;
        let activation: Activation = serde_json::from_value(ck.config["activation"].clone())
            .map_err(|e| ApproxError::Checkpoint(e.to_string()))?;
        let mut net = Self::zeros(&sizes, activation);
        if net.params.len() != ck.params.len() {
            return Err(ApproxError::DimensionMismatch {
                expected: net.params.len(),
                got: ck.params.len(),
            });
        }
        net.params.copy_from_slice(&ck.params);
        Ok(net)
    }

    /// Pre-activations and activations of every layer.
    fn run(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n_layers = self.sizes.len() - 1;
        let mut zs = Vec::with_capacity(n_layers);
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        for (l, (off, n_in, n_out)) in self.layers().enumerate() {
            let input = &acts[l];
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut z = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *zo += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            }
            let a = if l + 1 == n_layers {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            zs.push(z);
            acts.push(a);
        }
        (zs, acts)
    }
}

impl Model for DenseNet {
    fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.sizes[0]);
        self.run(x).1.last().unwrap()[0]
    }

    fn value_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (zs, acts) = self.run(x);
        let layers: Vec<_> = self.layers().collect();
        let n_layers = layers.len();
        let mut delta = vec![1.0];
        for l in (0..n_layers).rev() {
            let (off, n_in, n_out) = layers[l];
            let input = &acts[l];
            for o in 0..n_out {
                let g = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (gi, xi) in g.iter_mut().zip(input) {
                    *gi = delta[o] * xi;
                }
                grad[off + n_in * n_out + o] = delta[o];
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                for (p, wi) in prev.iter_mut().zip(row) {
                    *p += delta[o] * wi;
                }
            }
            for (i, p) in prev.iter_mut().enumerate() {
                *p *= self.activation.slope(zs[l - 1][i], acts[l][i]);
            }
            delta = prev;
        }
        acts[n_layers][0]
    }
}
