//! A small attention encoder over a sequence of scalar features.
//!
//! Each input scalar `x_i` becomes a token `x_i · w_i + b_i` with its own
//! embedding vectors. Tokens pass through post-norm encoder layers
//! (multi-head self-attention, then a GELU perceptron, each followed by a
//! residual add and layer normalisation), are mean-pooled and mapped to one
//! scalar by a linear head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ApproxError, Checkpoint, Model};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub features: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
}

impl EncoderShape {
    pub fn new(features: usize) -> Self {
        Self { features, d_model: 16, heads: 2, d_ff: 32, layers: 2 }
    }
}

/// Offsets of one encoder layer's parameter blocks.
#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    g1: usize,
    be1: usize,
    w1: usize,
    c1: usize,
    w2: usize,
    c2: usize,
    g2: usize,
    be2: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TinyEncoder {
    shape: EncoderShape,
    params: Vec<f64>,
}

struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    concat: Vec<f64>,
    xhat1: Vec<f64>,
    inv_sd1: Vec<f64>,
    h1: Vec<f64>,
    f1: Vec<f64>,
    g: Vec<f64>,
    xhat2: Vec<f64>,
    inv_sd2: Vec<f64>,
}

impl TinyEncoder {
    pub fn new(shape: EncoderShape, seed: u64) -> Self {
        assert!(shape.d_model % shape.heads == 0, "d_model must divide into heads");
        let mut enc = Self { shape, params: vec![0.0; Self::count(shape)] };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = shape.d_model;
        let ff = shape.d_ff;
        let t = shape.features;
        // Embedding weights: one scalar fan-in per token.
        for p in &mut enc.params[0..t * d] {
            *p = rng.random_range(-1.0..1.0);
        }
        for l in 0..shape.layers {
            let o = enc.offsets(l);
            let bd = 1.0 / (d as f64).sqrt();
            let bf = 1.0 / (ff as f64).sqrt();
            for (start, len, bound) in [
                (o.wq, d * d, bd),
                (o.wk, d * d, bd),
                (o.wv, d * d, bd),
                (o.wo, d * d, bd),
                (o.w1, ff * d, bd),
                (o.w2, d * ff, bf),
            ] {
                for p in &mut enc.params[start..start + len] {
                    *p = rng.random_range(-bound..bound);
                }
            }
            enc.params[o.g1..o.g1 + d].iter_mut().for_each(|p| *p = 1.0);
            enc.params[o.g2..o.g2 + d].iter_mut().for_each(|p| *p = 1.0);
        }
        let head = enc.head_offset();
        let bd = 1.0 / (d as f64).sqrt();
        for p in &mut enc.params[head..head + d] {
            *p = rng.random_range(-bd..bd);
        }
        enc
    }

    pub fn shape(&self) -> EncoderShape {
        self.shape
    }

    fn layer_size(s: EncoderShape) -> usize {
        let d = s.d_model;
        4 * (d * d + d) + 2 * d + (s.d_ff * d + s.d_ff) + (d * s.d_ff + d) + 2 * d
    }

    fn count(s: EncoderShape) -> usize {
        2 * s.features * s.d_model + s.layers * Self::layer_size(s) + s.d_model + 1
    }

    fn offsets(&self, layer: usize) -> LayerOffsets {
        let d = self.shape.d_model;
        let ff = self.shape.d_ff;
        let mut o = 2 * self.shape.features * d + layer * Self::layer_size(self.shape);
        let mut take = |n: usize| {
            let here = o;
            o += n;
            here
        };
        LayerOffsets {
            wq: take(d * d),
            bq: take(d),
            wk: take(d * d),
            bk: take(d),
            wv: take(d * d),
            bv: take(d),
            wo: take(d * d),
            bo: take(d),
            g1: take(d),
            be1: take(d),
            w1: take(ff * d),
            c1: take(ff),
            w2: take(d * ff),
            c2: take(d),
            g2: take(d),
            be2: take(d),
        }
    }

    fn head_offset(&self) -> usize {
        2 * self.shape.features * self.shape.d_model + self.shape.layers * Self::layer_size(self.shape)
    }

    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let s = self.shape;
        let (d, ff, t) = (s.d_model, s.d_ff, s.features);
        let mut out = vec![
            ("embed.weight".to_string(), vec![t, d]),
            ("embed.bias".to_string(), vec![t, d]),
        ];
        for l in 0..s.layers {
            for (name, shape) in [
                ("attn.q.weight", vec![d, d]),
                ("attn.q.bias", vec![d]),
                ("attn.k.weight", vec![d, d]),
                ("attn.k.bias", vec![d]),
                ("attn.v.weight", vec![d, d]),
                ("attn.v.bias", vec![d]),
                ("attn.out.weight", vec![d, d]),
                ("attn.out.bias", vec![d]),
                ("norm1.gain", vec![d]),
                ("norm1.bias", vec![d]),
                ("mlp.fc1.weight", vec![ff, d]),
                ("mlp.fc1.bias", vec![ff]),
                ("mlp.fc2.weight", vec![d, ff]),
                ("mlp.fc2.bias", vec![d]),
                ("norm2.gain", vec![d]),
                ("norm2.bias", vec![d]),
            ] {
                out.push((format!("layer{l}.{name}"), shape));
            }
        }
        out.push(("head.weight".to_string(), vec![d]));
        out.push(("head.bias".to_string(), vec![1]));
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = serde_json::to_value(self.shape).expect("shape serialises");
        Checkpoint::new("encoder", cfg, self.manifest(), self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ApproxError> {
        ck.expect_kind("encoder")?;
        let shape: EncoderShape = serde_json::from_value(ck.config.clone())
            .map_err(|e| ApproxError::Checkpoint(e.to_string()))?;
        let expected = Self::count(shape);
        if expected != ck.params.len() {
            return Err(ApproxError::DimensionMismatch { expected, got: ck.params.len() });
        }
        Ok(Self { shape, params: ck.params.clone() })
    }

    fn run(&self, x: &[f64], mut caches: Option<&mut Vec<LayerCache>>) -> (Vec<f64>, f64) {
        let s = self.shape;
        let (t, d, ff, nh) = (s.features, s.d_model, s.d_ff, s.heads);
        let dh = d / nh;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let p = &self.params;

        let mut h = vec![0.0; t * d];
        for i in 0..t {
            for k in 0..d {
                h[i * d + k] = x[i] * p[i * d + k] + p[t * d + i * d + k];
            }
        }

        for l in 0..s.layers {
            let o = self.offsets(l);
            let q = linear(&h, t, d, d, &p[o.wq..], &p[o.bq..]);
            let kk = linear(&h, t, d, d, &p[o.wk..], &p[o.bk..]);
            let v = linear(&h, t, d, d, &p[o.wv..], &p[o.bv..]);
            let mut attn = vec![0.0; nh * t * t];
            let mut concat = vec![0.0; t * d];
            for hd in 0..nh {
                let c0 = hd * dh;
                for i in 0..t {
                    let row = &mut attn[(hd * t + i) * t..(hd * t + i + 1) * t];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..t {
                        let mut sdot = 0.0;
                        for c in 0..dh {
                            sdot += q[i * d + c0 + c] * kk[j * d + c0 + c];
                        }
                        row[j] = sdot * inv_sqrt;
                        mx = mx.max(row[j]);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    for r in row.iter_mut() {
                        *r /= z;
                    }
                    for j in 0..t {
                        let a = row[j];
                        for c in 0..dh {
                            concat[i * d + c0 + c] += a * v[j * d + c0 + c];
                        }
                    }
                }
            }
            let m = linear(&concat, t, d, d, &p[o.wo..], &p[o.bo..]);
            let r1: Vec<f64> = h.iter().zip(&m).map(|(a, b)| a + b).collect();
            let (h1, xhat1, inv_sd1) = layer_norm(&r1, t, d, &p[o.g1..], &p[o.be1..]);
            let f1 = linear(&h1, t, d, ff, &p[o.w1..], &p[o.c1..]);
            let g: Vec<f64> = f1.iter().map(|&z| gelu(z)).collect();
            let f2 = linear(&g, t, ff, d, &p[o.w2..], &p[o.c2..]);
            let r2: Vec<f64> = h1.iter().zip(&f2).map(|(a, b)| a + b).collect();
            let (out, xhat2, inv_sd2) = layer_norm(&r2, t, d, &p[o.g2..], &p[o.be2..]);
            if let Some(c) = caches.as_deref_mut() {
                c.push(LayerCache {
                    input: h,
                    q,
                    k: kk,
                    v,
                    attn,
                    concat,
                    xhat1,
                    inv_sd1,
                    h1,
                    f1,
                    g,
                    xhat2,
                    inv_sd2,
                });
            }
            h = out;
        }

        let mut pooled = vec![0.0; d];
        for i in 0..t {
            for k in 0..d {
                pooled[k] += h[i * d + k] / t as f64;
            }
        }
        let ho = self.head_offset();
        let y = pooled.iter().zip(&p[ho..ho + d]).map(|(a, b)| a * b).sum::<f64>() + p[ho + d];
        (pooled, y)
    }
}

fn linear(x: &[f64], rows: usize, n_in: usize, n_out: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        for o in 0..n_out {
            let wr = &w[o * n_in..(o + 1) * n_in];
            out[r * n_out + o] = b[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

/// Backward of `linear`: accumulates weight/bias gradients and returns the
/// gradient with respect to the input.
#[allow(clippy::too_many_arguments)]
fn linear_back(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    n_in: usize,
    n_out: usize,
    w: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * n_in];
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        for o in 0..n_out {
            let g = dy[r * n_out + o];
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let gwr = &mut gw[o * n_in..(o + 1) * n_in];
            let wr = &w[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                gwr[i] += g * xr[i];
                dx[r * n_in + i] += g * wr[i];
            }
        }
    }
    dx
}

fn layer_norm(x: &[f64], rows: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut inv_sd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_sd[r] = is;
        for k in 0..d {
            let xh = (row[k] - mean) * is;
            xhat[r * d + k] = xh;
            out[r * d + k] = g[k] * xh + b[k];
        }
    }
    (out, xhat, inv_sd)
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_back(
    dy: &[f64],
    xhat: &[f64],
    inv_sd: &[f64],
    rows: usize,
    d: usize,
    g: &[f64],
    gg: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    let mut dxh = vec![0.0; d];
    for r in 0..rows {
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for k in 0..d {
            let i = r * d + k;
            gg[k] += dy[i] * xhat[i];
            gb[k] += dy[i];
            dxh[k] = dy[i] * g[k];
            mean_d += dxh[k];
            mean_dx += dxh[k] * xhat[i];
        }
        mean_d /= d as f64;
        mean_dx /= d as f64;
        for k in 0..d {
            let i = r * d + k;
            dx[i] = inv_sd[r] * (dxh[k] - mean_d - xhat[i] * mean_dx);
        }
    }
    dx
}

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
}

fn gelu_slope(z: f64) -> f64 {
    let th = (GELU_C * (z + 0.044715 * z * z * z)).tanh();
    0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
}

impl Model for TinyEncoder {
    fn input_dim(&self) -> usize {
        self.shape.features
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.shape.features);
        self.run(x, None).1
    }

    fn value_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let s = self.shape;
        let (t, d, ff, nh) = (s.features, s.d_model, s.d_ff, s.heads);
        let dh = d / nh;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut caches = Vec::with_capacity(s.layers);
        let (pooled, y) = self.run(x, Some(&mut caches));
        let p = &self.params;

        let ho = self.head_offset();
        grad[ho..ho + d].copy_from_slice(&pooled);
        grad[ho + d] = 1.0;
        let mut dh_tok = vec![0.0; t * d];
        for i in 0..t {
            for k in 0..d {
                dh_tok[i * d + k] = p[ho + k] / t as f64;
            }
        }

        for l in (0..s.layers).rev() {
            let o = self.offsets(l);
            let c = &caches[l];
            let (gg2, gb2) = split_pair(grad, o.g2, o.be2, d);
            let dr2 = layer_norm_back(&dh_tok, &c.xhat2, &c.inv_sd2, t, d, &p[o.g2..], gg2, gb2);
            // Residual: r2 = h1 + fc2(gelu(fc1(h1))).
            let (gw2, gc2) = split_pair(grad, o.w2, o.c2, d * ff);
            let dg = linear_back(&c.g, &dr2, t, ff, d, &p[o.w2..], gw2, gc2);
            let df1: Vec<f64> = dg.iter().zip(&c.f1).map(|(g, &z)| g * gelu_slope(z)).collect();
            let (gw1, gc1) = split_pair(grad, o.w1, o.c1, ff * d);
            let mut dh1 = linear_back(&c.h1, &df1, t, d, ff, &p[o.w1..], gw1, gc1);
            for (a, b) in dh1.iter_mut().zip(&dr2) {
                *a += b;
            }
            let (gg1, gb1) = split_pair(grad, o.g1, o.be1, d);
            let dr1 = layer_norm_back(&dh1, &c.xhat1, &c.inv_sd1, t, d, &p[o.g1..], gg1, gb1);
            // Residual: r1 = x + out(attention(x)).
            let (gwo, gbo) = split_pair(grad, o.wo, o.bo, d * d);
            let dconcat = linear_back(&c.concat, &dr1, t, d, d, &p[o.wo..], gwo, gbo);
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut da = vec![0.0; t];
            for hd in 0..nh {
                let c0 = hd * dh;
                for i in 0..t {
                    let row = &c.attn[(hd * t + i) * t..(hd * t + i + 1) * t];
                    let mut dot = 0.0;
                    for j in 0..t {
                        let mut s_ = 0.0;
                        for cc in 0..dh {
                            let go = dconcat[i * d + c0 + cc];
                            s_ += go * c.v[j * d + c0 + cc];
                            dv[j * d + c0 + cc] += row[j] * go;
                        }
                        da[j] = s_;
                        dot += row[j] * s_;
                    }
                    for j in 0..t {
                        let ds = row[j] * (da[j] - dot) * inv_sqrt;
                        if ds == 0.0 {
                            continue;
                        }
                        for cc in 0..dh {
                            dq[i * d + c0 + cc] += ds * c.k[j * d + c0 + cc];
                            dk[j * d + c0 + cc] += ds * c.q[i * d + c0 + cc];
                        }
                    }
                }
            }
            let mut dx = dr1;
            for (w, b, dy) in [(o.wq, o.bq, &dq), (o.wk, o.bk, &dk), (o.wv, o.bv, &dv)] {
                let (gw, gb) = split_pair(grad, w, b, d * d);
                let dxi = linear_back(&c.input, dy, t, d, d, &p[w..], gw, gb);
                for (a, b) in dx.iter_mut().zip(&dxi) {
                    *a += b;
                }
            }
            dh_tok = dx;
        }

        for i in 0..t {
            for k in 0..d {
                grad[i * d + k] = dh_tok[i * d + k] * x[i];
                grad[t * d + i * d + k] = dh_tok[i * d + k];
            }
        }
        y
    }
}

/// Two disjoint mutable windows into `grad`: `[a, a + len_a)` and
/// `[b, b + rest)` where `b` follows `a`.
fn split_pair(grad: &mut [f64], a: usize, b: usize, len_a: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + len_a <= b);
    let (left, right) = grad.split_at_mut(b);
    (&mut left[a..a + len_a], right)
}
