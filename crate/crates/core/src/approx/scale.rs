use serde::{Deserialize, Serialize};

/// Per-column `(x − median) / IQR`, clamped to `±clip`.
///
/// Robust to the occasional wild value coming out of a badly conditioned
/// Thevenin estimate, which would otherwise dominate a mean/std scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustScaler {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub clip: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl RobustScaler {
    pub fn fit(rows: &[Vec<f64>], clip: f64) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let mut center = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        for j in 0..dim {
            let mut col: Vec<f64> = rows.iter().map(|r| r[j]).filter(|v| v.is_finite()).collect();
            if col.is_empty() {
                continue;
            }
            col.sort_by(f64::total_cmp);
            center[j] = quantile(&col, 0.5);
            let iqr = quantile(&col, 0.75) - quantile(&col, 0.25);
            let spread = if iqr > 1e-12 {
                iqr
            } else {
                let range = col[col.len() - 1] - col[0];
                if range > 1e-12 {
                    range
                } else {
                    1.0
                }
            };
            scale[j] = spread;
        }
        Self { center, scale, clip }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| {
                let z = (v - self.center[j]) / self.scale[j];
                if z.is_nan() {
                    0.0
                } else {
                    z.clamp(-self.clip, self.clip)
                }
            })
            .collect()
    }
}

/// Scalar mean/std standardisation, used for regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn robust_scaler_ignores_outliers() {
        let mut rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
        rows.push(vec![1e9]);
        let s = RobustScaler::fit(&rows, 5.0);
        assert!((s.center[0] - 50.0).abs() < 1e-9);
        assert_eq!(s.transform(&[1e9])[0], 5.0);
        assert_eq!(s.transform(&[f64::NAN])[0], 0.0);
    }

    #[test]
    fn constant_column_keeps_unit_scale() {
        let s = RobustScaler::fit(&[vec![3.0], vec![3.0]], 5.0);
        assert_eq!(s.scale[0], 1.0);
        let st = Standardizer::fit(&[2.0, 2.0]);
        assert_eq!(st.inverse(st.forward(7.0)), 7.0);
    }
}
