use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ApproxError, Checkpoint, Model};

pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Polynomial over all monomials of total degree ≤ `degree`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyModel {
    dim: usize,
    degree: usize,
    exponents: Vec<Vec<u32>>,
    coeffs: Vec<f64>,
}

/// Exponent vectors of every monomial in `dim` variables with total degree
/// at most `degree`, constant term first, then by increasing degree.
pub fn monomial_exponents(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; dim]];
    for total in 1..=degree {
        let mut cur = vec![0u32; dim];
        push_degree(&mut out, &mut cur, 0, total as u32);
    }
    out
}

fn push_degree(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u32) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    if cur.is_empty() {
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        push_degree(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

impl PolyModel {
    pub fn zeros(dim: usize, degree: usize) -> Self {
        let exponents = monomial_exponents(dim, degree);
        let coeffs = vec![0.0; exponents.len()];
        Self { dim, degree, exponents, coeffs }
    }

    pub fn from_coeffs(dim: usize, degree: usize, coeffs: Vec<f64>) -> Result<Self, ApproxError> {
        let mut m = Self::zeros(dim, degree);
        if coeffs.len() != m.coeffs.len() {
            return Err(ApproxError::DimensionMismatch { expected: m.coeffs.len(), got: coeffs.len() });
        }
        m.coeffs = coeffs;
        Ok(m)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    /// Monomial values at `x`.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let powers = self.power_table(x);
        self.exponents
            .iter()
            .map(|e| e.iter().enumerate().map(|(i, &k)| powers[i][k as usize]).product())
            .collect()
    }

    fn power_table(&self, x: &[f64]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|&xi| {
                let mut row = Vec::with_capacity(self.degree + 1);
                let mut acc = 1.0;
                for _ in 0..=self.degree {
                    row.push(acc);
                    acc *= xi;
                }
                row
            })
            .collect()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.features(x).iter().zip(&self.coeffs).map(|(a, b)| a * b).sum()
    }

    /// Gradient of the polynomial with respect to its inputs.
    pub fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        let powers = self.power_table(x);
        let mut g = vec![0.0; self.dim];
        for (e, &c) in self.exponents.iter().zip(&self.coeffs) {
            if c == 0.0 {
                continue;
            }
            for (j, gj) in g.iter_mut().enumerate() {
                if e[j] == 0 {
                    continue;
                }
                let mut term = c * e[j] as f64;
                for (i, &k) in e.iter().enumerate() {
                    let k = if i == j { k - 1 } else { k };
                    term *= powers[i][k as usize];
                }
                *gj += term;
            }
        }
        g
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = serde_json::json!({ "dim": self.dim, "degree": self.degree });
        Checkpoint::new("poly", cfg, vec![("coeffs".into(), vec![self.coeffs.len()])], self.coeffs.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ApproxError> {
        ck.expect_kind("poly")?;
        let get = |k: &str| {
            ck.config[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| ApproxError::Checkpoint(format!("missing `{k}`")))
        };
        Self::from_coeffs(get("dim")?, get("degree")?, ck.params.clone())
    }
}

impl Model for PolyModel {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &[f64] {
        &self.coeffs
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    fn forward(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }

    fn value_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let f = self.features(x);
        grad.copy_from_slice(&f);
        f.iter().zip(&self.coeffs).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub model: PolyModel,
    /// Root-mean-square training residual.
    pub rms_residual: f64,
    /// Numerical rank of the (unregularised) design matrix.
    pub rank: usize,
}

/// Least squares over the monomial basis. When the design matrix is
/// rank-deficient (too few or collinear points) the fit falls back to ridge
/// with [`DEFAULT_RIDGE`].
pub fn fit_poly(xs: &[Vec<f64>], ys: &[f64], degree: usize) -> Result<PolyFit, ApproxError> {
    let fit = fit_poly_with(xs, ys, degree, 0.0)?;
    if fit.rank < fit.model.coeffs.len() {
        fit_poly_with(xs, ys, degree, DEFAULT_RIDGE)
    } else {
        Ok(fit)
    }
}

/// Ridge least squares: minimises `‖Φc − y‖² + λ‖c‖²` over the monomial
/// coefficients, solved through an SVD of the augmented design `[Φ; √λ I]`.
/// With `λ = 0` this is the minimum-norm least-squares solution.
pub fn fit_poly_with(
    xs: &[Vec<f64>],
    ys: &[f64],
    degree: usize,
    ridge: f64,
) -> Result<PolyFit, ApproxError> {
    if xs.is_empty() {
        return Err(ApproxError::EmptyDataset);
    }
    if xs.len() != ys.len() {
        return Err(ApproxError::DimensionMismatch { expected: xs.len(), got: ys.len() });
    }
    let dim = xs[0].len();
    if let Some(bad) = xs.iter().find(|x| x.len() != dim) {
        return Err(ApproxError::DimensionMismatch { expected: dim, got: bad.len() });
    }
    let mut model = PolyModel::zeros(dim, degree);
    let n = xs.len();
    let m = model.coeffs.len();
    let sq = ridge.max(0.0).sqrt();
    let mut a = DMatrix::<f64>::zeros(n + m, m);
    let mut b = DVector::<f64>::zeros(n + m);
    for (r, (x, &y)) in xs.iter().zip(ys).enumerate() {
        for (c, f) in model.features(x).into_iter().enumerate() {
            a[(r, c)] = f;
        }
        b[r] = y;
    }
    for c in 0..m {
        a[(n + c, c)] = sq;
    }
    let design = a.rows(0, n).into_owned().svd(false, false);
    let smax = design.singular_values.max();
    let design_rank = design.singular_values.iter().filter(|&&s| s > 1e-10 * smax.max(1e-300)).count();
    let svd = a.svd(true, true);
    let coeffs = svd
        .solve(&b, 1e-13 * smax.max(sq))
        .map_err(|e| ApproxError::Checkpoint(format!("least squares failed: {e}")))?;
    model.coeffs = coeffs.iter().copied().collect();
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| {
            let e = model.eval(x) - y;
            e * e
        })
        .sum();
    Ok(PolyFit { model, rms_residual: (rss / n as f64).sqrt(), rank: design_rank })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_sizes() {
        assert_eq!(monomial_exponents(1, 3).len(), 4);
        assert_eq!(monomial_exponents(2, 2).len(), 6);
        assert_eq!(monomial_exponents(4, 4).len(), 70);
        assert_eq!(monomial_exponents(3, 0), vec![vec![0, 0, 0]]);
    }

    #[test]
    fn constant_term_at_origin() {
        let m = PolyModel::from_coeffs(2, 2, vec![4.0, 1.0, 2.0, 3.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.eval(&[0.0, 0.0]), 4.0);
    }

    #[test]
    fn recovers_shifted_square() {
        let xs: Vec<Vec<f64>> = (0..21).map(|i| vec![-1.0 + 0.1 * i as f64]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x[0] * x[0] + 3.0).collect();
        let fit = fit_poly(&xs, &ys, 2).unwrap();
        let c = fit.model.coeffs();
        assert!((c[0] - 3.0).abs() < 1e-9 && c[1].abs() < 1e-9 && (c[2] - 1.0).abs() < 1e-9, "{c:?}");
    }

    #[test]
    fn rank_deficient_design_is_finite() {
        let xs = vec![vec![1.0, 1.0]; 5];
        let ys = vec![2.0; 5];
        let fit = fit_poly(&xs, &ys, 2).unwrap();
        assert!(fit.model.coeffs().iter().all(|c| c.is_finite()));
        assert_eq!(fit.rank, 1);
        assert!(fit.rms_residual < 1e-6);
    }

    #[test]
    fn input_gradient_matches_differences() {
        let m = PolyModel::from_coeffs(2, 3, (0..10).map(|i| 0.3 * i as f64 - 1.0).collect()).unwrap();
        let x = [0.4, -0.7];
        let g = m.input_gradient(&x);
        for j in 0..2 {
            let mut up = x;
            let mut dn = x;
            up[j] += 1e-6;
            dn[j] -= 1e-6;
            let num = (m.eval(&up) - m.eval(&dn)) / 2e-6;
            assert!((num - g[j]).abs() < 1e-6);
        }
    }
}
