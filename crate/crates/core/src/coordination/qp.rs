//! Dense strictly convex QP by the dual active-set method of Goldfarb and
//! Idnani: `min ½xᵀGx + gᵀx` subject to `Cx ≥ b`.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub enum QpOutcome {
    Solved { x: DVector<f64>, active: Vec<usize> },
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Qp {
    pub g_mat: DMatrix<f64>,
    pub g_vec: DVector<f64>,
    /// One constraint per row.
    pub c: DMatrix<f64>,
    pub b: DVector<f64>,
}

const FEAS_TOL: f64 = 1e-12;

impl Qp {
    /// Panics if `g_mat` is not positive definite.
    pub fn solve(&self) -> QpOutcome {
        let n = self.g_vec.len();
        let m = self.b.len();
        let chol = self.g_mat.clone().cholesky().expect("QP Hessian must be positive definite");
        let l = chol.l();
        let l_inv = l.clone().try_inverse().expect("Cholesky factor is invertible");
        let l_inv_t = l_inv.transpose();
        let mut x = -chol.solve(&self.g_vec);
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        let row_norm: Vec<f64> = (0..m).map(|i| self.c.row(i).norm().max(1.0)).collect();
        let slack = |x: &DVector<f64>, i: usize| self.c.row(i).dot(&x.transpose()) - self.b[i];

        let max_iter = 50 * (m + n) + 100;
        let mut iter = 0;
        loop {
            // Most violated constraint, scaled by row norm.
            let mut p = None;
            let mut worst = -FEAS_TOL;
            for i in 0..m {
                if active.contains(&i) {
                    continue;
                }
                let s = slack(&x, i) / row_norm[i];
                if s < worst {
                    worst = s;
                    p = Some(i);
                }
            }
            let Some(p) = p else {
                return QpOutcome::Solved { x, active };
            };
            let np = self.c.row(p).transpose();
            let mut u_p = 0.0;
            loop {
                iter += 1;
                if iter > max_iter {
                    return QpOutcome::Infeasible;
                }
                let q = active.len();
                let (j1, j2, r) = factor(&self.c, &active, &l_inv, &l_inv_t, n);
                let d1 = j1.transpose() * &np;
                let d2 = j2.transpose() * &np;
                let z = &j2 * &d2;
                let rdir = if q > 0 {
                    r.solve_upper_triangular(&d1).unwrap_or_else(|| DVector::zeros(q))
                } else {
                    DVector::zeros(0)
                };
                let mut t1 = f64::INFINITY;
                let mut drop = None;
                for j in 0..q {
                    if rdir[j] > 1e-14 {
                        let ratio = u[j] / rdir[j];
                        if ratio < t1 {
                            t1 = ratio;
                            drop = Some(j);
                        }
                    }
                }
                let zn = z.dot(&np);
                let t2 = if z.norm() > 1e-13 * np.norm() && zn > 0.0 { -slack(&x, p) / zn } else { f64::INFINITY };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return QpOutcome::Infeasible;
                }
                for j in 0..q {
                    u[j] -= t * rdir[j];
                }
                u_p += t;
                if t2.is_finite() {
                    x += &z * t;
                }
                if t2 <= t1 {
                    active.push(p);
                    u.push(u_p);
                    break;
                }
                let j = drop.expect("partial step has a blocking constraint");
                active.remove(j);
                u.remove(j);
            }
        }
    }
}

/// `J = L⁻ᵀQ` split into active/free columns, and `R` from the QR
/// factorisation of `L⁻¹N` with `N` the active constraint normals.
fn factor(
    c: &DMatrix<f64>,
    active: &[usize],
    l_inv: &DMatrix<f64>,
    l_inv_t: &DMatrix<f64>,
    n: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let q = active.len();
    if q == 0 {
        return (DMatrix::zeros(n, 0), l_inv_t.clone(), DMatrix::zeros(0, 0));
    }
    let mut nmat = DMatrix::zeros(n, q);
    for (k, &i) in active.iter().enumerate() {
        nmat.set_column(k, &c.row(i).transpose());
    }
    let b = l_inv * nmat;
    // Full Q via QR of [B | I] keeps the trailing columns orthonormal.
    let mut aug = DMatrix::zeros(n, q + n);
    aug.view_mut((0, 0), (n, q)).copy_from(&b);
    aug.view_mut((0, q), (n, n)).copy_from(&DMatrix::identity(n, n));
    let qr = aug.qr();
    let qfull = qr.q();
    let r = qr.r().view((0, 0), (q, q)).into_owned();
    let j = l_inv_t * qfull;
    let j1 = j.columns(0, q).into_owned();
    let j2 = j.columns(q, n - q).into_owned();
    (j1, j2, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn projection(target: &[f64], c: Vec<Vec<f64>>, b: Vec<f64>) -> Qp {
        let n = target.len();
        let rows = c.len();
        Qp {
            g_mat: DMatrix::identity(n, n) * 2.0,
            g_vec: DVector::from_iterator(n, target.iter().map(|t| -2.0 * t)),
            c: DMatrix::from_row_iterator(rows, n, c.into_iter().flatten()),
            b: DVector::from_vec(b),
        }
    }

    #[test]
    fn unconstrained_minimum_when_feasible() {
        let qp = projection(&[0.3, -0.2], vec![vec![1.0, 0.0]], vec![-1.0]);
        match qp.solve() {
            QpOutcome::Solved { x, active } => {
                assert!((x[0] - 0.3).abs() < 1e-15 && (x[1] + 0.2).abs() < 1e-15);
                assert!(active.is_empty());
            }
            _ => panic!(),
        }
    }

    #[test]
    fn half_plane_projection() {
        // x + y >= 2 from the origin lands on (1, 1).
        let qp = projection(&[0.0, 0.0], vec![vec![1.0, 1.0]], vec![2.0]);
        let QpOutcome::Solved { x, .. } = qp.solve() else { panic!() };
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_corner() {
        // x <= -1, y <= -2 from (0, 0).
        let qp = projection(&[0.0, 0.0], vec![vec![-1.0, 0.0], vec![0.0, -1.0]], vec![1.0, 2.0]);
        let QpOutcome::Solved { x, active } = qp.solve() else { panic!() };
        assert!((x[0] + 1.0).abs() < 1e-12 && (x[1] + 2.0).abs() < 1e-12);
        assert_eq!(active.len(), 2);
    }

    #[test]
    fn contradictory_constraints_are_infeasible() {
        let qp = projection(&[0.0], vec![vec![1.0], vec![-1.0]], vec![1.0, 0.0]);
        assert_eq!(qp.solve(), QpOutcome::Infeasible);
    }

    fn brute_force(target: &[f64; 2], c: &[[f64; 2]], b: &[f64]) -> Option<(f64, [f64; 2])> {
        let mut best: Option<(f64, [f64; 2])> = None;
        let steps = 400;
        for i in 0..=steps {
            for j in 0..=steps {
                let p = [-2.0 + 4.0 * i as f64 / steps as f64, -2.0 + 4.0 * j as f64 / steps as f64];
                if c.iter().zip(b).all(|(row, bi)| row[0] * p[0] + row[1] * p[1] >= bi - 1e-12) {
                    let f = (p[0] - target[0]).powi(2) + (p[1] - target[1]).powi(2);
                    if best.map_or(true, |(bf, _)| f < bf) {
                        best = Some((f, p));
                    }
                }
            }
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn matches_grid_search(
            t0 in -1.5f64..1.5, t1 in -1.5f64..1.5,
            a in -1.0f64..1.0, bcoef in -1.0f64..1.0, rhs in -1.0f64..1.0,
        ) {
            prop_assume!(a.abs() + bcoef.abs() > 0.2);
            prop_assume!(2.0 * (a.abs() + bcoef.abs()) - rhs > 0.05);
            // Box [-2, 2]^2 plus one general half-plane.
            let c = vec![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [a, bcoef]];
            let b = vec![-2.0, -2.0, -2.0, -2.0, rhs];
            let qp = projection(&[t0, t1], c.iter().map(|r| r.to_vec()).collect(), b.clone());
            let oracle = brute_force(&[t0, t1], &c, &b);
            match (qp.solve(), oracle) {
                (QpOutcome::Solved { x, .. }, Some((f_grid, p))) => {
                    let feasible = c.iter().zip(&b).all(|(row, bi)| row[0] * x[0] + row[1] * x[1] >= bi - 1e-9);
                    let f = (x[0] - t0).powi(2) + (x[1] - t1).powi(2);
                    // The grid optimum can only be worse, by at most a few grid steps.
                    prop_assert!(feasible && f <= f_grid + 1e-9 && f_grid - f < 0.05,
                        "qp {:?} grid {:?}", x, p);
                }
                (out, orc) => prop_assert!(false, "qp {:?} oracle {:?}", out, orc),
            }
        }
    }
}
