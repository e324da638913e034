use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{flows_from_phasors, GridError, Network, NodeInjection, PowerFlowSolution};

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 30;

/// Full Newton-Raphson on the polar nodal mismatch equations.
///
/// Independent of the sweep: it works on the bus admittance matrix rather
/// than the branch-flow recursion, and is kept as a cross-check oracle.
pub fn solve_newton(net: &Network, inj: &[NodeInjection]) -> Result<PowerFlowSolution, GridError> {
    let demand = net.net_demand_pu(inj)?;
    let n = net.node_count();
    let slack = net.slack();

    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for br in net.branches() {
        let yl = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        y[(br.parent, br.parent)] += yl;
        y[(br.child, br.child)] += yl;
        y[(br.parent, br.child)] -= yl;
        y[(br.child, br.parent)] -= yl;
    }

    // Unknown ordering: angles then magnitudes of every non-slack bus.
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = pq.len();
    let mut vm = vec![net.slack_voltage(); n];
    let mut va = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    let mut mismatch = f64::INFINITY;

    for it in 0..=NEWTON_MAX_ITER {
        let (p_calc, q_calc) = injections(&y, &vm, &va);
        let mut f = DVector::<f64>::zeros(2 * m);
        for (r, &i) in pq.iter().enumerate() {
            f[r] = p_calc[i] + demand[i].re;
            f[m + r] = q_calc[i] + demand[i].im;
        }
        mismatch = f.amax();
        if !mismatch.is_finite() {
            break;
        }
        if mismatch < NEWTON_TOL {
            converged = true;
            iterations = it;
            break;
        }
        if it == NEWTON_MAX_ITER {
            iterations = it;
            break;
        }

        let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
        for (r, &i) in pq.iter().enumerate() {
            for (c, &j) in pq.iter().enumerate() {
                let g = y[(i, j)].re;
                let b = y[(i, j)].im;
                if i == j {
                    jac[(r, c)] = -q_calc[i] - b * vm[i] * vm[i];
                    jac[(r, m + c)] = p_calc[i] / vm[i] + g * vm[i];
                    jac[(m + r, c)] = p_calc[i] - g * vm[i] * vm[i];
                    jac[(m + r, m + c)] = q_calc[i] / vm[i] - b * vm[i];
                } else {
                    if g == 0.0 && b == 0.0 {
                        continue;
                    }
                    let (s, co) = (va[i] - va[j]).sin_cos();
                    jac[(r, c)] = vm[i] * vm[j] * (g * s - b * co);
                    jac[(r, m + c)] = vm[i] * (g * co + b * s);
                    jac[(m + r, c)] = -vm[i] * vm[j] * (g * co + b * s);
                    jac[(m + r, m + c)] = vm[i] * (g * s - b * co);
                }
            }
        }
        let Some(dx) = jac.lu().solve(&f) else {
            iterations = it;
            break;
        };
        for (r, &i) in pq.iter().enumerate() {
            va[i] -= dx[r];
            vm[i] -= dx[m + r];
        }
        iterations = it + 1;
    }

    let phasors: Vec<Complex64> =
        vm.iter().zip(&va).map(|(&m, &a)| Complex64::from_polar(m, a)).collect();
    let (flows, losses, balance) = flows_from_phasors(net, &demand, &phasors);
    Ok(PowerFlowSolution {
        v: vm,
        angle: va,
        flows,
        losses,
        converged,
        iterations,
        max_mismatch: if converged { balance.max(mismatch) } else { mismatch },
    })
}

fn injections(y: &DMatrix<Complex64>, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = vm.len();
    let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let mut acc = Complex64::new(0.0, 0.0);
        for j in 0..n {
            let yij = y[(i, j)];
            if yij.re != 0.0 || yij.im != 0.0 {
                acc += yij * v[j];
            }
        }
        let s = v[i] * acc.conj();
        p[i] = s.re;
        q[i] = s.im;
    }
    (p, q)
}
