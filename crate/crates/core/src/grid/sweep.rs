use num_complex::Complex64;

use super::{
    distflow_residuals, GridError, LineFlow, LineLoss, Network, NodeInjection, PowerFlowSolution,
    SolverOptions,
};

/// Backward/forward sweep on the branch-flow equations with default options
/// (tolerance 1e-8 p.u., 100 iterations).
pub fn solve_sweep(net: &Network, inj: &[NodeInjection]) -> Result<PowerFlowSolution, GridError> {
    solve_sweep_with(net, inj, SolverOptions::default())
}

/// Backward/forward sweep.
///
/// The backward pass accumulates sending-end flows from the leaves using the
/// current voltage estimate for the line losses; the forward pass propagates
/// squared voltage magnitudes from the slack. Hitting the iteration cap is
/// not an error: the partial solution comes back with `converged == false`.
pub fn solve_sweep_with(
    net: &Network,
    inj: &[NodeInjection],
    opts: SolverOptions,
) -> Result<PowerFlowSolution, GridError> {
    let demand = net.net_demand_pu(inj)?;
    let n = net.node_count();
    let nb = net.branches().len();
    let slack = net.slack();
    let v0 = net.slack_voltage();

    let mut v2 = vec![v0 * v0; n];
    let mut p = vec![0.0; nb];
    let mut q = vec![0.0; nb];
    let mut iterations = 0;
    let mut converged = false;
    let mut mismatch = f64::INFINITY;

    for it in 1..=opts.max_iterations {
        iterations = it;
        for &node in net.order().iter().rev() {
            let Some(k) = net.feeder(node) else { continue };
            let br = net.branches()[k];
            let mut pr = demand[node].re;
            let mut qr = demand[node].im;
            for &c in net.children(node) {
                pr += p[c];
                qr += q[c];
            }
            // |I|² from the receiving end.
            let i2 = (pr * pr + qr * qr) / v2[node];
            p[k] = pr + br.r * i2;
            q[k] = qr + br.x * i2;
        }
        for &node in net.order() {
            if node == slack {
                v2[node] = v0 * v0;
                continue;
            }
            let k = net.feeder(node).expect("non-slack node has a feeder");
            let br = net.branches()[k];
            let vs2 = v2[br.parent];
            let s2 = p[k] * p[k] + q[k] * q[k];
            v2[node] =
                vs2 - 2.0 * (br.r * p[k] + br.x * q[k]) + (br.r * br.r + br.x * br.x) * s2 / vs2;
            if !(v2[node] > 0.0) || !v2[node].is_finite() {
                // Beyond loadability: stop with what we have.
                return Ok(partial(net, &demand, &v2, &p, &q, it));
            }
        }
        let sol = assemble(net, &v2, &p, &q, false, it, 0.0);
        mismatch = distflow_residuals(net, &demand, &sol).balance;
        if mismatch <= opts.tolerance {
            converged = true;
            break;
        }
    }

    let mut sol = assemble(net, &v2, &p, &q, converged, iterations, mismatch);
    sol.angle = angles(net, &sol);
    Ok(sol)
}

fn partial(
    net: &Network,
    demand: &[Complex64],
    v2: &[f64],
    p: &[f64],
    q: &[f64],
    iterations: usize,
) -> PowerFlowSolution {
    let v2: Vec<f64> = v2.iter().map(|x| x.max(0.0)).collect();
    let mut sol = assemble(net, &v2, p, q, false, iterations, f64::INFINITY);
    if v2.iter().all(|x| *x > 0.0) {
        sol.max_mismatch = distflow_residuals(net, demand, &sol).balance;
    }
    sol
}

fn assemble(
    net: &Network,
    v2: &[f64],
    p: &[f64],
    q: &[f64],
    converged: bool,
    iterations: usize,
    max_mismatch: f64,
) -> PowerFlowSolution {
    let v: Vec<f64> = v2.iter().map(|x| x.sqrt()).collect();
    let flows: Vec<LineFlow> = p.iter().zip(q).map(|(&p, &q)| LineFlow { p, q }).collect();
    let losses = net
        .branches()
        .iter()
        .zip(&flows)
        .map(|(br, f)| {
            let i2 = (f.p * f.p + f.q * f.q) / v2[br.parent];
            LineLoss { p: br.r * i2, q: br.x * i2 }
        })
        .collect();
    PowerFlowSolution {
        v,
        angle: vec![0.0; net.node_count()],
        flows,
        losses,
        converged,
        iterations,
        max_mismatch,
    }
}

/// Recovers voltage angles from the converged magnitudes and flows by
/// walking the tree: `V_child = V_parent − Z · conj(S / V_parent)`.
fn angles(net: &Network, sol: &PowerFlowSolution) -> Vec<f64> {
    let mut phasor = vec![Complex64::new(0.0, 0.0); net.node_count()];
    phasor[net.slack()] = Complex64::new(net.slack_voltage(), 0.0);
    for &node in net.order() {
        let Some(k) = net.feeder(node) else { continue };
        let br = net.branches()[k];
        let vp = phasor[br.parent];
        let s = Complex64::new(sol.flows[k].p, sol.flows[k].q);
        let i = (s / vp).conj();
        phasor[node] = vp - Complex64::new(br.r, br.x) * i;
    }
    phasor.iter().map(|c| c.arg()).collect()
}
