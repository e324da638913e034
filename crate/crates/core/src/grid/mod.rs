//! Radial distribution network model and power-flow solvers.
//!
//! All quantities inside this module are per-unit against the network's
//! [`Base`]. Watts and volts only appear at the I/O boundary
//! ([`NodeInjection`] and the topology file).
//!
//! Line flows follow the branch-flow (DistFlow) convention: every line is
//! oriented away from the slack node and `P`/`Q` are measured at the sending
//! end. Line losses are `(P² + Q²) / V_send² · R` (resp. `X`), which makes the
//! voltage-drop relation
//!
//! ```text
//! V_send² − V_recv² = 2 (R P + X Q) − (P² + Q²) / V_send² · (R² + X²)
//! ```
//!
//! exact for a radial feeder.

mod limits;
mod newton;
mod sweep;
pub mod topology;

pub use limits::{check_limits, LimitViolation};
pub use newton::solve_newton;
pub use sweep::{solve_sweep, solve_sweep_with};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid line {line}: {reason}")]
    InvalidLine { line: usize, reason: String },
    #[error("injection vector has {got} entries, network has {expected} nodes")]
    InjectionLength { expected: usize, got: usize },
    #[error("unknown node id `{0}`")]
    UnknownNode(String),
    #[error("topology file line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Slack,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
}

/// A line as supplied by the user (ohms, arbitrary orientation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    pub from: String,
    pub to: String,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Base {
    /// Line-to-line base voltage in volts.
    pub v_base: f64,
    /// Three-phase base power in volt-amperes.
    pub s_base: f64,
}

impl Base {
    pub fn z_base(&self) -> f64 {
        self.v_base * self.v_base / self.s_base
    }
}

/// Oriented line: `parent` is closer to the slack than `child`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branch {
    pub parent: usize,
    pub child: usize,
    pub r: f64,
    pub x: f64,
}

/// Immutable radial network. Construct with [`Network::new`], which checks
/// the tree invariants and orients every line away from the slack node.
#[derive(Debug, Clone)]
pub struct Network {
    nodes: Vec<Node>,
    branches: Vec<Branch>,
    base: Base,
    slack_voltage: f64,
    slack: usize,
    /// Index of the branch feeding each node (`None` for the slack).
    feeder: Vec<Option<usize>>,
    /// Branch indices leaving each node.
    children: Vec<Vec<usize>>,
    /// Nodes in breadth-first order from the slack.
    order: Vec<usize>,
}

impl Network {
    pub fn new(
        nodes: Vec<Node>,
        lines: &[LineSpec],
        base: Base,
        slack_voltage: f64,
    ) -> Result<Self, GridError> {
        if !(base.v_base > 0.0 && base.s_base > 0.0) {
            return Err(GridError::InvalidTopology(
                "base voltage and power must be positive".into(),
            ));
        }
        if !(slack_voltage > 0.0 && slack_voltage.is_finite()) {
            return Err(GridError::InvalidTopology("slack voltage must be positive".into()));
        }
        let n = nodes.len();
        let slacks: Vec<usize> = (0..n).filter(|&i| nodes[i].kind == NodeKind::Slack).collect();
        if slacks.len() != 1 {
            return Err(GridError::InvalidTopology(format!(
                "expected exactly one slack node, found {}",
                slacks.len()
            )));
        }
        let slack = slacks[0];
        if lines.len() + 1 != n {
            return Err(GridError::InvalidTopology(format!(
                "{} nodes need {} lines for a tree, got {}",
                n,
                n.saturating_sub(1),
                lines.len()
            )));
        }
        for (i, a) in nodes.iter().enumerate() {
            if nodes[..i].iter().any(|b| b.id == a.id) {
                return Err(GridError::InvalidTopology(format!("duplicate node id `{}`", a.id)));
            }
        }
        let index_of = |id: &str| {
            nodes
                .iter()
                .position(|nd| nd.id == id)
                .ok_or_else(|| GridError::UnknownNode(id.to_string()))
        };

        let z_base = base.z_base();
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        let mut raw = Vec::with_capacity(lines.len());
        for (k, line) in lines.iter().enumerate() {
            if !(line.r_ohm >= 0.0 && line.x_ohm >= 0.0) {
                return Err(GridError::InvalidLine {
                    line: k,
                    reason: "resistance and reactance must be non-negative".into(),
                });
            }
            if line.r_ohm == 0.0 && line.x_ohm == 0.0 {
                return Err(GridError::InvalidLine {
                    line: k,
                    reason: "zero impedance".into(),
                });
            }
            let a = index_of(&line.from)?;
            let b = index_of(&line.to)?;
            if a == b {
                return Err(GridError::InvalidLine { line: k, reason: "self loop".into() });
            }
            adjacency[a].push((b, k));
            adjacency[b].push((a, k));
            raw.push((line.r_ohm / z_base, line.x_ohm / z_base));
        }

        let mut feeder = vec![None; n];
        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut branches = vec![
            Branch { parent: 0, child: 0, r: 0.0, x: 0.0 };
            lines.len()
        ];
        let mut children = vec![Vec::new(); n];
        visited[slack] = true;
        order.push(slack);
        let mut head = 0;
        while head < order.len() {
            let u = order[head];
            head += 1;
            for &(v, k) in &adjacency[u] {
                if Some(k) == feeder[u] {
                    continue;
                }
                if visited[v] {
                    return Err(GridError::InvalidTopology("network contains a cycle".into()));
                }
                visited[v] = true;
                feeder[v] = Some(k);
                branches[k] = Branch { parent: u, child: v, r: raw[k].0, x: raw[k].1 };
                children[u].push(k);
                order.push(v);
            }
        }
        if order.len() != n {
            return Err(GridError::InvalidTopology("network is not connected".into()));
        }

        Ok(Self { nodes, branches, base, slack_voltage, slack, feeder, children, order })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn base(&self) -> Base {
        self.base
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn slack_voltage(&self) -> f64 {
        self.slack_voltage
    }

    /// Returns a copy of the network with a different slack voltage.
    pub fn with_slack_voltage(&self, v: f64) -> Self {
        Self { slack_voltage: v, ..self.clone() }
    }

    pub fn feeder(&self, node: usize) -> Option<usize> {
        self.feeder[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    /// Nodes in breadth-first order starting at the slack.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn index_of(&self, id: &str) -> Result<usize, GridError> {
        self.nodes
            .iter()
            .position(|n| n.id == id)
            .ok_or_else(|| GridError::UnknownNode(id.to_string()))
    }

    /// Nodes on the path from `node` up to (and including) the slack.
    pub fn path_to_slack(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(k) = self.feeder[cur] {
            cur = self.branches[k].parent;
            path.push(cur);
        }
        path
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        node != self.slack && self.children[node].is_empty()
    }

    /// Converts watt/var injections into per-unit net consumption per node.
    pub fn net_demand_pu(&self, inj: &[NodeInjection]) -> Result<Vec<Complex64>, GridError> {
        if inj.len() != self.nodes.len() {
            return Err(GridError::InjectionLength { expected: self.nodes.len(), got: inj.len() });
        }
        let s = self.base.s_base;
        Ok(inj
            .iter()
            .enumerate()
            .map(|(i, x)| {
                if i == self.slack {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new((x.p_demand + x.p_ess) / s, (x.q_demand + x.q_ess) / s)
                }
            })
            .collect())
    }
}

/// Per-node demand and ESS power. Positive ESS power is charging, so it adds
/// to the node's consumption.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeInjection {
    /// Net active demand in watts (negative for PV export).
    pub p_demand: f64,
    /// Net reactive demand in var.
    pub q_demand: f64,
    /// ESS active power in watts, charging positive.
    pub p_ess: f64,
    /// ESS reactive power in var.
    pub q_ess: f64,
}

impl NodeInjection {
    pub fn demand(p_w: f64, q_var: f64) -> Self {
        Self { p_demand: p_w, q_demand: q_var, ..Self::default() }
    }

    /// Demand from active power and a (lagging) power factor.
    pub fn from_pf(p_w: f64, pf: f64) -> Self {
        Self::demand(p_w, p_w * pf_tan(pf))
    }

    /// Sets the ESS power, deriving `Q_b = P_b · tan(arccos(pf))`.
    pub fn with_ess(mut self, p_b: f64, pf_ess: f64) -> Self {
        self.p_ess = p_b;
        self.q_ess = p_b * pf_tan(pf_ess);
        self
    }
}

/// `tan(arccos(pf))`, clamping `pf` into `(0, 1]`.
pub fn pf_tan(pf: f64) -> f64 {
    let pf = pf.clamp(1e-6, 1.0);
    (1.0 - pf * pf).sqrt() / pf
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LineFlow {
    /// Sending-end active power, p.u.
    pub p: f64,
    /// Sending-end reactive power, p.u.
    pub q: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LineLoss {
    pub p: f64,
    pub q: f64,
}

/// Result of a power-flow solve. Indexing of `v`/`angle` follows the
/// network's node order; `flows`/`losses` follow its branch order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub v: Vec<f64>,
    /// Voltage angles in radians, slack at zero.
    pub angle: Vec<f64>,
    pub flows: Vec<LineFlow>,
    pub losses: Vec<LineLoss>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest nodal power-balance residual, p.u.
    pub max_mismatch: f64,
}

impl PowerFlowSolution {
    pub fn phasor(&self, node: usize) -> Complex64 {
        Complex64::from_polar(self.v[node], self.angle[node])
    }

    /// Power delivered by the slack node, p.u.
    pub fn slack_power(&self, net: &Network) -> Complex64 {
        net.children(net.slack())
            .iter()
            .map(|&k| Complex64::new(self.flows[k].p, self.flows[k].q))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iterations: 100 }
    }
}

/// Residuals of the branch-flow equations on a solved state: the largest
/// nodal active/reactive balance error and the largest voltage-drop error,
/// both in p.u.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistFlowResiduals {
    pub balance: f64,
    pub voltage_drop: f64,
}

pub fn distflow_residuals(
    net: &Network,
    demand: &[Complex64],
    sol: &PowerFlowSolution,
) -> DistFlowResiduals {
    let mut balance: f64 = 0.0;
    let mut voltage_drop: f64 = 0.0;
    for (k, br) in net.branches().iter().enumerate() {
        let f = sol.flows[k];
        let vs2 = sol.v[br.parent] * sol.v[br.parent];
        let s2 = f.p * f.p + f.q * f.q;
        let lhs = vs2 - sol.v[br.child] * sol.v[br.child];
        let rhs = 2.0 * (br.r * f.p + br.x * f.q) - s2 / vs2 * (br.r * br.r + br.x * br.x);
        voltage_drop = voltage_drop.max((lhs - rhs).abs());
    }
    for node in 0..net.node_count() {
        if node == net.slack() {
            continue;
        }
        let k = net.feeder(node).expect("non-slack node has a feeder");
        let br = net.branches()[k];
        let f = sol.flows[k];
        let vs2 = sol.v[br.parent] * sol.v[br.parent];
        let s2 = f.p * f.p + f.q * f.q;
        let mut rp = f.p - s2 / vs2 * br.r - demand[node].re;
        let mut rq = f.q - s2 / vs2 * br.x - demand[node].im;
        for &c in net.children(node) {
            rp -= sol.flows[c].p;
            rq -= sol.flows[c].q;
        }
        balance = balance.max(rp.abs()).max(rq.abs());
    }
    DistFlowResiduals { balance, voltage_drop }
}

/// Fills sending-end flows, losses and mismatch from a set of complex bus
/// voltages. Shared by both solvers.
pub(crate) fn flows_from_phasors(
    net: &Network,
    demand: &[Complex64],
    v: &[Complex64],
) -> (Vec<LineFlow>, Vec<LineLoss>, f64) {
    let mut flows = Vec::with_capacity(net.branches().len());
    let mut losses = Vec::with_capacity(net.branches().len());
    for br in net.branches() {
        let z = Complex64::new(br.r, br.x);
        let i = (v[br.parent] - v[br.child]) / z;
        let s = v[br.parent] * i.conj();
        let loss = z * i.norm_sqr();
        flows.push(LineFlow { p: s.re, q: s.im });
        losses.push(LineLoss { p: loss.re, q: loss.im });
    }
    let probe = PowerFlowSolution {
        v: v.iter().map(|c| c.norm()).collect(),
        angle: v.iter().map(|c| c.arg()).collect(),
        flows: flows.clone(),
        losses: losses.clone(),
        converged: true,
        iterations: 0,
        max_mismatch: 0.0,
    };
    let mismatch = distflow_residuals(net, demand, &probe).balance;
    (flows, losses, mismatch)
}

#[cfg(test)]
pub(crate) mod test_nets {
    use super::*;

    pub fn two_bus(r: f64, x: f64) -> Network {
        Network::new(
            vec![
                Node { id: "S".into(), kind: NodeKind::Slack },
                Node { id: "L".into(), kind: NodeKind::Load },
            ],
            &[LineSpec { from: "S".into(), to: "L".into(), r_ohm: r, x_ohm: x }],
            Base { v_base: 1.0, s_base: 1.0 },
            1.0,
        )
        .unwrap()
    }

    /// Small branched feeder: 0 - 1 - 2 - 3, 1 - 4, 2 - 5.
    pub fn branched() -> Network {
        let ids = ["s", "a", "b", "c", "d", "e"];
        let nodes = ids
            .iter()
            .enumerate()
            .map(|(i, id)| Node {
                id: id.to_string(),
                kind: if i == 0 { NodeKind::Slack } else { NodeKind::Load },
            })
            .collect();
        let l = |f: &str, t: &str, r: f64, x: f64| LineSpec {
            from: f.into(),
            to: t.into(),
            r_ohm: r,
            x_ohm: x,
        };
        Network::new(
            nodes,
            &[
                l("s", "a", 0.01, 0.02),
                l("b", "a", 0.02, 0.01),
                l("b", "c", 0.03, 0.01),
                l("a", "d", 0.05, 0.01),
                l("e", "b", 0.04, 0.02),
            ],
            Base { v_base: 1.0, s_base: 1.0 },
            1.0,
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_nets::*;
    use super::*;

    fn node(id: &str, kind: NodeKind) -> Node {
        Node { id: id.into(), kind }
    }

    fn line(f: &str, t: &str) -> LineSpec {
        LineSpec { from: f.into(), to: t.into(), r_ohm: 0.1, x_ohm: 0.1 }
    }

    const UNIT: Base = Base { v_base: 1.0, s_base: 1.0 };

    #[test]
    fn orients_lines_away_from_slack() {
        let net = branched();
        for br in net.branches() {
            assert_eq!(net.feeder(br.child).map(|k| net.branches()[k]), Some(*br));
        }
        assert_eq!(net.order()[0], net.slack());
        assert_eq!(net.branches()[1].parent, net.index_of("a").unwrap());
    }

    #[test]
    fn rejects_cycles_and_disconnected_graphs() {
        let nodes = vec![
            node("s", NodeKind::Slack),
            node("a", NodeKind::Load),
            node("b", NodeKind::Load),
            node("c", NodeKind::Load),
        ];
        let cyc = [line("s", "a"), line("a", "b"), line("b", "s")];
        assert!(matches!(
            Network::new(nodes.clone(), &cyc, UNIT, 1.0),
            Err(GridError::InvalidTopology(_))
        ));
        let few = [line("s", "a"), line("a", "b")];
        assert!(matches!(
            Network::new(nodes, &few, UNIT, 1.0),
            Err(GridError::InvalidTopology(_))
        ));
    }

    #[test]
    fn rejects_bad_lines_and_slack_counts() {
        let nodes = vec![node("s", NodeKind::Slack), node("a", NodeKind::Load)];
        let neg = [LineSpec { from: "s".into(), to: "a".into(), r_ohm: -1.0, x_ohm: 0.1 }];
        assert!(matches!(
            Network::new(nodes.clone(), &neg, UNIT, 1.0),
            Err(GridError::InvalidLine { .. })
        ));
        let two_slack = vec![node("s", NodeKind::Slack), node("a", NodeKind::Slack)];
        assert!(Network::new(two_slack, &[line("s", "a")], UNIT, 1.0).is_err());
        let unknown = [line("s", "zz")];
        assert!(matches!(
            Network::new(nodes, &unknown, UNIT, 1.0),
            Err(GridError::UnknownNode(_))
        ));
    }

    #[test]
    fn ess_reactive_power_follows_power_factor() {
        let inj = NodeInjection::default().with_ess(1000.0, 0.8);
        assert!((inj.q_ess - 750.0).abs() < 1e-9);
        assert_eq!(NodeInjection::default().with_ess(1000.0, 1.0).q_ess, 0.0);
    }

    #[test]
    fn path_to_slack_walks_up_the_tree() {
        let net = branched();
        let c = net.index_of("c").unwrap();
        let ids: Vec<&str> =
            net.path_to_slack(c).iter().map(|&i| net.nodes()[i].id.as_str()).collect();
        assert_eq!(ids, ["c", "b", "a", "s"]);
        assert!(net.is_leaf(c));
        assert!(!two_bus(0.1, 0.0).is_leaf(0));
    }
}
