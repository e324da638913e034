use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assets::{EssSpec, LoadProfile};
use crate::grid::{solve_sweep, GridError, Network};

/// What the node's ESS does while the history is recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionSource {
    Idle,
    /// Independent uniform draws over `[p_min, p_max]`; a fraction of steps
    /// is left idle so the no-action regime is represented too.
    Random { idle_fraction: f64 },
    /// Explicit per-step powers in watts (charging positive).
    Fixed(Vec<f64>),
}

/// One metered step at a node, per-unit on the network base. Powers are
/// consumption (charging positive for the ESS).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeterRecord {
    pub t: usize,
    pub v_true: f64,
    pub p_demand: f64,
    pub q_demand: f64,
    pub p_ess: f64,
    pub q_ess: f64,
}

impl MeterRecord {
    pub fn p_net(&self) -> f64 {
        self.p_demand + self.p_ess
    }

    pub fn q_net(&self) -> f64 {
        self.q_demand + self.q_ess
    }
}

/// Runs the feeder over the whole profile with only `spec`'s ESS active and
/// records the metered quantities at its node. SOC limits are not applied:
/// this produces regression data, not an operating schedule.
pub fn simulate_node_history(
    net: &Network,
    profile: &LoadProfile,
    spec: &EssSpec,
    actions: &ActionSource,
    seed: u64,
) -> Result<Vec<MeterRecord>, GridError> {
    let node = net.index_of(&spec.node)?;
    let s_base = net.base().s_base;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(profile.len());
    for t in 0..profile.len() {
        let p_b = match actions {
            ActionSource::Idle => 0.0,
            ActionSource::Random { idle_fraction } => {
                if rng.random::<f64>() < *idle_fraction {
                    0.0
                } else {
                    rng.random_range(spec.p_min..=spec.p_max)
                }
            }
            ActionSource::Fixed(v) => v.get(t).copied().unwrap_or(0.0),
        };
        let mut inj = profile.injections(net, t);
        inj[node] = inj[node].with_ess(p_b, spec.pf);
        let sol = solve_sweep(net, &inj)?;
        out.push(MeterRecord {
            t,
            v_true: sol.v[node],
            p_demand: inj[node].p_demand / s_base,
            q_demand: inj[node].q_demand / s_base,
            p_ess: inj[node].p_ess / s_base,
            q_ess: inj[node].q_ess / s_base,
        });
    }
    Ok(out)
}
