use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_beta, coordinate_step, AgentReport, CoordinationError, SensitivitySurrogate, StepConfig, SurrogateSample};
use crate::assets::{step_soc, EssSpec, EssState, LoadProfile};
use crate::grid::{pf_tan, solve_sweep, Network};
use crate::rl::GaussianPolicy;
use crate::thevenin::{LocalPipeline, MeterRecord, PipelineState, StepInputs};

/// Source of an agent's intended action.
#[derive(Debug, Clone)]
pub enum Controller {
    /// Deterministic action of a trained policy.
    Policy(GaussianPolicy),
    /// Fixed watts per step of the day, repeated every day.
    Schedule(Vec<f64>),
}

impl Controller {
    fn intended(&self, obs: &[f64], step_of_day: usize) -> f64 {
        match self {
            Controller::Policy(p) => p.act_deterministic(obs),
            Controller::Schedule(s) => s[step_of_day % s.len()],
        }
    }
}

/// A deployed agent: its ESS, action source and local estimator.
#[derive(Debug, Clone)]
pub struct OnlineAgent {
    pub spec: EssSpec,
    pub controller: Controller,
    pub pipeline: LocalPipeline,
}

/// Replaces the policy action by a uniform draw over the power range with
/// the given probability. Used when logging data to fit surrogates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dither {
    pub probability: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub beta: f64,
    /// Agent indices per neighbourhood; must partition the agents.
    pub neighborhoods: Vec<Vec<usize>>,
    pub coordinate: bool,
    /// Shrink actions that push an out-of-band estimate further out.
    pub guard: bool,
    pub step: StepConfig,
    pub soc_init: f64,
    pub dither: Option<Dither>,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            neighborhoods: Vec::new(),
            coordinate: true,
            guard: true,
            step: StepConfig::default(),
            soc_init: 0.5,
            dither: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: usize,
    pub agent: usize,
    pub node: String,
    pub a_intended: f64,
    pub a_tilde: f64,
    pub a_star: f64,
    pub v_true: f64,
    pub v_tilde: f64,
    pub v_base: f64,
    /// SOC after the step.
    pub soc: f64,
    pub violation: bool,
    pub infeasible: bool,
    /// The applied power sits on a power or SOC limit.
    pub at_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineLog {
    pub node_ids: Vec<String>,
    pub agents: usize,
    /// Ground-truth voltage of every node, per step.
    pub voltages: Vec<Vec<f64>>,
    /// `agents` rows per step, in agent order.
    pub rows: Vec<LogRow>,
}

impl OnlineLog {
    pub fn steps(&self) -> usize {
        self.voltages.len()
    }

    pub fn row(&self, t: usize, agent: usize) -> &LogRow {
        &self.rows[t * self.agents + agent]
    }

    /// Steps at which any of `nodes` is outside `[v_min, v_max]`.
    pub fn violation_steps(&self, nodes: &[usize], v_min: f64, v_max: f64) -> usize {
        self.voltages.iter().filter(|v| nodes.iter().any(|&n| v[n] < v_min || v[n] > v_max)).count()
    }

    pub fn node_violation_steps(&self, node: usize, v_min: f64, v_max: f64) -> usize {
        self.violation_steps(&[node], v_min, v_max)
    }

    /// Largest distance outside the band over `nodes` and all steps.
    pub fn max_violation(&self, nodes: &[usize], v_min: f64, v_max: f64) -> f64 {
        self.voltages
            .iter()
            .flat_map(|v| nodes.iter().map(move |&n| (v_min - v[n]).max(v[n] - v_max).max(0.0)))
            .fold(0.0, f64::max)
    }
}

struct AgentRuntime {
    node: usize,
    spec: EssSpec,
    derated: EssSpec,
    soc: EssState,
    window: PipelineState,
    v_lag1: f64,
    v_lag2: f64,
}

fn volt_feature(v: f64) -> f64 {
    (v - 1.0) * 20.0
}

fn validate(
    agents: &[OnlineAgent],
    surrogates: &[SensitivitySurrogate],
    cfg: &OnlineConfig,
) -> Result<(), CoordinationError> {
    check_beta(cfg.beta)?;
    for a in agents {
        if let Controller::Schedule(s) = &a.controller {
            if s.is_empty() || s.iter().any(|p| !p.is_finite()) {
                return Err(CoordinationError::Config(format!("{}: schedule needs finite entries", a.spec.node)));
            }
        }
    }
    let mut seen = vec![false; agents.len()];
    for nb in &cfg.neighborhoods {
        for &i in nb {
            if i >= agents.len() || seen[i] {
                return Err(CoordinationError::Config("neighbourhoods must partition the agents".into()));
            }
            seen[i] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(CoordinationError::Config("every agent needs a neighbourhood".into()));
    }
    if cfg.coordinate {
        if surrogates.len() != cfg.neighborhoods.len() {
            return Err(CoordinationError::Config("one surrogate per neighbourhood is required".into()));
        }
        for (nb, sur) in cfg.neighborhoods.iter().zip(surrogates) {
            let ids: Vec<&str> = nb.iter().map(|&i| agents[i].spec.node.as_str()).collect();
            if ids != sur.members.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(CoordinationError::Config(format!("surrogate members {:?} differ from {:?}", sur.members, ids)));
            }
        }
    }
    Ok(())
}

/// Runs the agents over the whole profile with the ground-truth power flow
/// as the plant. The first two steps run without control to fill each
/// agent's measurement window.
///
/// Agents only see their own meter readings and estimates; coordination
/// exchanges reports within each neighbourhood.
pub fn run_online(
    net: &Network,
    profile: &LoadProfile,
    agents: &[OnlineAgent],
    surrogates: &[SensitivitySurrogate],
    cfg: &OnlineConfig,
) -> Result<OnlineLog, CoordinationError> {
    validate(agents, surrogates, cfg)?;
    if profile.len() < 3 {
        return Err(CoordinationError::Config("profile needs at least three steps".into()));
    }
    let s_base = net.base().s_base;
    let spd = profile.steps_per_day();
    let (v_min, v_max) = (cfg.step.v_min, cfg.step.v_max);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.dither.map_or(0, |d| d.seed));

    let mut voltages = Vec::with_capacity(profile.len());
    let mut rows = Vec::with_capacity(profile.len() * agents.len());
    let mut warmup: Vec<Vec<MeterRecord>> = vec![Vec::new(); agents.len()];
    let mut nodes = Vec::with_capacity(agents.len());
    for a in agents {
        a.spec.validate().map_err(|e| CoordinationError::Config(e.to_string()))?;
        nodes.push(net.index_of(&a.spec.node)?);
    }
    for t in 0..2 {
        let inj = profile.injections(net, t);
        let sol = solve_sweep(net, &inj)?;
        for (m, a) in agents.iter().enumerate() {
            let n = nodes[m];
            warmup[m].push(MeterRecord {
                t,
                v_true: sol.v[n],
                p_demand: inj[n].p_demand / s_base,
                q_demand: inj[n].q_demand / s_base,
                p_ess: 0.0,
                q_ess: 0.0,
            });
            rows.push(LogRow {
                t,
                agent: m,
                node: a.spec.node.clone(),
                a_intended: 0.0,
                a_tilde: 0.0,
                a_star: 0.0,
                v_true: sol.v[n],
                v_tilde: sol.v[n],
                v_base: sol.v[n],
                soc: cfg.soc_init,
                violation: sol.v[n] < v_min || sol.v[n] > v_max,
                infeasible: false,
                at_bound: false,
            });
        }
        voltages.push(sol.v);
    }
    let mut rt: Vec<AgentRuntime> = agents
        .iter()
        .enumerate()
        .map(|(m, a)| {
            let derated = a.spec.derated(cfg.beta);
            AgentRuntime {
                node: nodes[m],
                spec: a.spec.clone(),
                soc: EssState { soc: cfg.soc_init.clamp(derated.soc_min, derated.soc_max) },
                derated,
                window: PipelineState::from_records(&warmup[m][0], &warmup[m][1]),
                v_lag1: warmup[m][1].v_true,
                v_lag2: warmup[m][0].v_true,
            }
        })
        .collect();

    for t in 2..profile.len() {
        let inj = profile.injections(net, t);
        let mut reports = Vec::with_capacity(agents.len());
        for (m, agent) in agents.iter().enumerate() {
            let r = &rt[m];
            let pd = inj[r.node].p_demand / s_base;
            let qd = inj[r.node].q_demand / s_base;
            let tan = pf_tan(r.spec.pf);
            let inputs = |a_w: f64| {
                let p = a_w / s_base;
                StepInputs { action_p: p, action_q: p * tan, p_demand: pd, q_demand: qd }
            };
            let v_base = agent.pipeline.estimate(&r.window, &inputs(0.0)).0.v_tilde;
            let p_rated = r.spec.p_max / s_base;
            let obs = [
                pd / p_rated,
                r.window.p_demand_lag1 / p_rated,
                r.soc.soc,
                volt_feature(v_base),
                volt_feature(r.v_lag1),
                volt_feature(r.v_lag2),
                (t % spd) as f64 / spd as f64,
            ];
            let mut a = agent.controller.intended(&obs, t % spd).clamp(r.spec.p_min, r.spec.p_max);
            if let Some(d) = cfg.dither {
                if rng.random::<f64>() < d.probability {
                    a = rng.random_range(r.spec.p_min..=r.spec.p_max);
                }
            }
            let mut v_est = agent.pipeline.estimate(&r.window, &inputs(a)).0.v_tilde;
            let worsening = |v: f64, a: f64| (v < v_min && a > 0.0) || (v > v_max && a < 0.0);
            if cfg.guard && worsening(v_est, a) {
                let original = a;
                for k in 1..=10 {
                    a = original * (1.0 - 0.1 * k as f64);
                    if k == 10 {
                        a = 0.0;
                    }
                    v_est = agent.pipeline.estimate(&r.window, &inputs(a)).0.v_tilde;
                    if (v_min..=v_max).contains(&v_est) {
                        break;
                    }
                }
            }
            reports.push(AgentReport {
                node: r.spec.node.clone(),
                action_w: a,
                v_est,
                v_base,
                headroom: r.derated.headroom(r.soc),
            });
        }

        let intended: Vec<f64> = reports.iter().map(|r| r.action_w).collect();
        let scaled = super::scale_actions(&intended, cfg.beta)?;
        let mut a_star = vec![0.0; agents.len()];
        let mut infeasible = vec![false; agents.len()];
        for (k, nb) in cfg.neighborhoods.iter().enumerate() {
            if cfg.coordinate {
                let nb_reports: Vec<AgentReport> = nb.iter().map(|&i| reports[i].clone()).collect();
                let nb_scaled: Vec<f64> = nb.iter().map(|&i| scaled[i]).collect();
                let out = coordinate_step(&nb_reports, &nb_scaled, &surrogates[k], &cfg.step)?;
                for (j, &i) in nb.iter().enumerate() {
                    a_star[i] = out.a_star[j];
                    infeasible[i] = out.infeasible;
                }
            } else {
                for &i in nb {
                    a_star[i] = reports[i].headroom.clamp(scaled[i]);
                }
            }
        }

        let mut inj_ctrl = inj.clone();
        let mut applied = vec![0.0; agents.len()];
        for m in 0..agents.len() {
            let r = &mut rt[m];
            let (soc, p) = step_soc(&r.derated, r.soc, a_star[m]);
            r.soc = soc;
            applied[m] = p;
            inj_ctrl[r.node] = inj_ctrl[r.node].with_ess(p, r.spec.pf);
        }
        let sol = solve_sweep(net, &inj_ctrl)?;

        for (m, agent) in agents.iter().enumerate() {
            let r = &mut rt[m];
            let n = r.node;
            let v_true = sol.v[n];
            let pd = inj[n].p_demand / s_base;
            let qd = inj[n].q_demand / s_base;
            let p = applied[m] / s_base;
            let q = p * pf_tan(r.spec.pf);
            let post = StepInputs { action_p: p, action_q: q, p_demand: pd, q_demand: qd };
            let (est, carried) = agent.pipeline.estimate(&r.window, &post);
            r.window = carried.push(t, v_true, pd + p, qd + q, pd);
            r.v_lag2 = r.v_lag1;
            r.v_lag1 = est.v_tilde;
            let h = reports[m].headroom;
            let at_bound = (applied[m] - h.charge).abs() < 1e-6 || (applied[m] + h.discharge).abs() < 1e-6;
            rows.push(LogRow {
                t,
                agent: m,
                node: r.spec.node.clone(),
                a_intended: intended[m],
                a_tilde: scaled[m],
                a_star: applied[m],
                v_true,
                v_tilde: reports[m].v_est,
                v_base: reports[m].v_base,
                soc: r.soc.soc,
                violation: v_true < v_min || v_true > v_max,
                infeasible: infeasible[m],
                at_bound,
            });
        }
        voltages.push(sol.v);
    }

    Ok(OnlineLog {
        node_ids: net.nodes().iter().map(|n| n.id.clone()).collect(),
        agents: agents.len(),
        voltages,
        rows,
    })
}

/// Training samples for one neighbourhood's surrogate: the applied actions,
/// idle estimates and measured voltages of its members at every controlled
/// step.
pub fn surrogate_samples(log: &OnlineLog, members: &[usize]) -> Vec<SurrogateSample> {
    (2..log.steps())
        .map(|t| {
            let rows: Vec<&LogRow> = members.iter().map(|&m| log.row(t, m)).collect();
            SurrogateSample {
                actions_w: rows.iter().map(|r| r.a_star).collect(),
                v_base: rows.iter().map(|r| r.v_base).collect(),
                v_true: rows.iter().map(|r| r.v_true).collect(),
            }
        })
        .collect()
}

/// `t,node,a_intended,a_tilde,a_star,V_true,V_tilde,violation_flag,infeasible_flag`.
pub fn episode_log_csv(log: &OnlineLog) -> String {
    let mut out = String::from("t,node,a_intended,a_tilde,a_star,V_true,V_tilde,violation_flag,infeasible_flag\n");
    for r in &log.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.t,
            r.node,
            r.a_intended,
            r.a_tilde,
            r.a_star,
            r.v_true,
            r.v_tilde,
            u8::from(r.violation),
            u8::from(r.infeasible)
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSweepRow {
    pub beta: f64,
    pub agents: usize,
    pub violation_steps: usize,
    pub max_violation: f64,
}

pub fn beta_sweep_csv(rows: &[BetaSweepRow]) -> String {
    let mut out = String::from("beta,agents,violation_steps,max_violation\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.beta, r.agents, r.violation_steps, r.max_violation));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::{synthetic_profile, SyntheticProfileConfig};
    use crate::coordination::{fit_sensitivity, SurrogateConfig};
    use crate::grid::topology::cigre_lv_residential;
    use crate::grid::NodeKind;
    use crate::thevenin::{CorrectorConfig, PiecewiseCorrector};

    fn setup(days: usize) -> (Network, LoadProfile) {
        let net = cigre_lv_residential();
        let ids: Vec<String> =
            net.nodes().iter().filter(|n| n.kind == NodeKind::Load).map(|n| n.id.clone()).collect();
        let cfg = SyntheticProfileConfig { days, ..Default::default() };
        (net.clone(), synthetic_profile(&ids, &cfg, 3))
    }

    fn agent(node: &str, schedule: Vec<f64>, e_rated: f64) -> OnlineAgent {
        OnlineAgent {
            spec: EssSpec::new(node, 60_000.0, e_rated, 0.25),
            controller: Controller::Schedule(schedule),
            pipeline: LocalPipeline { corrector: PiecewiseCorrector::identity(CorrectorConfig::default()), sensitivity: None },
        }
    }

    fn uncoordinated(n: usize) -> OnlineConfig {
        OnlineConfig { coordinate: false, guard: false, neighborhoods: vec![(0..n).collect()], ..Default::default() }
    }

    #[test]
    fn idle_agents_reproduce_the_uncontrolled_flow() {
        let (net, profile) = setup(1);
        let agents = vec![agent("R9", vec![0.0], 3e6), agent("R14", vec![0.0], 3e6)];
        let log = run_online(&net, &profile, &agents, &[], &uncoordinated(2)).unwrap();
        assert_eq!(log.steps(), profile.len());
        assert_eq!(log.rows.len(), 2 * profile.len());
        for t in [0, 10, 50, 95] {
            let sol = solve_sweep(&net, &profile.injections(&net, t)).unwrap();
            assert_eq!(log.voltages[t], sol.v);
        }
        assert!(log.rows.iter().all(|r| r.a_star == 0.0 && r.soc == 0.5));
    }

    #[test]
    fn soc_never_leaves_its_limits() {
        let (net, profile) = setup(2);
        // Small battery, always charging or always discharging.
        let agents = vec![agent("R9", vec![60_000.0], 100_000.0), agent("R16", vec![-60_000.0], 100_000.0)];
        let log = run_online(&net, &profile, &agents, &[], &uncoordinated(2)).unwrap();
        for r in &log.rows {
            assert!((0.1 - 1e-12..=0.9 + 1e-12).contains(&r.soc), "{r:?}");
        }
        let last = log.steps() - 1;
        assert!((log.row(last, 0).soc - 0.9).abs() < 1e-9);
        assert!((log.row(last, 1).soc - 0.1).abs() < 1e-9);
        assert!(log.row(last, 0).at_bound && log.row(last, 0).a_star == 0.0);
    }

    #[test]
    fn scaling_derates_the_applied_power() {
        let (net, profile) = setup(1);
        let agents = vec![agent("R9", vec![60_000.0, -60_000.0], 3e6)];
        let mut cfg = uncoordinated(1);
        cfg.beta = 0.3;
        let log = run_online(&net, &profile, &agents, &[], &cfg).unwrap();
        for r in log.rows.iter().skip(2) {
            assert!((r.a_tilde.abs() - 18_000.0).abs() < 1e-6);
            assert!(r.a_star.abs() <= 18_000.0 + 1e-6);
        }
    }

    #[test]
    fn coordination_removes_conflicting_charging() {
        let (net, profile) = setup(3);
        let profile = profile.scaled(0.7);
        let train = profile.days_slice(0, 2);
        let test = profile.days_slice(2, 1);
        let nodes = ["R9", "R14", "R16"];
        let peak: Vec<f64> = (0..96).map(|t| if (68..84).contains(&t) { 60_000.0 } else { 0.0 }).collect();
        let agents: Vec<OnlineAgent> = nodes.iter().map(|n| agent(n, peak.clone(), 3e6)).collect();
        let mut fit_cfg = uncoordinated(3);
        fit_cfg.dither = Some(Dither { probability: 0.5, seed: 1 });
        let fit_log = run_online(&net, &train, &agents, &[], &fit_cfg).unwrap();
        let members: Vec<String> = nodes.iter().map(|s| s.to_string()).collect();
        let (sur, _) = fit_sensitivity(
            members,
            vec![60_000.0; 3],
            &surrogate_samples(&fit_log, &[0, 1, 2]),
            &SurrogateConfig { degree: 2, ..Default::default() },
        )
        .unwrap();

        let base = run_online(&net, &test, &agents, &[], &uncoordinated(3)).unwrap();
        let mut cfg = uncoordinated(3);
        cfg.coordinate = true;
        cfg.step.margin = 0.01;
        let coord = run_online(&net, &test, &agents, &[sur], &cfg).unwrap();
        let idx: Vec<usize> = nodes.iter().map(|n| net.index_of(n).unwrap()).collect();
        let (b, c) = (base.violation_steps(&idx, 0.95, 1.05), coord.violation_steps(&idx, 0.95, 1.05));
        assert!(b > 0, "the schedule must create a conflict");
        // The raw estimator without a fitted corrector is too coarse to
        // clear every step, but the depth of the violations must shrink.
        assert!(c <= b, "{c} vs {b}");
        let (mb, mc) = (base.max_violation(&idx, 0.95, 1.05), coord.max_violation(&idx, 0.95, 1.05));
        assert!(mc < 0.6 * mb, "{mc} vs {mb}");
        // Coordinated actions never exceed the rated power.
        assert!(coord.rows.iter().all(|r| r.a_star.abs() <= 60_000.0 + 1e-6));
    }

    #[test]
    fn invalid_setups_are_rejected() {
        let (net, profile) = setup(1);
        let agents = vec![agent("R9", vec![0.0], 3e6), agent("R14", vec![0.0], 3e6)];
        let mut cfg = uncoordinated(2);
        cfg.neighborhoods = vec![vec![0]];
        assert!(run_online(&net, &profile, &agents, &[], &cfg).is_err());
        cfg.neighborhoods = vec![vec![0, 1], vec![1]];
        assert!(run_online(&net, &profile, &agents, &[], &cfg).is_err());
        let mut cfg = uncoordinated(2);
        cfg.coordinate = true;
        assert!(run_online(&net, &profile, &agents, &[], &cfg).is_err());
        let mut cfg = uncoordinated(2);
        cfg.beta = 1.5;
        assert_eq!(run_online(&net, &profile, &agents, &[], &cfg).unwrap_err(), CoordinationError::InvalidBeta(1.5));
        let empty = vec![agent("R9", vec![], 3e6)];
        assert!(run_online(&net, &profile, &empty, &[], &uncoordinated(1)).is_err());
    }

    #[test]
    fn csv_headers() {
        let (net, profile) = setup(1);
        let log = run_online(&net, &profile, &[agent("R9", vec![0.0], 3e6)], &[], &uncoordinated(1)).unwrap();
        let csv = episode_log_csv(&log);
        assert!(csv.starts_with("t,node,a_intended,a_tilde,a_star,V_true,V_tilde,violation_flag,infeasible_flag\n"));
        assert_eq!(csv.lines().count(), 1 + profile.len());
        let sweep = beta_sweep_csv(&[BetaSweepRow { beta: 0.5, agents: 3, violation_steps: 2, max_violation: 0.01 }]);
        assert_eq!(sweep, "beta,agents,violation_steps,max_violation\n0.5,3,2,0.01\n");
    }
}
