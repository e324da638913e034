//! The five pipelines and the run manifest that ties their outputs together.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voltreg_core::coordination::{
    beta_sweep_csv, episode_log_csv, BetaSweepRow, Controller, OnlineAgent, OnlineLog, SensitivitySurrogate,
};
use voltreg_core::grid::solve_sweep;
use voltreg_core::rl::{telemetry_csv, CentralReward, GaussianPolicy, TrainedAgent};
use voltreg_core::thevenin::{trace_csv, LocalPipeline, TraceRow};

use crate::config::{ControllerKind, ExperimentConfig};
use crate::scenario::Scenario;
use crate::AppError;

pub const MANIFEST: &str = "manifest.json";
/// Canonical copy of the configuration a run directory was produced with.
pub const CONFIG: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// Deterministic for a given config and seed.
    Metric,
    /// Contains wall-clock measurements.
    Timing,
    /// Model parameters.
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub kind: OutputKind,
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub outputs: Vec<OutputRecord>,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("voltreg-cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("voltreg-core".to_string(), voltreg_core::VERSION.to_string());
        Self { config_hash: config_hash(cfg), seed: cfg.seed, versions, stages: Vec::new(), outputs: Vec::new() }
    }

    pub fn load(dir: &Path) -> Result<Self, AppError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), AppError> {
        let text = serde_json::to_string_pretty(self).expect("serialisable manifest") + "\n";
        fs::write(dir.join(MANIFEST), text).map_err(|e| AppError::Io(e.to_string()))
    }

    /// Records a finished stage, replacing any earlier run of it.
    fn record(&mut self, stage: &str, wall_ms: f64, outputs: Vec<OutputRecord>) {
        self.stages.retain(|s| s.stage != stage);
        self.stages.push(StageRecord { stage: stage.to_string(), wall_ms });
        self.outputs.retain(|o| o.stage != stage && outputs.iter().all(|n| n.path != o.path));
        self.outputs.extend(outputs);
    }

    pub fn output(&self, path: &str) -> Option<&OutputRecord> {
        self.outputs.iter().find(|o| o.path == path)
    }
}

/// SHA-256 of the canonical TOML rendering, ignoring the output directory.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = PathBuf::new();
    hex::encode(Sha256::digest(c.to_toml().as_bytes()))
}

/// Collects the files a stage writes into the run directory.
struct Outputs {
    dir: PathBuf,
    stage: String,
    files: Vec<OutputRecord>,
}

impl Outputs {
    fn new(dir: &Path, stage: &str) -> Result<Self, AppError> {
        fs::create_dir_all(dir).map_err(|e| AppError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), stage: stage.to_string(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str, kind: OutputKind) -> Result<(), AppError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
        self.files.push(OutputRecord { path: name.to_string(), kind, stage: self.stage.clone() });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T, kind: OutputKind) -> Result<(), AppError> {
        let text = serde_json::to_string_pretty(value).expect("serialisable output");
        self.write(name, &(text + "\n"), kind)
    }
}

/// Runs one stage and merges its outputs into the directory's manifest. A
/// manifest from a different config or seed is replaced.
fn run_stage<F>(cfg: &ExperimentConfig, stage: &str, body: F) -> Result<RunManifest, AppError>
where
    F: FnOnce(&mut Outputs) -> Result<(), AppError>,
{
    let dir = &cfg.output_dir;
    let mut outputs = Outputs::new(dir, stage)?;
    let t0 = Instant::now();
    outputs.write(CONFIG, &cfg.to_toml(), OutputKind::Metric)?;
    body(&mut outputs)?;
    let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    let fresh = RunManifest::new(cfg);
    let mut manifest = match RunManifest::load(dir) {
        Ok(m) if m.config_hash == fresh.config_hash && m.seed == fresh.seed => m,
        _ => fresh,
    };
    manifest.record(stage, wall_ms, outputs.files);
    manifest.save(dir)?;
    Ok(manifest)
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeBaseline {
    pub node: String,
    pub v_min_pu: f64,
    pub v_max_pu: f64,
    pub violation_steps: usize,
    pub test_violation_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub steps: usize,
    pub steps_per_day: usize,
    /// First step of the held-out test days.
    pub test_offset: usize,
    pub nodes: Vec<NodeBaseline>,
}

/// Uncontrolled power flow over the whole horizon.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<RunManifest, AppError> {
    let sc = Scenario::build(cfg)?;
    run_stage(cfg, "simulate", |out| {
        let net = &sc.net;
        let s_kw = sc.s_base() / 1e3;
        let ids: Vec<&str> = net.nodes().iter().map(|n| n.id.as_str()).collect();
        let (v_min, v_max) = (cfg.band.v_min_pu, cfg.band.v_max_pu);
        let spd = sc.profile.steps_per_day();
        let test_offset = sc.train.len();
        let mut volts = format!("t,day,{}\n", ids.join(","));
        let mut flows = String::from("t,from,to,p_kw,q_kvar,loss_kw\n");
        let mut viol = String::from("t,node,v_pu,excess_pu\n");
        let mut nodes: Vec<NodeBaseline> = ids
            .iter()
            .map(|id| NodeBaseline {
                node: id.to_string(),
                v_min_pu: f64::INFINITY,
                v_max_pu: f64::NEG_INFINITY,
                violation_steps: 0,
                test_violation_steps: 0,
            })
            .collect();
        for t in 0..sc.profile.len() {
            let sol = solve_sweep(net, &sc.profile.injections(net, t))?;
            let _ = write!(volts, "{t},{}", t / spd);
            for (i, &v) in sol.v.iter().enumerate() {
                let _ = write!(volts, ",{v}");
                let nb = &mut nodes[i];
                nb.v_min_pu = nb.v_min_pu.min(v);
                nb.v_max_pu = nb.v_max_pu.max(v);
                if v < v_min || v > v_max {
                    nb.violation_steps += 1;
                    if t >= test_offset {
                        nb.test_violation_steps += 1;
                    }
                    let excess = if v < v_min { v - v_min } else { v - v_max };
                    let _ = writeln!(viol, "{t},{},{v},{excess}", ids[i]);
                }
            }
            volts.push('\n');
            for (b, (f, l)) in net.branches().iter().zip(sol.flows.iter().zip(&sol.losses)) {
                let _ = writeln!(
                    flows,
                    "{t},{},{},{},{},{}",
                    ids[b.parent],
                    ids[b.child],
                    f.p * s_kw,
                    f.q * s_kw,
                    l.p * s_kw
                );
            }
        }
        out.write("baseline_voltages.csv", &volts, OutputKind::Metric)?;
        out.write("baseline_flows.csv", &flows, OutputKind::Metric)?;
        out.write("baseline_violations.csv", &viol, OutputKind::Metric)?;
        let summary = BaselineSummary { steps: sc.profile.len(), steps_per_day: spd, test_offset, nodes };
        out.write_json("baseline_summary.json", &summary, OutputKind::Metric)
    })
}

// ---------------------------------------------------------- fit-correction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionErrors {
    pub node: String,
    pub steps: usize,
    pub rel_err1_p95: f64,
    pub rel_err2_p95: f64,
    /// Share of steps whose final estimate is within 2 % of the truth.
    pub within_2pct_final: f64,
    /// Share of steps whose piecewise-corrected estimate is within 5 %.
    pub within_5pct_piecewise: f64,
    pub validation_rmse: f64,
    pub validation_rmse_corrected: f64,
}

impl CorrectionErrors {
    pub fn from_trace(node: &str, rows: &[TraceRow], validation_rmse: f64, validation_rmse_corrected: f64) -> Self {
        let n = rows.len().max(1) as f64;
        let share = |f: &dyn Fn(&TraceRow) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / n;
        Self {
            node: node.to_string(),
            steps: rows.len(),
            rel_err1_p95: percentile(rows.iter().map(|r| r.rel_err1.abs()).collect(), 0.95),
            rel_err2_p95: percentile(rows.iter().map(|r| r.rel_err2.abs()).collect(), 0.95),
            within_2pct_final: share(&|r| r.rel_err2.abs() <= 0.02),
            within_5pct_piecewise: share(&|r| r.rel_err1.abs() <= 0.05),
            validation_rmse,
            validation_rmse_corrected,
        }
    }
}

/// Nearest-rank percentile; NaN for an empty sample.
pub fn percentile(mut xs: Vec<f64>, q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let rank = ((q * xs.len() as f64).ceil() as usize).clamp(1, xs.len());
    xs[rank - 1]
}

fn estimator_file(node: &str) -> String {
    format!("estimator_{node}.json")
}

fn agent_file(node: &str) -> String {
    format!("agent_{node}.json")
}

fn save_pipeline(out: &mut Outputs, node: &str, pipe: &LocalPipeline) -> Result<(), AppError> {
    out.write_json(&estimator_file(node), pipe, OutputKind::Checkpoint)?;
    if let Some(m) = &pipe.sensitivity {
        out.write(&format!("sensitivity_{node}.json"), &m.to_json(), OutputKind::Checkpoint)?;
    }
    Ok(())
}

/// Fits the per-node estimators and replays a no-control test day.
pub fn cmd_fit_correction(cfg: &ExperimentConfig) -> Result<RunManifest, AppError> {
    let sc = Scenario::build(cfg)?;
    run_stage(cfg, "fit-correction", |out| {
        let mut table = Vec::new();
        for spec in &sc.specs {
            let (pipe, report) = sc.fit_estimator(spec)?;
            save_pipeline(out, &spec.node, &pipe)?;
            let trace = pipe.trace(&sc.idle_records(spec, &sc.test)?);
            out.write(&format!("correction_trace_{}.csv", spec.node), &trace_csv(&trace), OutputKind::Metric)?;
            table.push(CorrectionErrors::from_trace(
                &spec.node,
                &trace,
                report.validation_rmse,
                report.validation_rmse_corrected,
            ));
        }
        let mut csv = String::from(
            "node,steps,rel_err1_p95,rel_err2_p95,within_2pct_final,within_5pct_piecewise,validation_rmse,validation_rmse_corrected\n",
        );
        for r in &table {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                r.node,
                r.steps,
                r.rel_err1_p95,
                r.rel_err2_p95,
                r.within_2pct_final,
                r.within_5pct_piecewise,
                r.validation_rmse,
                r.validation_rmse_corrected
            );
        }
        out.write("correction_errors.csv", &csv, OutputKind::Metric)
    })
}

/// Estimators from an earlier `fit-correction` in the same run directory,
/// fitted afresh where missing.
fn load_or_fit_pipelines(sc: &Scenario, out: &mut Outputs) -> Result<Vec<LocalPipeline>, AppError> {
    sc.specs
        .iter()
        .map(|spec| {
            let path = sc.cfg.output_dir.join(estimator_file(&spec.node));
            match fs::read_to_string(&path) {
                Ok(text) => serde_json::from_str(&text)
                    .map_err(|e| AppError::Io(format!("{}: {e}", path.display()))),
                Err(_) => {
                    let (pipe, _) = sc.fit_estimator(spec)?;
                    save_pipeline(out, &spec.node, &pipe)?;
                    Ok(pipe)
                }
            }
        })
        .collect()
}

// ------------------------------------------------------------------- train

/// Convergence summary of a reward curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub updates: usize,
    pub window: usize,
    pub initial_smoothed: f64,
    pub final_smoothed: f64,
    /// Mean of the window before the last one.
    pub previous_smoothed: f64,
    /// Final window better than the first and within 10 % of the one before.
    pub converged: bool,
}

impl CurveSummary {
    pub fn of(curve: &[f64]) -> Self {
        let n = curve.len();
        let window = (n / 10).max(5).min(n / 2).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        let initial = mean(&curve[..window.min(n)]);
        let last = mean(&curve[n.saturating_sub(window)..]);
        let prev = mean(&curve[n.saturating_sub(2 * window)..n.saturating_sub(window)]);
        let converged = n >= 2 * window && last > initial && (last - prev).abs() <= 0.1 * last.abs();
        Self { updates: n, window, initial_smoothed: initial, final_smoothed: last, previous_smoothed: prev, converged }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingComparison {
    pub node: String,
    pub local: CurveSummary,
    pub central: CurveSummary,
    /// |local − central| / |central| of the final smoothed rewards.
    pub relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTiming {
    pub node: String,
    pub local_ms_per_update: f64,
    pub central_ms_per_update: f64,
    pub local_over_central: f64,
}

pub fn mean_wall_ms(agent: &TrainedAgent) -> f64 {
    agent.records.iter().map(|r| r.wall_ms()).sum::<f64>() / agent.records.len().max(1) as f64
}

fn reward_csv(curve: &[f64]) -> String {
    let mut s = String::from("update,mean_reward\n");
    for (i, r) in curve.iter().enumerate() {
        let _ = writeln!(s, "{i},{r}");
    }
    s
}

/// Trains one local-environment agent per ESS and, for the comparison
/// node, a second agent with full power-flow visibility.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunManifest, AppError> {
    let sc = Scenario::build(cfg)?;
    run_stage(cfg, "train", |out| {
        let pipelines = load_or_fit_pipelines(&sc, out)?;
        let mut local_cmp = None;
        for (spec, pipe) in sc.specs.iter().zip(pipelines) {
            let agent = sc.train_local(spec, pipe)?;
            out.write(&agent_file(&spec.node), &agent.policy.to_json(), OutputKind::Checkpoint)?;
            out.write(&format!("reward_local_{}.csv", spec.node), &reward_csv(&agent.reward_curve()), OutputKind::Metric)?;
            out.write(&format!("telemetry_local_{}.csv", spec.node), &telemetry_csv(&agent.records), OutputKind::Timing)?;
            if spec.node == cfg.rl.compare_node {
                local_cmp = Some(agent);
            }
        }
        let node = &cfg.rl.compare_node;
        let local = local_cmp.expect("compare node validated");
        let central = sc.train_central(sc.spec(node)?, CentralReward::LocalOnTrueVoltage)?;
        out.write(&format!("reward_central_{node}.csv"), &reward_csv(&central.reward_curve()), OutputKind::Metric)?;
        out.write(&format!("telemetry_central_{node}.csv"), &telemetry_csv(&central.records), OutputKind::Timing)?;
        let (l, c) = (CurveSummary::of(&local.reward_curve()), CurveSummary::of(&central.reward_curve()));
        let relative_gap = (l.final_smoothed - c.final_smoothed).abs() / c.final_smoothed.abs();
        let cmp = TrainingComparison { node: node.clone(), local: l, central: c, relative_gap };
        out.write_json("training_comparison.json", &cmp, OutputKind::Metric)?;
        let (lm, cm) = (mean_wall_ms(&local), mean_wall_ms(&central));
        let timing = TrainingTiming {
            node: node.clone(),
            local_ms_per_update: lm,
            central_ms_per_update: cm,
            local_over_central: lm / cm,
        };
        out.write_json("training_timing.json", &timing, OutputKind::Timing)
    })
}

// -------------------------------------------------------------- coordinate

/// Rated-power charging whenever the node's uncontrolled voltage on the
/// test day is below `threshold`, repeated daily.
pub fn peak_charging_schedule(sc: &Scenario, node: &str, threshold: f64) -> Result<Vec<f64>, AppError> {
    let spec = sc.spec(node)?;
    let idx = sc.net.index_of(node)?;
    (0..sc.test.steps_per_day())
        .map(|t| {
            let sol = solve_sweep(&sc.net, &sc.test.injections(&sc.net, t))?;
            Ok(if sol.v[idx] < threshold { spec.p_max } else { 0.0 })
        })
        .collect()
}

/// Deployed agents for the configured controller. Learned policies come
/// from an earlier `train` in the run directory, or are trained here.
fn online_agents(sc: &Scenario, out: &mut Outputs) -> Result<Vec<OnlineAgent>, AppError> {
    let pipelines = load_or_fit_pipelines(sc, out)?;
    sc.specs
        .iter()
        .zip(pipelines)
        .map(|(spec, pipeline)| {
            let controller = match sc.cfg.coordination.controller {
                ControllerKind::PeakCharging => Controller::Schedule(peak_charging_schedule(
                    sc,
                    &spec.node,
                    sc.cfg.coordination.peak_charging_below_pu,
                )?),
                ControllerKind::Learned => {
                    let path = sc.cfg.output_dir.join(agent_file(&spec.node));
                    let policy = match fs::read_to_string(&path) {
                        Ok(text) => GaussianPolicy::from_json(&text)
                            .map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?,
                        Err(_) => {
                            let agent = sc.train_local(spec, pipeline.clone())?;
                            out.write(&agent_file(&spec.node), &agent.policy.to_json(), OutputKind::Checkpoint)?;
                            agent.policy
                        }
                    };
                    Controller::Policy(policy)
                }
            };
            Ok(OnlineAgent { spec: spec.clone(), controller, pipeline })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeComparison {
    pub node: String,
    pub uncoordinated_violation_steps: usize,
    pub coordinated_violation_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinationSummary {
    pub beta: f64,
    pub agents: usize,
    pub test_offset: usize,
    pub dt_hours: f64,
    pub surrogate_validation_rmse: Vec<f64>,
    pub nodes: Vec<NodeComparison>,
    pub uncoordinated_violation_steps: usize,
    pub coordinated_violation_steps: usize,
    pub coordinated_max_violation: f64,
    pub infeasible_rows: usize,
    /// Violations at an ESS node whose applied power was not on a limit.
    pub unexplained_residual_rows: usize,
}

/// Violation steps per β, counted over every non-slack node.
pub fn beta_sweep(
    sc: &Scenario,
    agents: &[OnlineAgent],
    surrogates: &[SensitivitySurrogate],
    neighborhoods: &[Vec<usize>],
    betas: &[f64],
) -> Result<Vec<BetaSweepRow>, AppError> {
    let nodes = sc.load_nodes();
    let (lo, hi) = (sc.cfg.band.v_min_pu, sc.cfg.band.v_max_pu);
    betas
        .iter()
        .map(|&beta| {
            let log = sc.run_test(agents, surrogates, &sc.online_config(beta, true, neighborhoods.to_vec()))?;
            Ok(BetaSweepRow {
                beta,
                agents: agents.len(),
                violation_steps: log.violation_steps(&nodes, lo, hi),
                max_violation: log.max_violation(&nodes, lo, hi),
            })
        })
        .collect()
}

pub fn compare_logs(sc: &Scenario, uncoordinated: &OnlineLog, coordinated: &OnlineLog) -> Vec<NodeComparison> {
    let (lo, hi) = (sc.cfg.band.v_min_pu, sc.cfg.band.v_max_pu);
    sc.load_nodes()
        .into_iter()
        .map(|n| NodeComparison {
            node: sc.net.nodes()[n].id.clone(),
            uncoordinated_violation_steps: uncoordinated.node_violation_steps(n, lo, hi),
            coordinated_violation_steps: coordinated.node_violation_steps(n, lo, hi),
        })
        .collect()
}

/// Fits the surrogates, replays the test days with and without
/// coordination and optionally sweeps β.
pub fn cmd_coordinate(cfg: &ExperimentConfig, sweep: bool) -> Result<RunManifest, AppError> {
    let sc = Scenario::build(cfg)?;
    run_stage(cfg, "coordinate", |out| {
        let neighborhoods = cfg.neighborhood_indices()?;
        let agents = online_agents(&sc, out)?;
        let fits = sc.fit_surrogates(&agents, &neighborhoods)?;
        let mut fit_csv = String::from("neighborhood,members,train_rows,validation_rows,train_rmse,validation_rmse\n");
        for (k, (sur, rep)) in fits.iter().enumerate() {
            let _ = writeln!(
                fit_csv,
                "{k},{},{},{},{},{}",
                sur.members.join(" "),
                rep.train_rows,
                rep.validation_rows,
                rep.train_rmse,
                rep.validation_rmse
            );
            out.write_json(&format!("surrogate_{k}.json"), sur, OutputKind::Checkpoint)?;
        }
        out.write("surrogate_fit.csv", &fit_csv, OutputKind::Metric)?;
        let surrogate_validation_rmse = fits.iter().map(|f| f.1.validation_rmse).collect();
        let surrogates: Vec<SensitivitySurrogate> = fits.into_iter().map(|f| f.0).collect();

        let uncoordinated = sc.run_test(&agents, &surrogates, &sc.online_config(1.0, false, neighborhoods.clone()))?;
        let coordinated =
            sc.run_test(&agents, &surrogates, &sc.online_config(cfg.coordination.beta, true, neighborhoods.clone()))?;
        out.write("episode_uncoordinated.csv", &episode_log_csv(&uncoordinated), OutputKind::Metric)?;
        out.write("episode_coordinated.csv", &episode_log_csv(&coordinated), OutputKind::Metric)?;
        let nodes = compare_logs(&sc, &uncoordinated, &coordinated);
        let all = sc.load_nodes();
        let (lo, hi) = (cfg.band.v_min_pu, cfg.band.v_max_pu);
        let summary = CoordinationSummary {
            beta: cfg.coordination.beta,
            agents: agents.len(),
            test_offset: sc.train.len(),
            dt_hours: sc.test.dt_hours(),
            surrogate_validation_rmse,
            nodes,
            uncoordinated_violation_steps: uncoordinated.violation_steps(&all, lo, hi),
            coordinated_violation_steps: coordinated.violation_steps(&all, lo, hi),
            coordinated_max_violation: coordinated.max_violation(&all, lo, hi),
            infeasible_rows: coordinated.rows.iter().filter(|r| r.infeasible).count(),
            unexplained_residual_rows: coordinated.rows.iter().filter(|r| r.violation && !r.at_bound).count(),
        };
        out.write_json("coordination_summary.json", &summary, OutputKind::Metric)?;
        if sweep {
            let rows = beta_sweep(&sc, &agents, &surrogates, &neighborhoods, &cfg.coordination.beta_sweep)?;
            out.write("beta_sweep.csv", &beta_sweep_csv(&rows), OutputKind::Metric)?;
        }
        Ok(())
    })
}

// ------------------------------------------------------------------ report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    pub file: String,
    pub updates: usize,
    pub first: f64,
    pub last: f64,
    pub max: f64,
    pub final_smoothed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub node: String,
    pub baseline: usize,
    pub uncoordinated: usize,
    pub coordinated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<String>,
    /// Test-window violation steps per node, when simulate and coordinate ran.
    pub violations: Vec<ViolationReport>,
    pub baseline_violation_steps: Option<usize>,
    pub controlled_violation_steps: Option<usize>,
    /// Controlled minus baseline; never positive for an effective controller.
    pub violation_delta: Option<i64>,
    /// Energy throughput of the coordinated ESS fleet, kWh.
    pub energy_throughput_kwh: Option<f64>,
    pub rewards: Vec<RewardStats>,
}

/// Rows of a comma-separated file without quoting, header removed.
fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), AppError> {
    let text = fs::read_to_string(path).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().split(',').map(str::to_string).collect();
    Ok((header, lines.filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_string).collect()).collect()))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize, AppError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| AppError::Io(format!("{}: missing column {name}", path.display())))
}

fn num(s: &str, path: &Path) -> Result<f64, AppError> {
    s.parse().map_err(|_| AppError::Io(format!("{}: bad number {s:?}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, AppError> {
    let text = fs::read_to_string(path).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

/// Per-node violation steps recorded in an episode log.
fn episode_violations(path: &Path, node_ids: &[String]) -> Result<Vec<usize>, AppError> {
    let (header, rows) = read_rows(path)?;
    let (t_col, n_col, v_col) = (column(&header, "t", path)?, column(&header, "node", path)?, column(&header, "violation_flag", path)?);
    let mut counts = vec![0; node_ids.len()];
    let mut seen = std::collections::BTreeSet::new();
    for r in rows {
        if r[v_col] == "1" || r[v_col] == "true" {
            if let Some(i) = node_ids.iter().position(|n| *n == r[n_col]) {
                if seen.insert((r[t_col].clone(), i)) {
                    counts[i] += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// Summarises whatever stages have run in `dir`.
pub fn cmd_report(dir: &Path) -> Result<ReportSummary, AppError> {
    let t0 = Instant::now();
    let mut manifest = RunManifest::load(dir)
        .map_err(|_| AppError::Config(format!("{} holds no run manifest; run a pipeline first", dir.display())))?;
    let (v_lo, v_hi) = {
        let cfg = ExperimentConfig::load(&dir.join(CONFIG))?;
        (cfg.band.v_min_pu, cfg.band.v_max_pu)
    };
    let mut summary = ReportSummary {
        config_hash: manifest.config_hash.clone(),
        seed: manifest.seed,
        stages: manifest.stages.iter().map(|s| s.stage.clone()).collect(),
        violations: Vec::new(),
        baseline_violation_steps: None,
        controlled_violation_steps: None,
        violation_delta: None,
        energy_throughput_kwh: None,
        rewards: Vec::new(),
    };

    let mut csv_out = Vec::new();
    if manifest.output("baseline_summary.json").is_some() && manifest.output("coordination_summary.json").is_some() {
        let baseline: BaselineSummary = read_json(&dir.join("baseline_summary.json"))?;
        let coord: CoordinationSummary = read_json(&dir.join("coordination_summary.json"))?;
        for nc in &coord.nodes {
            let base = baseline.nodes.iter().find(|b| b.node == nc.node).map_or(0, |b| b.test_violation_steps);
            summary.violations.push(ViolationReport {
                node: nc.node.clone(),
                baseline: base,
                uncoordinated: nc.uncoordinated_violation_steps,
                coordinated: nc.coordinated_violation_steps,
            });
        }
        // Step counts over all monitored nodes, recomputed from the traces.
        let volts = dir.join("baseline_voltages.csv");
        let (header, rows) = read_rows(&volts)?;
        let monitored: Vec<usize> = coord
            .nodes
            .iter()
            .map(|n| column(&header, &n.node, &volts))
            .collect::<Result<_, _>>()?;
        let t_col = column(&header, "t", &volts)?;
        let mut base_steps = 0;
        for r in &rows {
            if num(&r[t_col], &volts)? < coord.test_offset as f64 {
                continue;
            }
            let mut any = false;
            for &c in &monitored {
                let v = num(&r[c], &volts)?;
                any |= v < v_lo || v > v_hi;
            }
            base_steps += usize::from(any);
        }
        summary.baseline_violation_steps = Some(base_steps);
        summary.controlled_violation_steps = Some(coord.coordinated_violation_steps);
        summary.violation_delta = Some(coord.coordinated_violation_steps as i64 - base_steps as i64);

        let log = dir.join("episode_coordinated.csv");
        let (h, rows) = read_rows(&log)?;
        let a_col = column(&h, "a_star", &log)?;
        let mut kwh = 0.0;
        for r in &rows {
            kwh += num(&r[a_col], &log)?.abs() * coord.dt_hours / 1e3;
        }
        summary.energy_throughput_kwh = Some(kwh);
        let ids: Vec<String> = coord.nodes.iter().map(|n| n.node.clone()).collect();
        let logged = episode_violations(&log, &ids)?;
        let mut s = String::from("node,baseline,uncoordinated,coordinated,coordinated_at_ess\n");
        for (v, l) in summary.violations.iter().zip(logged) {
            let _ = writeln!(s, "{},{},{},{},{}", v.node, v.baseline, v.uncoordinated, v.coordinated, l);
        }
        csv_out.push(("violations_by_node.csv", s));
    }

    for o in manifest.outputs.iter().filter(|o| o.path.starts_with("reward_")) {
        let path = dir.join(&o.path);
        let (h, rows) = read_rows(&path)?;
        let c = column(&h, "mean_reward", &path)?;
        let curve: Vec<f64> = rows.iter().map(|r| num(&r[c], &path)).collect::<Result<_, _>>()?;
        if curve.is_empty() {
            continue;
        }
        summary.rewards.push(RewardStats {
            file: o.path.clone(),
            updates: curve.len(),
            first: curve[0],
            last: curve[curve.len() - 1],
            max: curve.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            final_smoothed: CurveSummary::of(&curve).final_smoothed,
        });
    }

    let mut out = Outputs::new(dir, "report")?;
    for (name, text) in csv_out {
        out.write(name, &text, OutputKind::Metric)?;
    }
    out.write_json("summary.json", &summary, OutputKind::Metric)?;
    manifest.record("report", t0.elapsed().as_secs_f64() * 1e3, out.files);
    manifest.save(dir)?;
    Ok(summary)
}
