use super::{reward_central, reward_local, Env, EnvStep, RewardConfig, StepInfo};
use crate::assets::{step_soc, EssSpec, EssState, LoadProfile};
use crate::grid::{pf_tan, solve_sweep, Network, NodeInjection};
use crate::thevenin::{LocalPipeline, MeterRecord, PipelineState, StepInputs};

/// `[P^D_t, P^D_{t−1}, SOC, Ṽ⁰_t, Ṽ_{t−1}, Ṽ_{t−2}, time of day]`, with
/// powers in units of the rated power and voltages as `(V − 1)·20`.
pub const LOCAL_STATE_DIM: usize = 7;

const SOC_START: f64 = 0.5;

fn volt_feature(v: f64) -> f64 {
    (v - 1.0) * 20.0
}

/// Single-node environment driven by the local estimator only.
///
/// The measurement window of the estimator is fed from metered records of
/// the uncontrolled node; the action enters through the estimator inputs.
/// Each episode is one day; `reset` moves to the next day in the records.
#[derive(Debug, Clone)]
pub struct LocalEnv {
    pipeline: LocalPipeline,
    records: Vec<MeterRecord>,
    spec: EssSpec,
    reward: RewardConfig,
    s_base: f64,
    steps_per_day: usize,
    day: usize,
    t: usize,
    day_end: usize,
    soc: EssState,
    window: PipelineState,
    v_lag1: f64,
    v_lag2: f64,
    forecast: f64,
    started: bool,
}

impl LocalEnv {
    /// `records` must hold at least one whole day; `s_base` converts the
    /// ESS ratings (watts) into the per-unit system of the records.
    pub fn new(
        pipeline: LocalPipeline,
        records: Vec<MeterRecord>,
        spec: EssSpec,
        reward: RewardConfig,
        s_base: f64,
        steps_per_day: usize,
    ) -> Self {
        assert!(steps_per_day >= 3 && records.len() >= steps_per_day, "need at least one whole day of records");
        let window = PipelineState::from_records(&records[0], &records[1]);
        let soc = EssState { soc: SOC_START.clamp(spec.soc_min, spec.soc_max) };
        Self {
            pipeline,
            records,
            spec,
            reward,
            s_base,
            steps_per_day,
            day: 0,
            t: 2,
            day_end: steps_per_day,
            soc,
            window,
            v_lag1: 1.0,
            v_lag2: 1.0,
            forecast: 1.0,
            started: false,
        }
    }

    pub fn days(&self) -> usize {
        self.records.len() / self.steps_per_day
    }

    pub fn current_day(&self) -> usize {
        self.day
    }

    pub fn soc(&self) -> f64 {
        self.soc.soc
    }

    fn p_rated_pu(&self) -> f64 {
        self.spec.p_max / self.s_base
    }

    fn inputs(&self, action_w: f64) -> StepInputs {
        let r = &self.records[self.t];
        let p = action_w / self.s_base;
        StepInputs { action_p: p, action_q: p * pf_tan(self.spec.pf), p_demand: r.p_demand, q_demand: r.q_demand }
    }

    fn observe(&mut self) -> Vec<f64> {
        let (est, _) = self.pipeline.estimate(&self.window, &self.inputs(0.0));
        self.forecast = est.v_tilde;
        let r = &self.records[self.t];
        let prev = &self.records[self.t - 1];
        let scale = self.p_rated_pu();
        vec![
            r.p_demand / scale,
            prev.p_demand / scale,
            self.soc.soc,
            volt_feature(self.forecast),
            volt_feature(self.v_lag1),
            volt_feature(self.v_lag2),
            (self.t % self.steps_per_day) as f64 / self.steps_per_day as f64,
        ]
    }

    /// Moves to the start of `day` without touching the SOC.
    pub fn start_day(&mut self, day: usize) -> Vec<f64> {
        let days = self.days();
        self.day = day % days;
        let first = (self.day * self.steps_per_day).max(2);
        self.t = first;
        self.day_end = (self.day + 1) * self.steps_per_day;
        self.window = PipelineState::from_records(&self.records[first - 2], &self.records[first - 1]);
        self.v_lag1 = self.records[first - 1].v_true;
        self.v_lag2 = self.records[first - 2].v_true;
        self.observe()
    }

    pub fn set_soc(&mut self, soc: f64) {
        self.soc = EssState { soc: soc.clamp(self.spec.soc_min, self.spec.soc_max) };
    }
}

impl Env for LocalEnv {
    fn state_dim(&self) -> usize {
        LOCAL_STATE_DIM
    }

    fn action_bounds(&self) -> (f64, f64) {
        (self.spec.p_min, self.spec.p_max)
    }

    fn reset(&mut self) -> Vec<f64> {
        let next = if self.started { self.day + 1 } else { 0 };
        self.started = true;
        self.start_day(next)
    }

    fn begin_rollout(&mut self) {
        self.set_soc(SOC_START);
    }

    fn step(&mut self, action_w: f64) -> EnvStep {
        let (soc, applied) = step_soc(&self.spec, self.soc, action_w);
        self.soc = soc;
        let (est, carried) = self.pipeline.estimate(&self.window, &self.inputs(applied));
        let v = est.v_tilde;
        let reward = reward_local(v, applied.abs() / self.spec.p_max, &self.reward);
        let record = self.records[self.t];
        self.window = carried.push_record(&record);
        self.v_lag2 = self.v_lag1;
        self.v_lag1 = v;
        self.t += 1;
        let done = self.t >= self.day_end;
        let state = if done {
            // Terminal observation; its value is never bootstrapped.
            vec![0.0; LOCAL_STATE_DIM]
        } else {
            self.observe()
        };
        EnvStep {
            state,
            reward,
            done,
            info: StepInfo {
                applied_w: applied,
                soc: self.soc.soc,
                voltage: v,
                violation: !self.reward.in_relaxed_band(v),
                nonconverged: false,
            },
        }
    }
}

/// Which reward the centralised environment pays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentralReward {
    /// Feeder-wide reward over every non-slack voltage.
    Central,
    /// The local reward evaluated on the true voltage at the ESS node.
    LocalOnTrueVoltage,
}

/// Single ESS controlled with full power-flow visibility of the feeder.
#[derive(Debug, Clone)]
pub struct CentralEnv {
    net: Network,
    profile: LoadProfile,
    spec: EssSpec,
    node: usize,
    kind: CentralReward,
    reward: RewardConfig,
    day: usize,
    t: usize,
    day_end: usize,
    soc: EssState,
    base_voltages: Vec<f64>,
    started: bool,
}

impl CentralEnv {
    pub fn new(
        net: Network,
        profile: LoadProfile,
        spec: EssSpec,
        kind: CentralReward,
        reward: RewardConfig,
    ) -> Result<Self, crate::grid::GridError> {
        let node = net.index_of(&spec.node)?;
        assert!(profile.len() >= profile.steps_per_day(), "need at least one whole day of profile");
        let soc = EssState { soc: SOC_START.clamp(spec.soc_min, spec.soc_max) };
        Ok(Self {
            net,
            profile,
            spec,
            node,
            kind,
            reward,
            day: 0,
            t: 0,
            day_end: 0,
            soc,
            base_voltages: Vec::new(),
            started: false,
        })
    }

    fn solve(&self, p_b: f64) -> Option<Vec<f64>> {
        let mut inj: Vec<NodeInjection> = self.profile.injections(&self.net, self.t);
        inj[self.node] = inj[self.node].with_ess(p_b, self.spec.pf);
        solve_sweep(&self.net, &inj).ok().filter(|s| s.converged).map(|s| s.v)
    }

    fn non_slack(&self, v: &[f64]) -> Vec<f64> {
        let slack = self.net.slack();
        v.iter().enumerate().filter(|(i, _)| *i != slack).map(|(_, &x)| x).collect()
    }

    fn observe(&mut self) -> Vec<f64> {
        let n = self.net.node_count();
        self.base_voltages = self.solve(0.0).unwrap_or_else(|| vec![1.0; n]);
        let mut s = vec![self.soc.soc];
        s.extend(self.non_slack(&self.base_voltages).into_iter().map(volt_feature));
        s
    }

    pub fn start_day(&mut self, day: usize) -> Vec<f64> {
        let spd = self.profile.steps_per_day();
        self.day = day % self.profile.days().max(1);
        self.t = self.day * spd;
        self.day_end = self.t + spd;
        self.observe()
    }
}

impl Env for CentralEnv {
    fn state_dim(&self) -> usize {
        self.net.node_count()
    }

    fn action_bounds(&self) -> (f64, f64) {
        (self.spec.p_min, self.spec.p_max)
    }

    fn reset(&mut self) -> Vec<f64> {
        let next = if self.started { self.day + 1 } else { 0 };
        self.started = true;
        self.start_day(next)
    }

    fn begin_rollout(&mut self) {
        self.soc = EssState { soc: SOC_START.clamp(self.spec.soc_min, self.spec.soc_max) };
    }

    fn step(&mut self, action_w: f64) -> EnvStep {
        let (soc, applied) = step_soc(&self.spec, self.soc, action_w);
        self.soc = soc;
        let power = applied.abs() / self.spec.p_max;
        let solved = self.solve(applied);
        let nonconverged = solved.is_none();
        let v = solved.unwrap_or_else(|| self.base_voltages.clone());
        let v_node = v[self.node];
        let reward = if nonconverged {
            -self.reward.penalty
        } else {
            match self.kind {
                CentralReward::Central => reward_central(&self.non_slack(&v), power, &self.reward),
                CentralReward::LocalOnTrueVoltage => reward_local(v_node, power, &self.reward),
            }
        };
        let violation = self.non_slack(&v).iter().any(|&x| x < self.reward.v_min || x > self.reward.v_max);
        self.t += 1;
        let done = nonconverged || self.t >= self.day_end || self.t >= self.profile.len();
        let state = if done { vec![0.0; self.state_dim()] } else { self.observe() };
        EnvStep {
            state,
            reward,
            done,
            info: StepInfo { applied_w: applied, soc: self.soc.soc, voltage: v_node, violation, nonconverged },
        }
    }
}

/// One-step problem with a known optimum at `0.3·P̄`: the reward is
/// `−|a − 0.3·P̄| / P̄`.
#[derive(Debug, Clone)]
pub struct BanditEnv {
    pub p_rated: f64,
}

impl BanditEnv {
    pub fn new(p_rated: f64) -> Self {
        Self { p_rated }
    }

    pub fn optimum(&self) -> f64 {
        0.3 * self.p_rated
    }
}

impl Env for BanditEnv {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> (f64, f64) {
        (-self.p_rated, self.p_rated)
    }

    fn reset(&mut self) -> Vec<f64> {
        vec![1.0]
    }

    fn step(&mut self, action_w: f64) -> EnvStep {
        let reward = -(action_w - self.optimum()).abs() / self.p_rated;
        EnvStep {
            state: vec![1.0],
            reward,
            done: true,
            info: StepInfo { applied_w: action_w, ..Default::default() },
        }
    }
}
