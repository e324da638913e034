//! Assembly of the feeder, profiles, ESS fleet and the trained components
//! used by every command.

use voltreg_core::approx::TrainConfig;
use voltreg_core::assets::{load_profiles, synthetic_profile, EssSpec, LoadProfile, SyntheticProfileConfig};
use voltreg_core::coordination::{
    fit_sensitivity, run_online, surrogate_samples, Dither, OnlineAgent, OnlineConfig, OnlineLog,
    SensitivitySurrogate, StepConfig, SurrogateConfig, SurrogateFitReport,
};
use voltreg_core::grid::topology::{cigre_lv_residential, read_topology};
use voltreg_core::grid::{Network, NodeKind};
use voltreg_core::rl::{
    train_agent, CentralEnv, CentralReward, LocalEnv, PpoConfig, RewardConfig, TrainedAgent,
};
use voltreg_core::thevenin::{
    fit_pipeline, simulate_node_history, ActionSource, CorrectorConfig, LocalPipeline, MeterRecord,
    PipelineConfig, PipelineFitReport, TheveninError,
};

use crate::config::ExperimentConfig;
use crate::AppError;

/// Stream identifiers for derived seeds.
#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    Profile = 1,
    History = 2,
    Encoder = 3,
    Agent = 4,
    Dither = 5,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: ExperimentConfig,
    pub net: Network,
    pub profile: LoadProfile,
    pub train: LoadProfile,
    pub test: LoadProfile,
    pub specs: Vec<EssSpec>,
}

impl Scenario {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self, AppError> {
        cfg.validate()?;
        let net = match &cfg.network.topology_path {
            Some(p) => read_topology(p).map_err(|e| AppError::Config(format!("{}: {e}", p.display())))?,
            None => cigre_lv_residential(),
        };
        let net = net.with_slack_voltage(cfg.network.slack_voltage_pu);
        let load_ids: Vec<String> =
            net.nodes().iter().filter(|n| n.kind == NodeKind::Load).map(|n| n.id.clone()).collect();
        let raw = match &cfg.profile.path {
            Some(p) => load_profiles(p).map_err(|e| AppError::Config(format!("{}: {e}", p.display())))?,
            None => {
                let p = &cfg.profile;
                let syn = SyntheticProfileConfig {
                    days: p.days,
                    resolution_min: p.resolution_min,
                    peak_w: (p.peak_min_kw * 1e3, p.peak_max_kw * 1e3),
                    day_spread: p.day_spread,
                    noise: p.noise,
                    pv_peak_w: p.pv_peak_kw * 1e3,
                    ..Default::default()
                };
                synthetic_profile(&load_ids, &syn, derive_seed(cfg.seed, SeedStream::Profile, 0))
            }
        };
        let profile = raw.scaled(cfg.profile.load_scale);
        let days = profile.days();
        if days <= cfg.profile.test_days {
            return Err(AppError::Config(format!(
                "profile: {days} whole days cannot hold {} test days plus training",
                cfg.profile.test_days
            )));
        }
        let train_days = days - cfg.profile.test_days;
        let train = profile.days_slice(0, train_days);
        let test = profile.days_slice(train_days, cfg.profile.test_days);
        let dt_h = profile.dt_hours();
        let mut specs = Vec::new();
        for node in &cfg.ess.nodes {
            net.index_of(node).map_err(|e| AppError::Config(format!("ess: {e}")))?;
            let mut spec = EssSpec::new(node.clone(), cfg.ess.p_max_kw * 1e3, cfg.ess.e_rated_kwh * 1e3, dt_h);
            spec.soc_min = cfg.ess.soc_min;
            spec.soc_max = cfg.ess.soc_max;
            spec.pf = cfg.ess.power_factor;
            spec.validate().map_err(|e| AppError::Config(e.to_string()))?;
            specs.push(spec);
        }
        Ok(Self { cfg: cfg.clone(), net, profile, train, test, specs })
    }

    pub fn spec(&self, node: &str) -> Result<&EssSpec, AppError> {
        self.specs
            .iter()
            .find(|s| s.node == node)
            .ok_or_else(|| AppError::Config(format!("no ESS at {node}")))
    }

    pub fn ess_index(&self, node: &str) -> usize {
        self.specs.iter().position(|s| s.node == node).expect("validated node")
    }

    pub fn s_base(&self) -> f64 {
        self.net.base().s_base
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            v_min: self.cfg.band.v_min_pu,
            v_max: self.cfg.band.v_max_pu,
            relax_low: self.cfg.rl.relax_low_pu,
            relax_high: self.cfg.rl.relax_high_pu,
            penalty: self.cfg.rl.penalty,
            price: self.cfg.rl.price_per_rated,
            ..Default::default()
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        let r = &self.cfg.rl;
        PpoConfig {
            gamma: r.gamma,
            clip: r.clip,
            policy_lr: r.policy_lr,
            value_lr: r.value_lr,
            epochs: r.epochs,
            minibatch: r.minibatch,
            rollout_len: r.rollout_steps,
            gae: r.gae,
            ..Default::default()
        }
    }

    pub fn pipeline_config(&self, node_idx: usize) -> PipelineConfig {
        let e = &self.cfg.estimator;
        PipelineConfig {
            corrector: CorrectorConfig {
                v_low: e.corrector_v_low_pu,
                v_high: e.corrector_v_high_pu,
                order: e.corrector_order,
                ..Default::default()
            },
            train: TrainConfig {
                lr: e.encoder_lr,
                epochs: e.encoder_epochs,
                batch_size: e.batch_size,
                seed: derive_seed(self.cfg.seed, SeedStream::Encoder, node_idx),
            },
            train_fraction: e.train_fraction,
            ..Default::default()
        }
    }

    pub fn step_config(&self) -> StepConfig {
        let c = &self.cfg.coordination;
        StepConfig {
            v_min: self.cfg.band.v_min_pu,
            v_max: self.cfg.band.v_max_pu,
            trust_radius: c.trust_radius_frac,
            max_iter: c.max_iter,
            penalty: c.penalty_weight,
            margin: c.band_margin_pu,
            ..Default::default()
        }
    }

    /// Metered history at the ESS node with random actions over the last
    /// `history_days` training days.
    pub fn estimator_history(&self, spec: &EssSpec) -> Result<Vec<MeterRecord>, AppError> {
        let days = self.train.days();
        let n = self.cfg.estimator.history_days.clamp(1, days);
        let slice = self.train.days_slice(days - n, n);
        let idx = self.ess_index(&spec.node);
        let actions = ActionSource::Random { idle_fraction: self.cfg.estimator.idle_fraction };
        Ok(simulate_node_history(&self.net, &slice, spec, &actions, derive_seed(self.cfg.seed, SeedStream::History, idx))?)
    }

    pub fn fit_estimator(&self, spec: &EssSpec) -> Result<(LocalPipeline, PipelineFitReport), AppError> {
        let history = self.estimator_history(spec)?;
        let cfg = self.pipeline_config(self.ess_index(&spec.node));
        fit_pipeline(&history, &cfg).map_err(|e| match e {
            TheveninError::Underdetermined => {
                AppError::Config(format!("{}: history too short for the corrector: {e}", spec.node))
            }
            _ => AppError::Numerical(format!("{}: {e}", spec.node)),
        })
    }

    /// Uncontrolled meter records at the ESS node.
    pub fn idle_records(&self, spec: &EssSpec, profile: &LoadProfile) -> Result<Vec<MeterRecord>, AppError> {
        Ok(simulate_node_history(&self.net, profile, spec, &ActionSource::Idle, 0)?)
    }

    pub fn local_env(&self, spec: &EssSpec, pipeline: LocalPipeline) -> Result<LocalEnv, AppError> {
        let records = self.idle_records(spec, &self.train)?;
        Ok(LocalEnv::new(
            pipeline,
            records,
            spec.clone(),
            self.reward_config(),
            self.s_base(),
            self.train.steps_per_day(),
        ))
    }

    pub fn central_env(&self, spec: &EssSpec, kind: CentralReward) -> Result<CentralEnv, AppError> {
        Ok(CentralEnv::new(self.net.clone(), self.train.clone(), spec.clone(), kind, self.reward_config())?)
    }

    fn agent_seed(&self, spec: &EssSpec) -> u64 {
        derive_seed(self.cfg.seed, SeedStream::Agent, self.ess_index(&spec.node))
    }

    pub fn train_local(&self, spec: &EssSpec, pipeline: LocalPipeline) -> Result<TrainedAgent, AppError> {
        let mut env = self.local_env(spec, pipeline)?;
        train_agent(&mut env, &self.ppo_config(), self.cfg.rl.updates, self.agent_seed(spec))
            .map_err(|e| AppError::Numerical(format!("{}: {e}", spec.node)))
    }

    pub fn train_central(&self, spec: &EssSpec, kind: CentralReward) -> Result<TrainedAgent, AppError> {
        let mut env = self.central_env(spec, kind)?;
        train_agent(&mut env, &self.ppo_config(), self.cfg.rl.updates, self.agent_seed(spec))
            .map_err(|e| AppError::Numerical(format!("{}: {e}", spec.node)))
    }

    pub fn online_config(&self, beta: f64, coordinate: bool, neighborhoods: Vec<Vec<usize>>) -> OnlineConfig {
        OnlineConfig {
            beta,
            neighborhoods,
            coordinate,
            guard: true,
            step: self.step_config(),
            soc_init: self.cfg.ess.soc_init,
            dither: None,
        }
    }

    /// Fits one surrogate per neighbourhood from an uncoordinated, dithered
    /// run over the last `surrogate_days` training days.
    pub fn fit_surrogates(
        &self,
        agents: &[OnlineAgent],
        neighborhoods: &[Vec<usize>],
    ) -> Result<Vec<(SensitivitySurrogate, SurrogateFitReport)>, AppError> {
        let days = self.train.days();
        let n = self.cfg.coordination.surrogate_days.clamp(1, days);
        let slice = self.train.days_slice(days - n, n);
        let mut cfg = self.online_config(1.0, false, neighborhoods.to_vec());
        cfg.guard = false;
        cfg.dither = Some(Dither {
            probability: self.cfg.coordination.dither_probability,
            seed: derive_seed(self.cfg.seed, SeedStream::Dither, 0),
        });
        let log = run_online(&self.net, &slice, agents, &[], &cfg)?;
        let sur_cfg = SurrogateConfig { degree: self.cfg.coordination.surrogate_degree, ..Default::default() };
        neighborhoods
            .iter()
            .map(|nb| {
                let members = nb.iter().map(|&i| agents[i].spec.node.clone()).collect();
                let scale = nb.iter().map(|&i| agents[i].spec.p_max).collect();
                Ok(fit_sensitivity(members, scale, &surrogate_samples(&log, nb), &sur_cfg)?)
            })
            .collect()
    }

    pub fn run_test(
        &self,
        agents: &[OnlineAgent],
        surrogates: &[SensitivitySurrogate],
        cfg: &OnlineConfig,
    ) -> Result<OnlineLog, AppError> {
        Ok(run_online(&self.net, &self.test, agents, surrogates, cfg)?)
    }

    /// Indices of every non-slack node.
    pub fn load_nodes(&self) -> Vec<usize> {
        let slack = self.net.slack();
        (0..self.net.node_count()).filter(|&i| i != slack).collect()
    }
}

/// Independent seed per stream and index, derived from the run seed.
pub fn derive_seed(seed: u64, stream: SeedStream, index: usize) -> u64 {
    let mut x = seed ^ ((stream as u64) << 56) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finaliser
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
