use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Env, GaussianPolicy, RlError, ValueNet};
use crate::approx::{Adam, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub clip: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub rollout_len: usize,
    pub gae: bool,
    pub gae_lambda: f64,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            clip: 0.2,
            policy_lr: 3e-4,
            value_lr: 1e-3,
            epochs: 10,
            minibatch: 64,
            rollout_len: 384,
            gae: false,
            gae_lambda: 0.95,
            max_grad_norm: 0.5,
            hidden: vec![32, 32],
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(RlError::Config("gamma must lie in [0, 1]".into()));
        }
        if !(self.clip > 0.0) || self.epochs == 0 || self.minibatch == 0 || self.rollout_len == 0 {
            return Err(RlError::Config("clip, epochs, minibatch and rollout length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action_w: f64,
    /// Pre-squash Gaussian sample.
    pub u: f64,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub log_prob: f64,
    pub value: f64,
    /// Value estimate of `next_state`, used to bootstrap truncated tails.
    pub next_value: f64,
}

pub type Rollout = Vec<Transition>;

/// Returns `G_t` and advantages `A_t = G_t − V(S_t)`.
///
/// Plain discounted returns bootstrap from `next_value` only at the end of a
/// truncated rollout. With `gae` the advantage uses generalised advantage
/// estimation and the return is `A_t + V(S_t)`.
pub fn compute_targets(trans: &[Transition], cfg: &PpoConfig) -> (Vec<f64>, Vec<f64>) {
    let n = trans.len();
    let mut returns = vec![0.0; n];
    let mut adv = vec![0.0; n];
    if cfg.gae {
        let mut next_adv = 0.0;
        for i in (0..n).rev() {
            let tr = &trans[i];
            let live = if tr.done { 0.0 } else { 1.0 };
            let delta = tr.reward + cfg.gamma * live * tr.next_value - tr.value;
            let carry = if i + 1 < n { next_adv } else { 0.0 };
            adv[i] = delta + cfg.gamma * cfg.gae_lambda * live * carry;
            returns[i] = adv[i] + tr.value;
            next_adv = adv[i];
        }
    } else {
        let mut next_ret = 0.0;
        for i in (0..n).rev() {
            let tr = &trans[i];
            let tail = if tr.done {
                0.0
            } else if i + 1 == n {
                tr.next_value
            } else {
                next_ret
            };
            returns[i] = tr.reward + cfg.gamma * tail;
            adv[i] = returns[i] - tr.value;
            next_ret = returns[i];
        }
    }
    (returns, adv)
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)` and its derivative in `r`. The derivative
/// is zero whenever the clipped term is the smaller one.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if clipped < unclipped {
        (clipped, 0.0)
    } else {
        (unclipped, adv)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
}

/// Policy, value function and their optimiser state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy: GaussianPolicy,
    pub value: ValueNet,
    policy_opt: Adam,
    value_opt: Adam,
}

impl Learner {
    pub fn new(policy: GaussianPolicy, value: ValueNet, cfg: &PpoConfig) -> Self {
        let policy_opt = Adam::new(policy.mean.n_params() + 1, cfg.policy_lr);
        let value_opt = Adam::new(value.net.n_params(), cfg.value_lr);
        Self { policy, value, policy_opt, value_opt }
    }
}

fn clip_norm(g: &mut [f64], max_norm: f64) {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
}

/// One PPO update: `epochs` passes of minibatch steps on the clipped
/// surrogate (policy) and on `(V(S_t) − G_t)²` (value).
///
/// If any loss or gradient turns non-finite the learner is restored to its
/// state before the call and an error is returned.
pub fn ppo_update(
    learner: &mut Learner,
    trans: &[Transition],
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PpoStats, RlError> {
    if trans.is_empty() {
        return Err(RlError::Empty);
    }
    let backup = learner.clone();
    let result = update_inner(learner, trans, cfg, rng);
    if result.is_err() {
        *learner = backup;
    }
    result
}

fn update_inner(
    learner: &mut Learner,
    trans: &[Transition],
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PpoStats, RlError> {
    let (returns, raw_adv) = compute_targets(trans, cfg);
    let n = trans.len();
    let mean = raw_adv.iter().sum::<f64>() / n as f64;
    let std = (raw_adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64).sqrt();
    let adv: Vec<f64> = if std > 1e-8 {
        raw_adv.iter().map(|a| (a - mean) / std).collect()
    } else {
        raw_adv.clone()
    };

    let np = learner.policy.mean.n_params();
    let nv = learner.value.net.n_params();
    let mut gbuf_p = vec![0.0; np];
    let mut gbuf_v = vec![0.0; nv];
    let mut g_pol = vec![0.0; np + 1];
    let mut g_val = vec![0.0; nv];
    let mut flat = vec![0.0; np + 1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = PpoStats::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let last = epoch + 1 == cfg.epochs;
        let (mut pl, mut vl, mut clipped) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.minibatch) {
            g_pol.iter_mut().for_each(|g| *g = 0.0);
            g_val.iter_mut().for_each(|g| *g = 0.0);
            let inv_b = 1.0 / chunk.len() as f64;
            let sigma = learner.policy.log_std.exp();
            for &i in chunk {
                let tr = &trans[i];
                let mu = learner.policy.mean.value_and_grad(&tr.state, &mut gbuf_p);
                let lp = learner.policy.log_prob_at(mu, tr.u);
                let ratio = (lp - tr.log_prob).exp();
                let (surr, dsurr) = clipped_surrogate(ratio, adv[i], cfg.clip);
                pl -= surr;
                if (ratio - 1.0).abs() > cfg.clip {
                    clipped += 1;
                }
                // d(-surr)/d(logp) = -dsurr * ratio
                let dl_dlp = -dsurr * ratio * inv_b;
                if dl_dlp != 0.0 {
                    let z = (tr.u - mu) / sigma;
                    let dlp_dmu = z / sigma;
                    for (g, b) in g_pol[..np].iter_mut().zip(&gbuf_p) {
                        *g += dl_dlp * dlp_dmu * b;
                    }
                    g_pol[np] += dl_dlp * (z * z - 1.0);
                }
                let v = learner.value.net.value_and_grad(&tr.state, &mut gbuf_v);
                let err = v - returns[i];
                vl += err * err;
                for (g, b) in g_val.iter_mut().zip(&gbuf_v) {
                    *g += 2.0 * err * inv_b * b;
                }
            }
            if !pl.is_finite() || !vl.is_finite() || g_pol.iter().chain(&g_val).any(|g| !g.is_finite()) {
                return Err(RlError::NonFinite(format!("epoch {epoch}")));
            }
            clip_norm(&mut g_pol, cfg.max_grad_norm);
            clip_norm(&mut g_val, cfg.max_grad_norm);
            flat[..np].copy_from_slice(learner.policy.mean.params());
            flat[np] = learner.policy.log_std;
            learner.policy_opt.step(&mut flat, &g_pol);
            learner.policy.mean.params_mut().copy_from_slice(&flat[..np]);
            learner.policy.log_std = flat[np].clamp(-5.0, 2.0);
            learner.value_opt.step(learner.value.net.params_mut(), &g_val);
        }
        if last {
            stats.policy_loss = pl / n as f64;
            stats.value_loss = vl / n as f64;
            stats.clip_frac = clipped as f64 / n as f64;
        }
    }
    let mut kl = 0.0;
    for tr in trans {
        let mu = learner.policy.mean_u(&tr.state);
        kl += tr.log_prob - learner.policy.log_prob_at(mu, tr.u);
    }
    stats.approx_kl = kl / n as f64;
    if !stats.approx_kl.is_finite() {
        return Err(RlError::NonFinite("kl".into()));
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    pub mean_reward: f64,
    pub stats: PpoStats,
    pub rollout_ms: f64,
    pub update_ms: f64,
}

impl UpdateRecord {
    pub fn wall_ms(&self) -> f64 {
        self.rollout_ms + self.update_ms
    }
}

#[derive(Debug, Clone)]
pub struct TrainedAgent {
    pub policy: GaussianPolicy,
    pub value: ValueNet,
    pub records: Vec<UpdateRecord>,
}

impl TrainedAgent {
    pub fn reward_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_reward).collect()
    }
}

/// Collects `rollout_len` steps, runs [`ppo_update`], repeats `updates`
/// times. Deterministic for a fixed seed apart from the timing fields.
pub fn train_agent(
    env: &mut dyn Env,
    cfg: &PpoConfig,
    updates: usize,
    seed: u64,
) -> Result<TrainedAgent, RlError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = env.state_dim();
    let policy = GaussianPolicy::new(dim, &cfg.hidden, env.action_bounds(), seed.wrapping_add(1));
    let value = ValueNet::new(dim, &cfg.hidden, seed.wrapping_add(2));
    let mut learner = Learner::new(policy, value, cfg);
    let mut records = Vec::with_capacity(updates);

    for update in 0..updates {
        let t0 = Instant::now();
        env.begin_rollout();
        let mut state = env.reset();
        let mut trans = Vec::with_capacity(cfg.rollout_len);
        for _ in 0..cfg.rollout_len {
            let (action, u, log_prob) = learner.policy.sample(&state, &mut rng);
            let value = learner.value.value(&state);
            let step = env.step(action);
            let next_value = learner.value.value(&step.state);
            let done = step.done;
            trans.push(Transition {
                state: std::mem::take(&mut state),
                action_w: action,
                u,
                reward: step.reward,
                next_state: step.state.clone(),
                done,
                log_prob,
                value,
                next_value,
            });
            state = if done { env.reset() } else { step.state };
        }
        let rollout_ms = t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        let stats = ppo_update(&mut learner, &trans, cfg, &mut rng)?;
        let update_ms = t1.elapsed().as_secs_f64() * 1e3;
        let mean_reward = trans.iter().map(|t| t.reward).sum::<f64>() / trans.len() as f64;
        records.push(UpdateRecord { update, mean_reward, stats, rollout_ms, update_ms });
    }
    Ok(TrainedAgent { policy: learner.policy, value: learner.value, records })
}

/// Telemetry CSV:
/// `update,mean_reward,policy_loss,value_loss,clip_frac,rollout_ms,update_ms,wall_ms`.
pub fn telemetry_csv(records: &[UpdateRecord]) -> String {
    let mut out = String::from("update,mean_reward,policy_loss,value_loss,clip_frac,rollout_ms,update_ms,wall_ms\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{:.3},{:.3},{:.3}\n",
            r.update,
            r.mean_reward,
            r.stats.policy_loss,
            r.stats.value_loss,
            r.stats.clip_frac,
            r.rollout_ms,
            r.update_ms,
            r.wall_ms()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(reward: f64, value: f64, next_value: f64, done: bool) -> Transition {
        Transition {
            state: vec![0.0],
            action_w: 0.0,
            u: 0.0,
            reward,
            next_state: vec![0.0],
            done,
            log_prob: 0.0,
            value,
            next_value,
        }
    }

    #[test]
    fn discounted_returns_with_bootstrap() {
        let cfg = PpoConfig::default();
        let trans = vec![tr(1.0, 0.3, 0.0, false), tr(2.0, 0.1, 0.0, true), tr(4.0, 0.0, 8.0, false)];
        let (g, a) = compute_targets(&trans, &cfg);
        assert_eq!(g, vec![1.0 + 0.5 * 2.0, 2.0, 4.0 + 0.5 * 8.0]);
        for i in 0..3 {
            assert_eq!(a[i] + trans[i].value, g[i]);
        }
    }

    #[test]
    fn gae_keeps_advantage_identity() {
        let cfg = PpoConfig { gae: true, ..Default::default() };
        let trans = vec![tr(1.0, 0.3, 0.2, false), tr(-1.0, 0.2, 0.7, false), tr(0.5, 0.7, 0.0, true)];
        let (g, a) = compute_targets(&trans, &cfg);
        for i in 0..3 {
            assert!((a[i] + trans[i].value - g[i]).abs() < 1e-15);
        }
        assert!((a[2] - (0.5 - 0.7)).abs() < 1e-15);
    }

    #[test]
    fn clipping_semantics() {
        let (v, d) = clipped_surrogate(1.5, 2.0, 0.2);
        assert_eq!((v, d), (1.2 * 2.0, 0.0));
        let (v, d) = clipped_surrogate(1.1, 2.0, 0.2);
        assert!((v - 2.2).abs() < 1e-15 && d == 2.0);
        // Negative advantage: a small ratio is clipped, a large one is not.
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), (-0.8, 0.0));
        assert_eq!(clipped_surrogate(1.5, -1.0, 0.2), (-1.5, -1.0));
    }

    #[test]
    fn zero_advantage_leaves_policy_unchanged() {
        let cfg = PpoConfig::default();
        let policy = GaussianPolicy::new(2, &[4], (-1.0, 1.0), 0);
        let value = ValueNet::new(2, &[4], 1);
        let mut learner = Learner::new(policy.clone(), value, &cfg);
        let mut trans = Vec::new();
        for i in 0..50 {
            let s = vec![i as f64 / 50.0, 1.0];
            let v = learner.value.value(&s);
            let mut t = tr(v, v, 0.0, true);
            t.state = s;
            t.u = 0.1 * i as f64;
            t.log_prob = policy.log_prob_at(policy.mean_u(&t.state), t.u);
            trans.push(t);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ppo_update(&mut learner, &trans, &cfg, &mut rng).unwrap();
        assert_eq!(learner.policy, policy);
    }

    #[test]
    fn nan_guard_restores_learner() {
        let cfg = PpoConfig::default();
        let mut learner = Learner::new(
            GaussianPolicy::new(1, &[3], (-1.0, 1.0), 0),
            ValueNet::new(1, &[3], 1),
            &cfg,
        );
        let before = learner.policy.clone();
        let mut t = tr(f64::NAN, 0.0, 0.0, true);
        t.log_prob = -1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(ppo_update(&mut learner, &[t], &cfg, &mut rng), Err(RlError::NonFinite(_))));
        assert_eq!(learner.policy, before);
    }
}

#[cfg(test)]
mod convergence {
    use super::*;
    use crate::rl::BanditEnv;

    #[test]
    fn bandit_converges_to_optimum() {
        let mut env = BanditEnv::new(60_000.0);
        let cfg = PpoConfig::default();
        let agent = train_agent(&mut env, &cfg, 200, 7).unwrap();
        let a = agent.policy.act_deterministic(&[1.0]);
        assert!((a - env.optimum()).abs() <= 0.05 * env.optimum());
    }
}
