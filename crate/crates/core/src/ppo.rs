//! Proximal policy optimization with generalized advantage estimation over a
//! vector of independently seeded environments.
//!
//! The critic sees a privileged observation; the actor only its own. Rollouts
//! may be split across worker threads (see [`worker_count`]); every
//! environment owns its own RNG stream, so results do not depend on the
//! worker count.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{adam_step, Activation, Adam, BatchTape, GaussianPolicy, Mlp, MlpSpec};

/// Environment variable holding the rollout worker count.
pub const WORKERS_ENV: &str = "DLALIGN_WORKERS";

pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Continue,
    /// Failure; bootstraps zero.
    Terminated,
    /// Time limit; bootstraps with the value of the final state.
    Truncated,
    /// Reached the end of the task; bootstraps zero.
    Completed,
}

impl Outcome {
    pub fn is_done(self) -> bool {
        self != Outcome::Continue
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvStep {
    pub reward: f64,
    pub outcome: Outcome,
}

pub trait Environment {
    fn actor_obs_dim(&self) -> usize;
    fn critic_obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<()>;
    fn actor_obs(&self, out: &mut Vec<f64>);
    fn critic_obs(&self, out: &mut Vec<f64>);
    fn step(&mut self, action: &[f64], rng: &mut ChaCha8Rng) -> Result<EnvStep>;
    /// Training progress in `[0, 1]`, used by curricula.
    fn set_progress(&mut self, _progress: f64) {}
    /// Current curriculum threshold, if the environment has one.
    fn curriculum(&self) -> Option<f64> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub n_envs: usize,
    pub rollout_steps: usize,
    pub total_steps: u64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    /// Output init gain of the policy mean head.
    pub actor_output_gain: f64,
    pub normalize_value: bool,
    /// Anneal the learning rate linearly to zero over `total_steps`.
    pub lr_anneal: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatch_size: 512,
            lr: 1e-3,
            entropy_coef: 0.0,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            n_envs: 16,
            rollout_steps: 128,
            total_steps: 1_000_000,
            hidden: vec![64, 64],
            init_log_std: -1.6,
            actor_output_gain: 0.01,
            normalize_value: true,
            lr_anneal: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if self.n_envs == 0 || self.rollout_steps == 0 || self.minibatch_size == 0 {
            return bad("n_envs, rollout_steps and minibatch_size must be positive");
        }
        if !(self.lr >= 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("lr must be non-negative and max_grad_norm positive");
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden sizes must be positive");
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.n_envs * self.rollout_steps
    }
}

/// Running mean and variance of value targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueNorm {
    pub mean: f64,
    pub var: f64,
    pub count: f64,
}

impl Default for ValueNorm {
    fn default() -> Self {
        Self {
            mean: 0.0,
            var: 1.0,
            count: 0.0,
        }
    }
}

impl ValueNorm {
    fn std(&self) -> f64 {
        self.var.max(1e-8).sqrt()
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std()
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        y * self.std() + self.mean
    }

    pub fn update(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        if self.count == 0.0 {
            (self.mean, self.var, self.count) = (m, v, n);
            return;
        }
        let total = self.count + n;
        let delta = m - self.mean;
        let mean = self.mean + delta * n / total;
        let m2 = self.var * self.count + v * n + delta * delta * self.count * n / total;
        (self.mean, self.var, self.count) = (mean, m2 / total, total);
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.mean, self.var, self.count]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [mean, var, count] => Ok(Self {
                mean: *mean,
                var: *var,
                count: *count,
            }),
            _ => Err(Error::dim("value normalizer", 3, v.len())),
        }
    }
}

/// Policy, critic and value normalizer trained together.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub policy: GaussianPolicy,
    pub critic: Mlp,
    pub value_norm: ValueNorm,
}

impl Agent {
    pub fn new(actor_dim: usize, critic_dim: usize, action_dim: usize, cfg: &PpoConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = Mlp::init(
            mlp_spec(actor_dim, &cfg.hidden, action_dim),
            cfg.actor_output_gain,
            &mut rng,
        );
        let critic = Mlp::init(mlp_spec(critic_dim, &cfg.hidden, 1), 1.0, &mut rng);
        Self {
            policy: GaussianPolicy::new(actor, cfg.init_log_std),
            critic,
            value_norm: ValueNorm::default(),
        }
    }

    pub fn for_env<E: Environment>(env: &E, cfg: &PpoConfig, seed: u64) -> Self {
        Self::new(env.actor_obs_dim(), env.critic_obs_dim(), env.action_dim(), cfg, seed)
    }

    /// Critic value in return units.
    pub fn value(&self, critic_obs: &[f64]) -> Result<f64> {
        let y = self.critic.forward(critic_obs)?[0];
        Ok(self.value_norm.denormalize(y))
    }

    pub fn act_deterministic(&self, actor_obs: &[f64]) -> Result<Vec<f64>> {
        self.policy.mean_action(actor_obs)
    }
}

fn mlp_spec(input: usize, hidden: &[usize], output: usize) -> MlpSpec {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    MlpSpec {
        layer_sizes: sizes,
        activation: Activation::Tanh,
    }
}

/// Samples stored env-major: index `e * steps + t`.
#[derive(Clone, Debug, Default)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub steps: usize,
    pub actor_dim: usize,
    pub critic_dim: usize,
    pub action_dim: usize,
    pub actor_obs: Vec<f64>,
    pub critic_obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Learning reward; on truncation it already includes `γ·V(s_T)`.
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    /// `V` of the state after each env's last step.
    pub bootstrap: Vec<f64>,
    pub raw_reward_sum: f64,
    pub finished_episodes: usize,
    pub finished_len_sum: usize,
    pub finished_return_sum: f64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.n_envs * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generalized advantage estimation for one env-major batch.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: &[f64],
    n_envs: usize,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n_envs == 0 || n % n_envs != 0 {
        return Err(Error::InvalidArgument(format!(
            "{n} samples do not split into {n_envs} envs"
        )));
    }
    if values.len() != n {
        return Err(Error::dim("gae values", n, values.len()));
    }
    if dones.len() != n {
        return Err(Error::dim("gae dones", n, dones.len()));
    }
    if bootstrap.len() != n_envs {
        return Err(Error::dim("gae bootstrap", n_envs, bootstrap.len()));
    }
    let steps = n / n_envs;
    let mut adv = vec![0.0; n];
    for e in 0..n_envs {
        let base = e * steps;
        let mut next_adv = 0.0;
        let mut next_value = bootstrap[e];
        for t in (0..steps).rev() {
            let i = base + t;
            let live = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] + gamma * next_value * live - values[i];
            next_adv = delta + gamma * lambda * live * next_adv;
            adv[i] = next_adv;
            next_value = values[i];
        }
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Zero-mean, unit-variance advantages; the epsilon guards a constant batch.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for a in adv {
        *a = (*a - mean) / std;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Per-sample clipped-surrogate term and its derivative with respect to the
/// new log-probability.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> (f64, f64) {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    let unclipped_term = ratio * advantage;
    let clipped_term = clipped * advantage;
    if unclipped_term <= clipped_term {
        (unclipped_term, advantage * ratio)
    } else {
        (clipped_term, 0.0)
    }
}

struct Workspace {
    actor_tape: BatchTape,
    critic_tape: BatchTape,
    actor_in: Vec<f64>,
    critic_in: Vec<f64>,
    actor_grad: Vec<f64>,
    log_std_grad: Vec<f64>,
    critic_grad: Vec<f64>,
    out_grad: Vec<f64>,
    value_grad: Vec<f64>,
}

/// Optimizer state for an [`Agent`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub actor: Adam,
    pub log_std: Adam,
    pub critic: Adam,
}

impl Optimizer {
    pub fn new(agent: &Agent) -> Self {
        Self {
            actor: Adam::new(agent.policy.mean.params.len()),
            log_std: Adam::new(agent.policy.log_std.len()),
            critic: Adam::new(agent.critic.params.len()),
        }
    }
}

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;
/// Samples per batched pass; keeps layer activations cache-resident.
const BATCH_TILE: usize = 128;

/// Runs `epochs` passes of minibatch PPO over `batch`. `advantages` must be
/// normalized and `returns` are in return units.
pub fn ppo_update(
    agent: &mut Agent,
    opt: &mut Optimizer,
    batch: &RolloutBatch,
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    let n = batch.len();
    if advantages.len() != n || returns.len() != n {
        return Err(Error::dim("ppo update", n, advantages.len().min(returns.len())));
    }
    let d = batch.action_dim;
    let mut ws = Workspace {
        actor_tape: BatchTape::default(),
        critic_tape: BatchTape::default(),
        actor_in: Vec::new(),
        critic_in: Vec::new(),
        actor_grad: vec![0.0; agent.policy.mean.params.len()],
        log_std_grad: vec![0.0; d],
        critic_grad: vec![0.0; agent.critic.params.len()],
        out_grad: Vec::new(),
        value_grad: Vec::new(),
    };
    let targets: Vec<f64> = returns.iter().map(|r| agent.value_norm.normalize(*r)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut batches = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size.min(n).max(1)) {
            let s = minibatch_step(agent, opt, batch, advantages, &targets, chunk, cfg, &mut ws)?;
            stats.policy_loss += s.policy_loss;
            stats.value_loss += s.value_loss;
            stats.entropy += s.entropy;
            stats.approx_kl += s.approx_kl;
            stats.clip_fraction += s.clip_fraction;
            batches += 1;
        }
    }
    if batches > 0 {
        let k = batches as f64;
        stats.policy_loss /= k;
        stats.value_loss /= k;
        stats.entropy /= k;
        stats.approx_kl /= k;
        stats.clip_fraction /= k;
    }
    Ok(stats)
}

#[allow(clippy::too_many_arguments)]
fn minibatch_step(
    agent: &mut Agent,
    opt: &mut Optimizer,
    batch: &RolloutBatch,
    advantages: &[f64],
    targets: &[f64],
    idx: &[usize],
    cfg: &PpoConfig,
    ws: &mut Workspace,
) -> Result<UpdateStats> {
    let m = idx.len() as f64;
    let d = batch.action_dim;
    let mut z = vec![0.0; d];
    ws.actor_grad.iter_mut().for_each(|g| *g = 0.0);
    ws.critic_grad.iter_mut().for_each(|g| *g = 0.0);
    ws.log_std_grad.iter_mut().for_each(|g| *g = 0.0);
    let sigma: Vec<f64> = agent.policy.log_std.iter().map(|s| s.exp()).collect();
    let mut st = UpdateStats::default();

    for tile in idx.chunks(BATCH_TILE) {
        let bsz = tile.len();
        ws.actor_in.clear();
        ws.critic_in.clear();
        for &i in tile {
            ws.actor_in
                .extend_from_slice(&batch.actor_obs[i * batch.actor_dim..(i + 1) * batch.actor_dim]);
            ws.critic_in.extend_from_slice(
                &batch.critic_obs[i * batch.critic_dim..(i + 1) * batch.critic_dim],
            );
        }
        agent.policy.mean.forward_batch(&ws.actor_in, bsz, &mut ws.actor_tape)?;
        agent.critic.forward_batch(&ws.critic_in, bsz, &mut ws.critic_tape)?;

        let mu = ws.actor_tape.output();
        ws.out_grad.clear();
        ws.out_grad.resize(d * bsz, 0.0);
        for (s, &i) in tile.iter().enumerate() {
            let act = &batch.actions[i * d..(i + 1) * d];
            let mut logp = 0.0;
            for j in 0..d {
                z[j] = (act[j] - mu[j * bsz + s]) / sigma[j];
                logp += -0.5 * z[j] * z[j] - agent.policy.log_std[j] - HALF_LOG_2PI;
            }
            let log_ratio = logp - batch.log_probs[i];
            let ratio = log_ratio.exp();
            let (surr, dsurr) = clipped_surrogate(ratio, advantages[i], cfg.clip_eps);
            st.policy_loss -= surr / m;
            st.approx_kl += ((ratio - 1.0) - log_ratio) / m;
            if (ratio - 1.0).abs() > cfg.clip_eps {
                st.clip_fraction += 1.0 / m;
            }
            let dlogp = -dsurr / m;
            if dlogp != 0.0 {
                for j in 0..d {
                    ws.out_grad[j * bsz + s] = dlogp * z[j] / sigma[j];
                    ws.log_std_grad[j] += dlogp * (z[j] * z[j] - 1.0);
                }
            }
        }
        agent
            .policy
            .mean
            .backward_batch(&mut ws.actor_tape, &ws.out_grad, &mut ws.actor_grad)?;

        let v = ws.critic_tape.output();
        ws.value_grad.clear();
        for (s, &i) in tile.iter().enumerate() {
            let err = v[s] - targets[i];
            st.value_loss += err * err / m;
            ws.value_grad.push(2.0 * cfg.value_coef * err / m);
        }
        agent
            .critic
            .backward_batch(&mut ws.critic_tape, &ws.value_grad, &mut ws.critic_grad)?;
    }
    st.entropy = agent.policy.entropy();
    for g in &mut ws.log_std_grad {
        *g -= cfg.entropy_coef;
    }
    let total = st.policy_loss + cfg.value_coef * st.value_loss - cfg.entropy_coef * st.entropy;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite ppo loss {total}")));
    }

    let sq: f64 = ws
        .actor_grad
        .iter()
        .chain(&ws.log_std_grad)
        .chain(&ws.critic_grad)
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric("non-finite gradient norm".into()));
    }
    if norm > cfg.max_grad_norm {
        let k = cfg.max_grad_norm / norm;
        for g in ws
            .actor_grad
            .iter_mut()
            .chain(ws.log_std_grad.iter_mut())
            .chain(ws.critic_grad.iter_mut())
        {
            *g *= k;
        }
    }
    adam_step(&mut agent.policy.mean.params, &ws.actor_grad, &mut opt.actor, cfg.lr)?;
    adam_step(&mut agent.policy.log_std, &ws.log_std_grad, &mut opt.log_std, cfg.lr)?;
    agent.policy.clamp_log_std();
    adam_step(&mut agent.critic.params, &ws.critic_grad, &mut opt.critic, cfg.lr)?;
    Ok(st)
}

/// One row of the training-curve CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub update: usize,
    pub env_steps: u64,
    pub mean_reward: f64,
    pub mean_ep_len: f64,
    pub mean_ep_return: f64,
    pub curriculum_threshold: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
}

pub fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub agent: Agent,
    pub curves: Vec<CurveRow>,
    /// Set when training stopped early on a numeric fault; `agent` then holds
    /// the last good state.
    pub diverged: Option<String>,
}

struct EnvSlot<E> {
    env: E,
    rng: ChaCha8Rng,
    ep_len: usize,
    ep_return: f64,
}

/// Trains a fresh agent. Environment `i` is built by `factory(i)` and driven
/// by an RNG seeded with `seed + i`.
pub fn train<E, F>(factory: F, cfg: &PpoConfig, seed: u64) -> Result<TrainResult>
where
    E: Environment + Send,
    F: Fn(usize) -> Result<E>,
{
    cfg.validate()?;
    let probe = factory(0)?;
    let agent = Agent::for_env(&probe, cfg, seed);
    train_from(agent, factory, cfg, seed)
}

/// Continues training `agent` with fresh optimizer state.
pub fn train_from<E, F>(agent: Agent, factory: F, cfg: &PpoConfig, seed: u64) -> Result<TrainResult>
where
    E: Environment + Send,
    F: Fn(usize) -> Result<E>,
{
    cfg.validate()?;
    let mut agent = agent;
    let mut curves = Vec::new();
    if cfg.total_steps == 0 {
        return Ok(TrainResult {
            agent,
            curves,
            diverged: None,
        });
    }
    let mut slots = Vec::with_capacity(cfg.n_envs);
    for i in 0..cfg.n_envs {
        let env = factory(i)?;
        check_dims(&env, &agent)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let mut env = env;
        env.set_progress(0.0);
        env.reset(&mut rng)?;
        slots.push(EnvSlot {
            env,
            rng,
            ep_len: 0,
            ep_return: 0.0,
        });
    }
    let mut opt = Optimizer::new(&agent);
    let mut update_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let workers = worker_count();
    let mut env_steps = 0u64;
    let mut update = 0usize;
    let mut diverged = None;

    while env_steps < cfg.total_steps {
        let progress = env_steps as f64 / cfg.total_steps as f64;
        for s in &mut slots {
            s.env.set_progress(progress);
        }
        let batch = match collect(&agent, &mut slots, cfg, workers) {
            Ok(b) => b,
            Err(e @ Error::Numeric(_)) | Err(e @ Error::NonFinite(_)) => {
                diverged = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        env_steps += batch.len() as u64;

        let (mut adv, returns) = compute_gae(
            &batch.rewards,
            &batch.values,
            &batch.dones,
            &batch.bootstrap,
            batch.n_envs,
            cfg.gamma,
            cfg.lambda,
        )?;
        normalize_advantages(&mut adv);
        let snapshot = agent.clone();
        if cfg.normalize_value {
            agent.value_norm.update(&returns);
        }
        let mut step_cfg = cfg.clone();
        if cfg.lr_anneal {
            step_cfg.lr = cfg.lr * (1.0 - progress);
        }
        let stats = match ppo_update(&mut agent, &mut opt, &batch, &adv, &returns, &step_cfg, &mut update_rng) {
            Ok(s) => s,
            Err(e @ Error::Numeric(_)) | Err(e @ Error::NonFinite(_)) => {
                agent = snapshot;
                diverged = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let eps = batch.finished_episodes.max(1) as f64;
        curves.push(CurveRow {
            update,
            env_steps,
            mean_reward: batch.raw_reward_sum / batch.len() as f64,
            mean_ep_len: batch.finished_len_sum as f64 / eps,
            mean_ep_return: batch.finished_return_sum / eps,
            curriculum_threshold: slots[0].env.curriculum(),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
        });
        log::debug!(
            "update {update} steps {env_steps} reward {:.4} ep_len {:.1}",
            batch.raw_reward_sum / batch.len() as f64,
            batch.finished_len_sum as f64 / eps
        );
        update += 1;
    }
    Ok(TrainResult {
        agent,
        curves,
        diverged,
    })
}

fn check_dims<E: Environment>(env: &E, agent: &Agent) -> Result<()> {
    if env.actor_obs_dim() != agent.policy.mean.input_dim() {
        return Err(Error::dim("actor obs", agent.policy.mean.input_dim(), env.actor_obs_dim()));
    }
    if env.critic_obs_dim() != agent.critic.input_dim() {
        return Err(Error::dim("critic obs", agent.critic.input_dim(), env.critic_obs_dim()));
    }
    if env.action_dim() != agent.policy.action_dim() {
        return Err(Error::dim("action", agent.policy.action_dim(), env.action_dim()));
    }
    Ok(())
}

struct EnvTrace {
    actor_obs: Vec<f64>,
    critic_obs: Vec<f64>,
    actions: Vec<f64>,
    log_probs: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    values: Vec<f64>,
    bootstrap: f64,
    raw_reward_sum: f64,
    finished: Vec<(usize, f64)>,
}

fn rollout_env<E: Environment>(
    agent: &Agent,
    slot: &mut EnvSlot<E>,
    steps: usize,
    gamma: f64,
) -> Result<EnvTrace> {
    let (da, dc, d) = (
        slot.env.actor_obs_dim(),
        slot.env.critic_obs_dim(),
        slot.env.action_dim(),
    );
    let mut tr = EnvTrace {
        actor_obs: Vec::with_capacity(steps * da),
        critic_obs: Vec::with_capacity(steps * dc),
        actions: Vec::with_capacity(steps * d),
        log_probs: Vec::with_capacity(steps),
        rewards: Vec::with_capacity(steps),
        dones: Vec::with_capacity(steps),
        values: Vec::with_capacity(steps),
        bootstrap: 0.0,
        raw_reward_sum: 0.0,
        finished: Vec::new(),
    };
    let mut ao = Vec::with_capacity(da);
    let mut co = Vec::with_capacity(dc);
    for _ in 0..steps {
        slot.env.actor_obs(&mut ao);
        slot.env.critic_obs(&mut co);
        let (action, logp) = agent.policy.sample(&ao, &mut slot.rng)?;
        let value = agent.value(&co)?;
        let step = slot.env.step(&action, &mut slot.rng)?;
        if !step.reward.is_finite() {
            return Err(Error::NonFinite("environment reward".into()));
        }
        let mut reward = step.reward;
        slot.ep_len += 1;
        slot.ep_return += step.reward;
        tr.raw_reward_sum += step.reward;
        if step.outcome == Outcome::Truncated {
            let mut terminal = Vec::with_capacity(dc);
            slot.env.critic_obs(&mut terminal);
            reward += gamma * agent.value(&terminal)?;
        }
        tr.actor_obs.extend_from_slice(&ao);
        tr.critic_obs.extend_from_slice(&co);
        tr.actions.extend_from_slice(&action);
        tr.log_probs.push(logp);
        tr.rewards.push(reward);
        tr.dones.push(step.outcome.is_done());
        tr.values.push(value);
        if step.outcome.is_done() {
            tr.finished.push((slot.ep_len, slot.ep_return));
            slot.ep_len = 0;
            slot.ep_return = 0.0;
            slot.env.reset(&mut slot.rng)?;
        }
    }
    slot.env.critic_obs(&mut co);
    tr.bootstrap = agent.value(&co)?;
    Ok(tr)
}

fn collect<E: Environment + Send>(
    agent: &Agent,
    slots: &mut [EnvSlot<E>],
    cfg: &PpoConfig,
    workers: usize,
) -> Result<RolloutBatch> {
    let steps = cfg.rollout_steps;
    let traces: Vec<Result<EnvTrace>> = if workers <= 1 || slots.len() <= 1 {
        slots
            .iter_mut()
            .map(|s| rollout_env(agent, s, steps, cfg.gamma))
            .collect()
    } else {
        let chunk = slots.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = slots
                .chunks_mut(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter_mut()
                            .map(|s| rollout_env(agent, s, steps, cfg.gamma))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("rollout worker panicked"))
                .collect()
        })
    };
    let first = &slots[0].env;
    let mut b = RolloutBatch {
        n_envs: slots.len(),
        steps,
        actor_dim: first.actor_obs_dim(),
        critic_dim: first.critic_obs_dim(),
        action_dim: first.action_dim(),
        ..Default::default()
    };
    for tr in traces {
        let tr = tr?;
        b.actor_obs.extend(tr.actor_obs);
        b.critic_obs.extend(tr.critic_obs);
        b.actions.extend(tr.actions);
        b.log_probs.extend(tr.log_probs);
        b.rewards.extend(tr.rewards);
        b.dones.extend(tr.dones);
        b.values.extend(tr.values);
        b.bootstrap.push(tr.bootstrap);
        b.raw_reward_sum += tr.raw_reward_sum;
        for (len, ret) in tr.finished {
            b.finished_episodes += 1;
            b.finished_len_sum += len;
            b.finished_return_sum += ret;
        }
    }
    Ok(b)
}
