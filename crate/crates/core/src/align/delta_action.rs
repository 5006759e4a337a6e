//! Residual action policy `Δa = π(s, a)` trained with PPO so that the
//! simulator, driven by `a + Δa`, reproduces recorded real trajectories.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::TrajectoryDataset;
use crate::dynamics::{control_step, forward_kinematics, DynamicsParams, SimState};
use crate::error::{Error, Result};
use crate::neural::GaussianPolicy;
use crate::ppo::{train, Agent, CurveRow, EnvStep, Environment, Outcome, PpoConfig};
use crate::reference::Frame;
use crate::tracking::{
    penalty_inputs, tracking_errors, tracking_reward, ActionCorrection, KernelScales,
    RewardBreakdown, RewardWeights, QD_OBS_SCALE,
};

/// Network input `[q, qd·0.1, a]`.
pub fn delta_input(q: &[f64], qd: &[f64], a: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(q);
    out.extend(qd.iter().map(|v| v * QD_OBS_SCALE));
    out.extend_from_slice(a);
}

/// `w·(exp(−‖Δa‖) − 1)`: zero at `Δa = 0`, negative elsewhere for `w > 0`.
pub fn action_norm_reward(weight: f64, delta: &[f64]) -> f64 {
    let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    weight * ((-norm).exp() - 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeltaActionConfig {
    /// Seconds of recorded actions replayed per training episode.
    pub horizon_s: f64,
    pub action_norm_weight: f64,
    /// Per-joint bound on `|Δa|` (rad); `None` disables clamping. Written
    /// as a number or `"off"`.
    #[serde(with = "clamp_serde")]
    pub clamp: Option<f64>,
    /// Joints allowed a nonzero correction; `None` means all. Written as
    /// `"all"` or `"joints:0,1"`.
    #[serde(with = "mask_serde")]
    pub mask: Option<Vec<usize>>,
    pub rewards: RewardWeights,
    pub kernels: KernelScales,
    /// Mean body-point distance (m) from the recorded state that ends an episode.
    pub termination_distance: f64,
    pub joint_pos_limit: f64,
    pub joint_vel_limit: f64,
    pub ppo: PpoConfig,
}

impl Default for DeltaActionConfig {
    fn default() -> Self {
        Self {
            horizon_s: 1.0,
            action_norm_weight: 0.2,
            clamp: Some(0.25),
            mask: None,
            rewards: RewardWeights::delta_action(),
            kernels: KernelScales {
                body_pos: 1e4,
                end_effector_pos: 1e4,
                body_vel: 100.0,
                dof_pos: 1e3,
                dof_vel: 10.0,
            },
            termination_distance: 0.3,
            joint_pos_limit: 2.5,
            joint_vel_limit: 15.0,
            ppo: PpoConfig {
                total_steps: 1_000_000,
                init_log_std: -3.0,
                ..PpoConfig::default()
            },
        }
    }
}

impl DeltaActionConfig {
    pub fn validate(&self, n_links: usize) -> Result<()> {
        self.rewards.validate()?;
        self.ppo.validate()?;
        let bad = |m: &str| Err(Error::Config(format!("delta action: {m}")));
        if !(self.horizon_s > 0.0) {
            return bad("horizon_s must be positive");
        }
        if !(self.action_norm_weight >= 0.0) {
            return bad("action_norm_weight must be non-negative");
        }
        if let Some(c) = self.clamp {
            if !(c > 0.0) {
                return bad("clamp must be positive");
            }
        }
        if let Some(m) = &self.mask {
            if m.iter().any(|&j| j >= n_links) {
                return bad("mask names a joint outside the chain");
            }
        }
        Ok(())
    }

    /// Per-joint flags; `true` where corrections are allowed.
    pub fn active_joints(&self, n_links: usize) -> Vec<bool> {
        match &self.mask {
            None => vec![true; n_links],
            Some(m) => (0..n_links).map(|j| m.contains(&j)).collect(),
        }
    }
}

mod clamp_serde {
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(c) => Repr::Value(*c),
            None => Repr::Word("off".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(c) => Ok(Some(c)),
            Repr::Word(w) if w == "off" => Ok(None),
            Repr::Word(w) => Err(D::Error::custom(format!("clamp must be a number or \"off\", got {w:?}"))),
        }
    }
}

/// Parses `"all"` or `"joints:i,j,..."`.
pub fn parse_mask(text: &str) -> Result<Option<Vec<usize>>> {
    let text = text.trim();
    if text == "all" {
        return Ok(None);
    }
    let list = text
        .strip_prefix("joints:")
        .ok_or_else(|| Error::Config(format!("mask must be \"all\" or \"joints:i,j\", got {text:?}")))?;
    let mut joints = list
        .split(',')
        .map(|j| j.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Config(format!("mask {text:?}: {e}")))?;
    joints.sort_unstable();
    joints.dedup();
    Ok(Some(joints))
}

pub fn format_mask(mask: &Option<Vec<usize>>) -> String {
    match mask {
        None => "all".into(),
        Some(m) => {
            let list: Vec<String> = m.iter().map(|j| j.to_string()).collect();
            format!("joints:{}", list.join(","))
        }
    }
}

mod mask_serde {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<usize>>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format_mask(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<usize>>, D::Error> {
        let text = String::deserialize(d)?;
        super::parse_mask(&text).map_err(D::Error::custom)
    }
}

fn clamp_and_mask(raw: &mut [f64], active: &[bool], clamp: Option<f64>) {
    for (d, &on) in raw.iter_mut().zip(active) {
        if !on {
            *d = 0.0;
        } else if let Some(c) = clamp {
            *d = d.clamp(-c, c);
        }
    }
}

/// Frozen delta action policy evaluated in mean mode.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaActionModel {
    pub policy: GaussianPolicy,
    pub active: Vec<bool>,
    pub clamp: Option<f64>,
}

impl DeltaActionModel {
    pub fn new(policy: GaussianPolicy, active: Vec<bool>, clamp: Option<f64>) -> Result<Self> {
        let n = active.len();
        if policy.mean.input_dim() != 3 * n || policy.action_dim() != n {
            return Err(Error::dim("delta policy", 3 * n, policy.mean.input_dim()));
        }
        Ok(Self {
            policy,
            active,
            clamp,
        })
    }

    /// A model whose output is identically zero.
    pub fn zero(n: usize, hidden: &[usize]) -> Self {
        let spec = crate::neural::MlpSpec::tanh(3 * n, hidden, n);
        let policy = GaussianPolicy::new(crate::neural::Mlp::zeros(spec), 0.0);
        Self {
            policy,
            active: vec![true; n],
            clamp: None,
        }
    }

    pub fn n(&self) -> usize {
        self.active.len()
    }

    /// Clamps and masks a raw network output in place.
    pub fn postprocess(&self, raw: &mut [f64]) {
        clamp_and_mask(raw, &self.active, self.clamp);
    }

    pub fn mean_delta(&self, q: &[f64], qd: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(3 * self.n());
        delta_input(q, qd, a, &mut x);
        let mut d = self.policy.mean.forward(&x)?;
        self.postprocess(&mut d);
        Ok(d)
    }

    /// Mean delta and the gradient of `g · Δ(s, a)` with respect to `a`.
    pub fn delta_vjp(&self, q: &[f64], qd: &[f64], a: &[f64], g: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.n();
        let mut x = Vec::with_capacity(3 * n);
        delta_input(q, qd, a, &mut x);
        let raw = self.policy.mean.forward(&x)?;
        let mut out_grad = g.to_vec();
        for j in 0..n {
            let clamped = self.clamp.map_or(false, |c| raw[j].abs() > c);
            if !self.active[j] || clamped {
                out_grad[j] = 0.0;
            }
        }
        let (_, input_grad) = self.policy.mean.backward(&x, &out_grad)?;
        let mut d = raw;
        self.postprocess(&mut d);
        Ok((d, input_grad[2 * n..].to_vec()))
    }
}

impl ActionCorrection for DeltaActionModel {
    fn delta(&self, state: &SimState, action: &[f64]) -> Result<Vec<f64>> {
        self.mean_delta(&state.q, &state.qd, action)
    }
}

/// PPO environment replaying recorded actions from recorded start states.
#[derive(Clone, Debug)]
pub struct DeltaActionEnv {
    data: Arc<TrajectoryDataset>,
    windows: Arc<Vec<(usize, usize)>>,
    params: DynamicsParams,
    geometry: DynamicsParams,
    cfg: Arc<DeltaActionConfig>,
    active: Vec<bool>,
    horizon: usize,
    episode: usize,
    start: usize,
    k: usize,
    state: SimState,
    prev_delta: Vec<f64>,
    last: RewardBreakdown,
    last_norm: f64,
}

impl DeltaActionEnv {
    pub fn new(
        data: Arc<TrajectoryDataset>,
        params: DynamicsParams,
        geometry: DynamicsParams,
        cfg: Arc<DeltaActionConfig>,
    ) -> Result<Self> {
        params.validate()?;
        data.validate()?;
        let n = params.n_links;
        if data.n_links != n {
            return Err(Error::dim("dataset links", n, data.n_links));
        }
        cfg.validate(n)?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("delta action training needs data".into()));
        }
        let horizon = (cfg.horizon_s / data.dt).round().max(1.0) as usize;
        let windows: Vec<(usize, usize)> = data
            .episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.n_steps().saturating_sub(horizon - 1)).map(move |t| (e, t)))
            .collect();
        if windows.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "horizon {} s exceeds every episode",
                cfg.horizon_s
            )));
        }
        let state = data.episodes[0].state_at(0, data.dt, &params);
        Ok(Self {
            active: cfg.active_joints(n),
            windows: Arc::new(windows),
            horizon,
            episode: 0,
            start: 0,
            k: 0,
            state,
            prev_delta: vec![0.0; n],
            last: RewardBreakdown::default(),
            last_norm: 0.0,
            data,
            params,
            geometry,
            cfg,
        })
    }

    pub fn horizon_steps(&self) -> usize {
        self.horizon
    }

    pub fn window_count(&self) -> usize {
        self.windows.len()
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn last_reward(&self) -> (&RewardBreakdown, f64) {
        (&self.last, self.last_norm)
    }

    /// Starts at recorded step `start` of `episode`.
    pub fn reset_to(&mut self, episode: usize, start: usize) -> Result<()> {
        let ep = self
            .data
            .episodes
            .get(episode)
            .ok_or_else(|| Error::InvalidArgument(format!("no episode {episode}")))?;
        if start + self.horizon > ep.n_steps() {
            return Err(Error::InvalidArgument(format!(
                "window at {start} runs past episode {episode}"
            )));
        }
        self.state = ep.state_at(start, self.data.dt, &self.params);
        self.episode = episode;
        self.start = start;
        self.k = 0;
        self.prev_delta.iter_mut().for_each(|d| *d = 0.0);
        self.last = RewardBreakdown::default();
        self.last_norm = 0.0;
        Ok(())
    }

    fn t(&self) -> usize {
        self.start + self.k
    }

    fn recorded_action(&self) -> &[f64] {
        let ep = &self.data.episodes[self.episode];
        &ep.actions[self.t().min(ep.n_steps() - 1)]
    }

    fn recorded_state(&self, t: usize) -> &[f64] {
        let ep = &self.data.episodes[self.episode];
        &ep.states[t.min(ep.n_steps())]
    }
}

fn push_state(s: &[f64], n: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(&s[..n]);
    out.extend(s[n..].iter().map(|v| v * QD_OBS_SCALE));
}

impl Environment for DeltaActionEnv {
    fn actor_obs_dim(&self) -> usize {
        3 * self.params.n_links
    }

    fn critic_obs_dim(&self) -> usize {
        7 * self.params.n_links + 1
    }

    fn action_dim(&self) -> usize {
        self.params.n_links
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let (e, t) = self.windows[rng.gen_range(0..self.windows.len())];
        self.reset_to(e, t)
    }

    fn actor_obs(&self, out: &mut Vec<f64>) {
        delta_input(&self.state.q, &self.state.qd, self.recorded_action(), out);
    }

    fn critic_obs(&self, out: &mut Vec<f64>) {
        let n = self.params.n_links;
        self.actor_obs(out);
        push_state(self.recorded_state(self.t()), n, out);
        push_state(self.recorded_state(self.t() + 1), n, out);
        out.push((self.horizon - self.k.min(self.horizon)) as f64 / self.horizon as f64);
    }

    fn step(&mut self, action: &[f64], _rng: &mut ChaCha8Rng) -> Result<EnvStep> {
        let n = self.params.n_links;
        if action.len() != n {
            return Err(Error::dim("delta action", n, action.len()));
        }
        let mut delta = action.to_vec();
        clamp_and_mask(&mut delta, &self.active, self.cfg.clamp);
        let applied: Vec<f64> = self
            .recorded_action()
            .iter()
            .zip(&delta)
            .map(|(a, d)| a + d)
            .collect();
        let termination = self.cfg.rewards.termination;
        let info = match control_step(&mut self.state, &applied, &self.params) {
            Ok(info) if self.state.is_finite() => info,
            Ok(_) | Err(Error::NonFinite(_)) | Err(Error::Numeric(_)) => {
                self.state = self.data.episodes[self.episode].state_at(self.t(), self.data.dt, &self.params);
                self.last = RewardBreakdown {
                    termination,
                    total: termination,
                    ..Default::default()
                };
                return Ok(EnvStep {
                    reward: termination,
                    outcome: Outcome::Terminated,
                });
            }
            Err(e) => return Err(e),
        };
        self.k += 1;
        let rec = self.recorded_state(self.t());
        let frame = Frame {
            q: rec[..n].to_vec(),
            qd: rec[n..].to_vec(),
            body: forward_kinematics(&rec[..n], &self.geometry).tracked(),
        };
        let errors = tracking_errors(&self.state.q, &self.state.qd, &frame, &self.geometry);
        let terminated = errors.body_mean_dist > self.cfg.termination_distance;
        let pen = penalty_inputs(
            &self.state,
            &delta,
            &self.prev_delta,
            info.torque_sq,
            info.torque_excess,
            self.cfg.joint_pos_limit,
            self.cfg.joint_vel_limit,
        );
        self.last = tracking_reward(&self.cfg.rewards, &self.cfg.kernels, &errors, &pen, terminated);
        self.last_norm = action_norm_reward(self.cfg.action_norm_weight, &delta);
        self.prev_delta = delta;
        let outcome = if terminated {
            Outcome::Terminated
        } else if self.k >= self.horizon {
            Outcome::Truncated
        } else {
            Outcome::Continue
        };
        Ok(EnvStep {
            reward: self.last.total + self.last_norm,
            outcome,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DeltaTrainResult {
    pub model: DeltaActionModel,
    pub agent: Agent,
    pub curves: Vec<CurveRow>,
    pub diverged: Option<String>,
}

/// Trains a delta action model on `data` against the `sim` plant.
pub fn train_delta_action(
    data: Arc<TrajectoryDataset>,
    sim: &DynamicsParams,
    geometry: &DynamicsParams,
    cfg: &DeltaActionConfig,
    seed: u64,
) -> Result<DeltaTrainResult> {
    let shared = Arc::new(cfg.clone());
    let probe = DeltaActionEnv::new(data.clone(), sim.clone(), geometry.clone(), shared.clone())?;
    drop(probe);
    let result = train(
        |_| DeltaActionEnv::new(data.clone(), sim.clone(), geometry.clone(), shared.clone()),
        &cfg.ppo,
        seed,
    )?;
    let n = sim.n_links;
    let model = DeltaActionModel::new(result.agent.policy.clone(), cfg.active_joints(n), cfg.clamp)?;
    Ok(DeltaTrainResult {
        model,
        agent: result.agent,
        curves: result.curves,
        diverged: result.diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::dataset::Episode;
    use crate::align::Provenance;
    use crate::neural::{Mlp, MlpSpec};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn random_model(n: usize, seed: u64, active: Vec<bool>, clamp: Option<f64>) -> DeltaActionModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::init(MlpSpec::tanh(3 * n, &[8], n), 3.0, &mut rng);
        DeltaActionModel::new(GaussianPolicy::new(net, -1.0), active, clamp).unwrap()
    }

    fn toy_dataset(steps: usize) -> TrajectoryDataset {
        let p = DynamicsParams::nominal();
        let mut s = SimState::at_rest(vec![0.3, -0.2], &p);
        let mut ep = Episode {
            motion: "toy".into(),
            prime: s.q.clone(),
            states: vec![s.flat()],
            actions: Vec::new(),
            failed: false,
        };
        for t in 0..steps {
            let a = vec![0.3 + 0.2 * (t as f64 * 0.1).sin(), -0.2];
            control_step(&mut s, &a, &p).unwrap();
            ep.actions.push(a);
            ep.states.push(s.flat());
        }
        let mut ds = TrajectoryDataset::empty(p.control_dt(), 2, p.digest(), Provenance::Sim);
        ds.episodes.push(ep);
        ds
    }

    #[test]
    fn action_norm_reward_shape() {
        assert_eq!(action_norm_reward(0.2, &[0.0, 0.0]), 0.0);
        let a = action_norm_reward(0.2, &[0.1, 0.0]);
        let b = action_norm_reward(0.2, &[0.1, 0.1]);
        assert!(a < 0.0 && b < a);
    }

    proptest! {
        #[test]
        fn masked_joints_output_exactly_zero(
            seed in 0u64..500,
            x in proptest::collection::vec(-10.0f64..10.0, 9),
            mask in proptest::collection::vec(any::<bool>(), 3),
        ) {
            let m = random_model(3, seed, mask.clone(), Some(0.25));
            let d = m.mean_delta(&x[..3], &x[3..6], &x[6..]).unwrap();
            for j in 0..3 {
                if !mask[j] {
                    prop_assert_eq!(d[j].to_bits(), 0.0f64.to_bits());
                } else {
                    prop_assert!(d[j].abs() <= 0.25);
                }
            }
        }

        #[test]
        fn action_norm_reward_strictly_decreasing(a in 0.0f64..5.0, b in 0.0f64..5.0) {
            prop_assume!(a < b);
            prop_assert!(action_norm_reward(0.2, &[a]) > action_norm_reward(0.2, &[b]));
        }
    }

    #[test]
    fn vjp_matches_finite_difference() {
        let m = random_model(2, 3, vec![true, true], None);
        let (q, qd, a, g) = ([0.2, -0.1], [1.0, 0.5], [0.3, 0.1], [0.7, -1.3]);
        let (_, grad) = m.delta_vjp(&q, &qd, &a, &g).unwrap();
        for j in 0..2 {
            let h = 1e-6;
            let mut ap = a;
            ap[j] += h;
            let mut am = a;
            am[j] -= h;
            let fp: f64 = m.mean_delta(&q, &qd, &ap).unwrap().iter().zip(&g).map(|(d, g)| d * g).sum();
            let fm: f64 = m.mean_delta(&q, &qd, &am).unwrap().iter().zip(&g).map(|(d, g)| d * g).sum();
            assert!((grad[j] - (fp - fm) / (2.0 * h)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_delta_replays_recorded_states() {
        let ds = Arc::new(toy_dataset(150));
        let p = DynamicsParams::nominal();
        let mut env = DeltaActionEnv::new(ds.clone(), p.clone(), p, Arc::new(DeltaActionConfig::default())).unwrap();
        assert_eq!(env.horizon_steps(), 100);
        assert_eq!(env.window_count(), 51);
        env.reset_to(0, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 0..100 {
            let out = env.step(&[0.0, 0.0], &mut rng).unwrap();
            assert_eq!(env.state().flat(), ds.episodes[0].states[21 + k]);
            let full = RewardWeights::delta_action().task_sum();
            assert!((out.reward - full).abs() < 1e-12);
            let done = out.outcome == Outcome::Truncated;
            assert_eq!(done, k == 99);
        }
    }

    #[test]
    fn horizon_longer_than_data_rejected() {
        let ds = Arc::new(toy_dataset(50));
        let p = DynamicsParams::nominal();
        let cfg = DeltaActionConfig {
            horizon_s: 1.0,
            ..Default::default()
        };
        assert!(DeltaActionEnv::new(ds, p.clone(), p, Arc::new(cfg)).is_err());
    }

    #[test]
    fn constant_offset_moves_state() {
        let ds = Arc::new(toy_dataset(120));
        let p = DynamicsParams::nominal();
        let mut env = DeltaActionEnv::new(ds, p.clone(), p, Arc::new(DeltaActionConfig::default())).unwrap();
        env.reset_to(0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut last = 0.0;
        for _ in 0..30 {
            last = env.step(&[0.1, 0.0], &mut rng).unwrap().reward;
        }
        let (r, norm) = env.last_reward();
        assert!(r.body_pos < 1.0);
        assert!((norm - action_norm_reward(0.2, &[0.1, 0.0])).abs() < 1e-15);
        assert!(last < RewardWeights::delta_action().task_sum());
    }
}
