//! Phase-conditioned motion tracking environment.
//!
//! The actor observes a short proprioceptive history and the motion phase; the
//! critic additionally sees the reference at the current phase and the
//! episode's dynamics parameters. Rewards are exponential kernels on tracking
//! errors plus regularizing penalties. Episodes start at a uniformly sampled
//! phase and end on completion or when the mean body-point distance exceeds
//! the curriculum threshold.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Debug;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    control_step, forward_kinematics, tracked_point_count, tracked_velocities, DynamicsParams,
    SimState,
};
use crate::error::{Error, Result};
use crate::ppo::{train, Agent, EnvStep, Environment, Outcome, PpoConfig, TrainResult};
use crate::reference::{Frame, ReferenceMotion};

pub const HISTORY_LEN: usize = 5;
/// Joint velocities are multiplied by this before entering any network.
pub const QD_OBS_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub body_pos: f64,
    pub end_effector_pos: f64,
    pub body_vel: f64,
    pub dof_pos: f64,
    pub dof_vel: f64,
    pub action_rate: f64,
    pub torque: f64,
    pub dof_pos_limit: f64,
    pub dof_vel_limit: f64,
    pub torque_limit: f64,
    pub termination: f64,
    /// No planar analog; must stay zero.
    pub body_rot: f64,
    /// No planar analog; must stay zero.
    pub body_ang_vel: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            body_pos: 1.0,
            end_effector_pos: 2.1,
            body_vel: 0.5,
            dof_pos: 0.75,
            dof_vel: 0.5,
            action_rate: -0.5,
            torque: -1e-6,
            dof_pos_limit: -10.0,
            dof_vel_limit: -5.0,
            torque_limit: -5.0,
            termination: -200.0,
            body_rot: 0.0,
            body_ang_vel: 0.0,
        }
    }
}

impl RewardWeights {
    /// Weights for matching recorded real states with a delta action policy.
    /// The action-norm regularizer is configured separately.
    pub fn delta_action() -> Self {
        Self {
            body_pos: 1.0,
            end_effector_pos: 1.0,
            body_vel: 0.5,
            dof_pos: 0.5,
            dof_vel: 0.5,
            action_rate: -0.01,
            torque: 0.0,
            dof_pos_limit: -10.0,
            dof_vel_limit: -5.0,
            torque_limit: -0.1,
            termination: -200.0,
            body_rot: 0.0,
            body_ang_vel: 0.0,
        }
    }

    fn task(&self) -> [f64; 5] {
        [
            self.body_pos,
            self.end_effector_pos,
            self.body_vel,
            self.dof_pos,
            self.dof_vel,
        ]
    }

    fn penalties(&self) -> [f64; 6] {
        [
            self.action_rate,
            self.torque,
            self.dof_pos_limit,
            self.dof_vel_limit,
            self.torque_limit,
            self.termination,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.task().iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("task reward weights must be non-negative".into()));
        }
        if self.penalties().iter().any(|w| !(*w <= 0.0)) {
            return Err(Error::Config("penalty weights must be non-positive".into()));
        }
        if self.body_rot != 0.0 || self.body_ang_vel != 0.0 {
            return Err(Error::Config(
                "body_rot and body_ang_vel have no planar analog and must be 0".into(),
            ));
        }
        Ok(())
    }

    pub fn task_sum(&self) -> f64 {
        self.task().iter().sum()
    }
}

/// Scales `k` of the `exp(-k·e²)` kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelScales {
    pub body_pos: f64,
    pub end_effector_pos: f64,
    pub body_vel: f64,
    pub dof_pos: f64,
    pub dof_vel: f64,
}

impl Default for KernelScales {
    fn default() -> Self {
        Self {
            body_pos: 100.0,
            end_effector_pos: 100.0,
            body_vel: 1.0,
            dof_pos: 10.0,
            dof_vel: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub start: f64,
    pub end: f64,
    /// Fraction of training over which the threshold tightens linearly.
    pub ramp_fraction: f64,
    /// Overrides the schedule with a constant threshold.
    pub fixed: Option<f64>,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            start: 1.5,
            end: 0.3,
            ramp_fraction: 0.6,
            fixed: None,
        }
    }
}

impl CurriculumConfig {
    pub fn threshold(&self, progress: f64) -> f64 {
        if let Some(f) = self.fixed {
            return f;
        }
        let x = if self.ramp_fraction > 0.0 {
            (progress / self.ramp_fraction).clamp(0.0, 1.0)
        } else {
            1.0
        };
        if x >= 1.0 {
            return self.end;
        }
        self.start + (self.end - self.start) * x
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start >= self.end && self.end > 0.0) {
            return Err(Error::Config("curriculum needs start >= end > 0".into()));
        }
        if matches!(self.fixed, Some(f) if !(f > 0.0)) {
            return Err(Error::Config("fixed curriculum threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainRandomization {
    pub enabled: bool,
    pub kp_scale: (f64, f64),
    pub delay_ms: (f64, f64),
    pub damping_scale: (f64, f64),
    /// Seconds of simulated time between pushes.
    pub push_interval: f64,
    /// Joint-velocity impulse magnitude (rad/s).
    pub push_magnitude: f64,
}

impl Default for DomainRandomization {
    fn default() -> Self {
        Self {
            enabled: true,
            kp_scale: (0.925, 1.05),
            delay_ms: (20.0, 40.0),
            damping_scale: (0.7, 1.3),
            push_interval: 10.0,
            push_magnitude: 0.5,
        }
    }
}

impl DomainRandomization {
    pub fn off() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// Episode-level parameter draw; identity when disabled.
    pub fn sample_params<R: Rng + ?Sized>(&self, base: &DynamicsParams, rng: &mut R) -> DynamicsParams {
        let mut p = base.clone();
        if !self.enabled {
            return p;
        }
        let kp = uniform(rng, self.kp_scale);
        let delay = uniform(rng, self.delay_ms);
        let damp = uniform(rng, self.damping_scale);
        for k in &mut p.pd_kp {
            *k *= kp;
        }
        p.control_delay_steps = delay_steps(delay, p.dt);
        for d in &mut p.joint_damping {
            *d *= damp;
        }
        p
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Control delay in milliseconds converted to physics steps.
pub fn delay_steps(ms: f64, dt: f64) -> usize {
    (ms * 1e-3 / dt).round().max(0.0) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    pub rewards: RewardWeights,
    pub kernels: KernelScales,
    pub curriculum: CurriculumConfig,
    pub domain_randomization: DomainRandomization,
    /// Soft joint-angle limit (rad) for the dof position penalty.
    pub joint_pos_limit: f64,
    /// Soft joint-speed limit (rad/s) for the dof velocity penalty.
    pub joint_vel_limit: f64,
    /// Harmonics `k = 1..=K` of `sin(2πkφ)`, `cos(2πkφ)` appended to the phase.
    pub phase_harmonics: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            rewards: RewardWeights::default(),
            kernels: KernelScales::default(),
            curriculum: CurriculumConfig::default(),
            domain_randomization: DomainRandomization::default(),
            joint_pos_limit: 2.5,
            joint_vel_limit: 15.0,
            phase_harmonics: 8,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        self.rewards.validate()?;
        self.curriculum.validate()
    }
}

/// Tracking errors between a simulated state and a reference frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrackingErrors {
    /// Mean squared body-point distance.
    pub body_sq: f64,
    /// Mean body-point distance.
    pub body_mean_dist: f64,
    pub ee_sq: f64,
    /// Mean squared body-point velocity error.
    pub body_vel_sq: f64,
    pub dof_pos_sq: f64,
    pub dof_vel_sq: f64,
}

pub fn tracking_errors(q: &[f64], qd: &[f64], frame: &Frame, params: &DynamicsParams) -> TrackingErrors {
    let body = forward_kinematics(q, params).tracked();
    let vel = tracked_velocities(q, qd, params);
    let ref_vel = tracked_velocities(&frame.q, &frame.qd, params);
    let m = body.len() as f64;
    let mut e = TrackingErrors::default();
    for (p, r) in body.iter().zip(&frame.body) {
        let d2 = (p[0] - r[0]).powi(2) + (p[1] - r[1]).powi(2);
        e.body_sq += d2 / m;
        e.body_mean_dist += d2.sqrt() / m;
    }
    let (ee, ee_ref) = (body[body.len() - 1], frame.body[frame.body.len() - 1]);
    e.ee_sq = (ee[0] - ee_ref[0]).powi(2) + (ee[1] - ee_ref[1]).powi(2);
    for (v, r) in vel.iter().zip(&ref_vel) {
        e.body_vel_sq += ((v[0] - r[0]).powi(2) + (v[1] - r[1]).powi(2)) / m;
    }
    e.dof_pos_sq = q.iter().zip(&frame.q).map(|(a, b)| (a - b).powi(2)).sum();
    e.dof_vel_sq = qd.iter().zip(&frame.qd).map(|(a, b)| (a - b).powi(2)).sum();
    e
}

/// Reward broken into its terms; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub body_pos: f64,
    pub end_effector_pos: f64,
    pub body_vel: f64,
    pub dof_pos: f64,
    pub dof_vel: f64,
    pub action_rate: f64,
    pub torque: f64,
    pub dof_pos_limit: f64,
    pub dof_vel_limit: f64,
    pub torque_limit: f64,
    pub termination: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn task(&self) -> [f64; 5] {
        [
            self.body_pos,
            self.end_effector_pos,
            self.body_vel,
            self.dof_pos,
            self.dof_vel,
        ]
    }

    fn sum(&mut self) {
        self.total = self.task().iter().sum::<f64>()
            + self.action_rate
            + self.torque
            + self.dof_pos_limit
            + self.dof_vel_limit
            + self.torque_limit
            + self.termination;
    }
}

/// Inputs to the regularizing penalties of one control step.
#[derive(Clone, Copy, Debug, Default)]
pub struct PenaltyInputs {
    pub action_rate_sq: f64,
    pub torque_sq: f64,
    pub torque_excess: f64,
    pub dof_pos_excess: f64,
    pub dof_vel_excess: f64,
}

pub fn penalty_inputs(
    state: &SimState,
    action: &[f64],
    prev_action: &[f64],
    torque_sq: f64,
    torque_excess: f64,
    pos_limit: f64,
    vel_limit: f64,
) -> PenaltyInputs {
    PenaltyInputs {
        action_rate_sq: action.iter().zip(prev_action).map(|(a, b)| (a - b).powi(2)).sum(),
        torque_sq,
        torque_excess,
        dof_pos_excess: state.q.iter().map(|q| (q.abs() - pos_limit).max(0.0)).sum(),
        dof_vel_excess: state.qd.iter().map(|v| (v.abs() - vel_limit).max(0.0)).sum(),
    }
}

pub fn tracking_reward(
    w: &RewardWeights,
    k: &KernelScales,
    e: &TrackingErrors,
    p: &PenaltyInputs,
    terminated: bool,
) -> RewardBreakdown {
    let mut r = RewardBreakdown {
        body_pos: w.body_pos * (-k.body_pos * e.body_sq).exp(),
        end_effector_pos: w.end_effector_pos * (-k.end_effector_pos * e.ee_sq).exp(),
        body_vel: w.body_vel * (-k.body_vel * e.body_vel_sq).exp(),
        dof_pos: w.dof_pos * (-k.dof_pos * e.dof_pos_sq).exp(),
        dof_vel: w.dof_vel * (-k.dof_vel * e.dof_vel_sq).exp(),
        action_rate: w.action_rate * p.action_rate_sq,
        torque: w.torque * p.torque_sq,
        dof_pos_limit: w.dof_pos_limit * p.dof_pos_excess,
        dof_vel_limit: w.dof_vel_limit * p.dof_vel_excess,
        torque_limit: w.torque_limit * p.torque_excess,
        termination: if terminated { w.termination } else { 0.0 },
        total: 0.0,
    };
    r.sum();
    r
}

/// Additive action correction evaluated on the current state and action.
pub trait ActionCorrection: Send + Sync + Debug {
    fn delta(&self, state: &SimState, action: &[f64]) -> Result<Vec<f64>>;
}

/// Additive next-state correction `[Δq, Δqd]`.
pub trait DynamicsResidual: Send + Sync + Debug {
    fn residual(&self, state: &SimState, action: &[f64]) -> Result<Vec<f64>>;
}

/// How an action turns into the next state.
#[derive(Clone, Debug, Default)]
pub enum Plant {
    /// The episode's parameters as given.
    #[default]
    Sim,
    /// `f(s, a + Δ(s, a))` with a frozen correction.
    DeltaAction(Arc<dyn ActionCorrection>),
    /// `f(s, a + β·u)`, `u ~ U[0, 1]` per dimension and step.
    ActionNoise { beta: f64 },
    /// `f(s, a) + r(s, a)`.
    DeltaDynamics(Arc<dyn DynamicsResidual>),
}

/// Advances `state` by one control step under `plant`.
pub fn plant_step(
    plant: &Plant,
    state: &mut SimState,
    action: &[f64],
    params: &DynamicsParams,
    rng: &mut ChaCha8Rng,
) -> Result<crate::dynamics::ControlStepInfo> {
    match plant {
        Plant::Sim => control_step(state, action, params),
        Plant::DeltaAction(model) => {
            let d = model.delta(state, action)?;
            let a: Vec<f64> = action.iter().zip(&d).map(|(a, d)| a + d).collect();
            control_step(state, &a, params)
        }
        Plant::ActionNoise { beta } => {
            let a: Vec<f64> = action
                .iter()
                .map(|a| a + beta * rng.gen_range(0.0..1.0))
                .collect();
            control_step(state, &a, params)
        }
        Plant::DeltaDynamics(model) => {
            let r = model.residual(state, action)?;
            let info = control_step(state, action, params)?;
            let n = state.n();
            for i in 0..n {
                state.q[i] += r[i];
                state.qd[i] += r[n + i];
            }
            Ok(info)
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrackingEnv {
    cfg: TrackingConfig,
    base: DynamicsParams,
    params: DynamicsParams,
    motion: Arc<ReferenceMotion>,
    plant: Plant,
    state: SimState,
    phase: f64,
    phase_step: f64,
    hist_q: VecDeque<Vec<f64>>,
    hist_qd: VecDeque<Vec<f64>>,
    hist_a: VecDeque<Vec<f64>>,
    prev_action: Vec<f64>,
    progress: f64,
    elapsed: f64,
    next_push: f64,
    pushes: usize,
    last: RewardBreakdown,
    last_errors: TrackingErrors,
    aborted: Option<String>,
    geometry: Option<DynamicsParams>,
}

impl TrackingEnv {
    pub fn new(
        motion: Arc<ReferenceMotion>,
        base: DynamicsParams,
        cfg: TrackingConfig,
        plant: Plant,
    ) -> Result<Self> {
        base.validate()?;
        cfg.validate()?;
        motion.validate()?;
        if motion.n_links() != base.n_links {
            return Err(Error::dim("motion links", base.n_links, motion.n_links()));
        }
        let state = SimState::at_rest(motion.q_ref[0].clone(), &base);
        let n = base.n_links;
        let mut env = Self {
            phase_step: base.control_dt() / motion.duration(),
            params: base.clone(),
            base,
            cfg,
            motion,
            plant,
            state,
            phase: 0.0,
            hist_q: VecDeque::new(),
            hist_qd: VecDeque::new(),
            hist_a: VecDeque::new(),
            prev_action: vec![0.0; n],
            progress: 0.0,
            elapsed: 0.0,
            next_push: 0.0,
            pushes: 0,
            last: RewardBreakdown::default(),
            last_errors: TrackingErrors::default(),
            aborted: None,
            geometry: None,
        };
        env.place(0.0)?;
        Ok(env)
    }

    pub fn motion(&self) -> &ReferenceMotion {
        &self.motion
    }

    pub fn params(&self) -> &DynamicsParams {
        &self.params
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn phase(&self) -> f64 {
        self.phase
    }

    pub fn config(&self) -> &TrackingConfig {
        &self.cfg
    }

    pub fn set_plant(&mut self, plant: Plant) {
        self.plant = plant;
    }

    /// Measures body points with `params` geometry instead of the episode's.
    pub fn set_measurement_params(&mut self, params: DynamicsParams) {
        self.geometry = Some(params);
    }

    pub fn last_reward(&self) -> &RewardBreakdown {
        &self.last
    }

    pub fn last_errors(&self) -> &TrackingErrors {
        &self.last_errors
    }

    pub fn pushes(&self) -> usize {
        self.pushes
    }

    /// Diagnostic of the last aborted episode, if any.
    pub fn aborted(&self) -> Option<&str> {
        self.aborted.as_deref()
    }

    pub fn threshold(&self) -> f64 {
        self.cfg.curriculum.threshold(self.progress)
    }

    pub fn is_complete(&self) -> bool {
        self.phase >= 1.0
    }

    /// Reference frame at the current phase.
    pub fn reference(&self) -> Frame {
        self.motion
            .frame_at_phase(self.phase.clamp(0.0, 1.0))
            .expect("phase is clamped")
    }

    /// Resets with episode parameters drawn by domain randomization.
    pub fn reset_to_phase(&mut self, phase: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        self.params = self.cfg.domain_randomization.sample_params(&self.base, rng);
        self.place(phase)
    }

    /// Resets at `phase` with the base parameters and no randomization.
    pub fn reset_deterministic(&mut self, phase: f64) -> Result<()> {
        self.params = self.base.clone();
        self.place(phase)
    }

    fn place(&mut self, phase: f64) -> Result<()> {
        let frame = self.motion.frame_at_phase(phase)?;
        self.state = SimState::new(frame.q.clone(), frame.qd.clone(), &frame.q, &self.params);
        self.phase = phase;
        self.prev_action = frame.q.clone();
        self.hist_q = std::iter::repeat(frame.q.clone()).take(HISTORY_LEN).collect();
        self.hist_qd = std::iter::repeat(frame.qd.clone()).take(HISTORY_LEN).collect();
        self.hist_a = std::iter::repeat(frame.q.clone()).take(HISTORY_LEN).collect();
        self.elapsed = 0.0;
        self.next_push = self.cfg.domain_randomization.push_interval;
        self.pushes = 0;
        self.last = RewardBreakdown::default();
        self.last_errors = TrackingErrors::default();
        self.aborted = None;
        Ok(())
    }

    fn push_history(&mut self, action: &[f64]) {
        let q = self.state.q.clone();
        let qd = self.state.qd.clone();
        self.hist_q.pop_back();
        self.hist_q.push_front(q);
        self.hist_qd.pop_back();
        self.hist_qd.push_front(qd);
        self.hist_a.pop_back();
        self.hist_a.push_front(action.to_vec());
    }

    /// Advances one control step and reports the reward breakdown.
    pub fn step_detailed(&mut self, action: &[f64], rng: &mut ChaCha8Rng) -> Result<EnvStep> {
        let n = self.params.n_links;
        if action.len() != n {
            return Err(Error::dim("tracking action", n, action.len()));
        }
        if self.is_complete() {
            return Ok(EnvStep {
                reward: 0.0,
                outcome: Outcome::Completed,
            });
        }
        let info = match plant_step(&self.plant, &mut self.state, action, &self.params, rng) {
            Ok(info) if self.state.is_finite() => info,
            Ok(_) => return Ok(self.abort("non-finite state")),
            Err(Error::NonFinite(m)) | Err(Error::Numeric(m)) => return Ok(self.abort(&m)),
            Err(e) => return Err(e),
        };
        self.elapsed += self.params.control_dt();
        let dr = &self.cfg.domain_randomization;
        if dr.enabled && dr.push_interval > 0.0 {
            while self.elapsed >= self.next_push - 1e-9 {
                for v in &mut self.state.qd {
                    *v += rng.gen_range(-dr.push_magnitude..=dr.push_magnitude);
                }
                self.next_push += dr.push_interval;
                self.pushes += 1;
            }
        }
        self.phase = (self.phase + self.phase_step).min(1.0);
        if 1.0 - self.phase < 1e-9 {
            self.phase = 1.0;
        }
        let frame = self.reference();
        let geometry = self.geometry.as_ref().unwrap_or(&self.params);
        let errors = tracking_errors(&self.state.q, &self.state.qd, &frame, geometry);
        let completed = self.is_complete();
        let failed = !completed && errors.body_mean_dist > self.threshold();
        let pen = penalty_inputs(
            &self.state,
            action,
            &self.prev_action,
            info.torque_sq,
            info.torque_excess,
            self.cfg.joint_pos_limit,
            self.cfg.joint_vel_limit,
        );
        let r = tracking_reward(&self.cfg.rewards, &self.cfg.kernels, &errors, &pen, failed);
        self.prev_action = action.to_vec();
        self.push_history(action);
        self.last = r;
        self.last_errors = errors;
        let outcome = if completed {
            Outcome::Completed
        } else if failed {
            Outcome::Terminated
        } else {
            Outcome::Continue
        };
        Ok(EnvStep {
            reward: r.total,
            outcome,
        })
    }

    fn abort(&mut self, why: &str) -> EnvStep {
        log::warn!("tracking episode aborted: {why}");
        self.aborted = Some(why.to_string());
        let frame = self.motion.frame_at_phase(self.phase.clamp(0.0, 1.0)).expect("clamped");
        self.state = SimState::new(frame.q.clone(), frame.qd.clone(), &frame.q, &self.params);
        self.last = RewardBreakdown {
            termination: self.cfg.rewards.termination,
            total: self.cfg.rewards.termination,
            ..Default::default()
        };
        EnvStep {
            reward: self.cfg.rewards.termination,
            outcome: Outcome::Terminated,
        }
    }

    pub fn actor_dim(n: usize, phase_harmonics: usize) -> usize {
        3 * n * HISTORY_LEN + 1 + 2 * phase_harmonics
    }

    pub fn critic_dim(n: usize, phase_harmonics: usize) -> usize {
        Self::actor_dim(n, phase_harmonics)
            + 2 * tracked_point_count(n)
            + n
            + DynamicsParams::summary_len(n)
    }
}

impl Environment for TrackingEnv {
    fn actor_obs_dim(&self) -> usize {
        Self::actor_dim(self.params.n_links, self.cfg.phase_harmonics)
    }

    fn critic_obs_dim(&self) -> usize {
        Self::critic_dim(self.params.n_links, self.cfg.phase_harmonics)
    }

    fn action_dim(&self) -> usize {
        self.params.n_links
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let phase = rng.gen_range(0.0..1.0);
        self.reset_to_phase(phase, rng)
    }

    fn actor_obs(&self, out: &mut Vec<f64>) {
        out.clear();
        for q in &self.hist_q {
            out.extend_from_slice(q);
        }
        for qd in &self.hist_qd {
            out.extend(qd.iter().map(|v| v * QD_OBS_SCALE));
        }
        for a in &self.hist_a {
            out.extend_from_slice(a);
        }
        out.push(self.phase);
        for k in 1..=self.cfg.phase_harmonics {
            let (s, c) = (std::f64::consts::TAU * k as f64 * self.phase).sin_cos();
            out.push(s);
            out.push(c);
        }
    }

    fn critic_obs(&self, out: &mut Vec<f64>) {
        self.actor_obs(out);
        let frame = self.reference();
        for p in &frame.body {
            out.extend_from_slice(p);
        }
        out.extend(frame.qd.iter().map(|v| v * QD_OBS_SCALE));
        out.extend(self.params.summary_vector());
    }

    fn step(&mut self, action: &[f64], rng: &mut ChaCha8Rng) -> Result<EnvStep> {
        self.step_detailed(action, rng)
    }

    fn set_progress(&mut self, progress: f64) {
        self.progress = progress.clamp(0.0, 1.0);
    }

    fn curriculum(&self) -> Option<f64> {
        Some(self.threshold())
    }
}

/// Per-motion tracking policies keyed by motion name.
pub type PolicyBank = BTreeMap<String, Agent>;

/// Trains a tracking policy for `motion` from scratch in the nominal plant.
pub fn pretrain(
    motion: Arc<ReferenceMotion>,
    params: &DynamicsParams,
    cfg: &TrackingConfig,
    ppo: &PpoConfig,
    seed: u64,
) -> Result<TrainResult> {
    train(
        |_| TrackingEnv::new(motion.clone(), params.clone(), cfg.clone(), Plant::Sim),
        ppo,
        seed,
    )
}
