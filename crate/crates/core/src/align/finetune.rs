//! Policy fine-tuning in modified simulators: the delta-action (ASAP)
//! environment, learned residual dynamics, and uniform action noise.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::dataset::TrajectoryDataset;
use super::delta_action::DeltaActionModel;
use super::delta_dynamics::DeltaDynamicsModel;
use crate::dynamics::{DynamicsParams, SimState};
use crate::error::{Error, Result};
use crate::ppo::{train_from, Agent, PpoConfig, TrainResult};
use crate::reference::ReferenceMotion;
use crate::tracking::{DomainRandomization, Plant, TrackingConfig, TrackingEnv};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub ppo: PpoConfig,
    /// Fixed failure threshold (m), the curriculum's final value.
    pub threshold: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig {
                total_steps: 200_000,
                lr: 3e-4,
                ..PpoConfig::default()
            },
            threshold: 0.3,
        }
    }
}

fn finetune_tracking(tracking: &TrackingConfig, threshold: f64) -> TrackingConfig {
    let mut cfg = tracking.clone();
    cfg.curriculum.fixed = Some(threshold);
    cfg.domain_randomization = DomainRandomization::off();
    cfg
}

/// Tracking environment whose plant is `f_sim(s, a + Δ(s, a))` with the
/// delta model frozen and evaluated in mean mode.
pub fn build_asap_env(
    motion: Arc<ReferenceMotion>,
    sim: &DynamicsParams,
    tracking: &TrackingConfig,
    delta: Arc<DeltaActionModel>,
    threshold: f64,
) -> Result<TrackingEnv> {
    TrackingEnv::new(
        motion,
        sim.clone(),
        finetune_tracking(tracking, threshold),
        Plant::DeltaAction(delta),
    )
}

/// Continues PPO from `agent` on `motion` in `plant`.
pub fn finetune_in(
    agent: &Agent,
    motion: Arc<ReferenceMotion>,
    sim: &DynamicsParams,
    tracking: &TrackingConfig,
    plant: Plant,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<TrainResult> {
    let tcfg = finetune_tracking(tracking, cfg.threshold);
    train_from(
        agent.clone(),
        |_| TrackingEnv::new(motion.clone(), sim.clone(), tcfg.clone(), plant.clone()),
        &cfg.ppo,
        seed,
    )
}

/// Fine-tunes in the delta-action environment. The returned policy is
/// deployed without the delta model.
pub fn finetune_policy(
    agent: &Agent,
    motion: Arc<ReferenceMotion>,
    sim: &DynamicsParams,
    tracking: &TrackingConfig,
    delta: Arc<DeltaActionModel>,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<TrainResult> {
    finetune_in(agent, motion, sim, tracking, Plant::DeltaAction(delta), cfg, seed)
}

/// Fine-tunes in `f_sim(s, a) + f_Δ(s, a)`.
pub fn finetune_delta_dynamics(
    agent: &Agent,
    motion: Arc<ReferenceMotion>,
    sim: &DynamicsParams,
    tracking: &TrackingConfig,
    model: Arc<DeltaDynamicsModel>,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<TrainResult> {
    finetune_in(agent, motion, sim, tracking, Plant::DeltaDynamics(model), cfg, seed)
}

/// Fine-tunes in the nominal simulator with `a + β·u`, `u ~ U[0, 1]` per
/// dimension. `β = 0` is plain nominal fine-tuning.
pub fn noise_finetune(
    agent: &Agent,
    motion: Arc<ReferenceMotion>,
    sim: &DynamicsParams,
    tracking: &TrackingConfig,
    beta: f64,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<TrainResult> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise level {beta} must be >= 0")));
    }
    let plant = if beta == 0.0 {
        Plant::Sim
    } else {
        Plant::ActionNoise { beta }
    };
    finetune_in(agent, motion, sim, tracking, plant, cfg, seed)
}

/// Mean `|Δa|` per joint over every recorded `(s_t, a_t)` pair.
pub fn delta_magnitude_report(model: &DeltaActionModel, data: &TrajectoryDataset) -> Result<Vec<f64>> {
    let n = model.n();
    if data.n_links != n {
        return Err(Error::dim("dataset links", n, data.n_links));
    }
    let mut sum = vec![0.0; n];
    let mut count = 0usize;
    for ep in &data.episodes {
        for t in 0..ep.n_steps() {
            let d = model.mean_delta(ep.q(t), ep.qd(t), &ep.actions[t])?;
            for (s, v) in sum.iter_mut().zip(&d) {
                *s += v.abs();
            }
            count += 1;
        }
    }
    Ok(sum.into_iter().map(|s| s / count.max(1) as f64).collect())
}

/// Bit-level equality of a delta model's parameters, for checking that
/// fine-tuning left it untouched.
pub fn same_parameters(a: &DeltaActionModel, b: &DeltaActionModel) -> bool {
    let bits = |m: &DeltaActionModel| -> Vec<u64> { m.policy.flat_params().iter().map(|v| v.to_bits()).collect() };
    bits(a) == bits(b) && a.active == b.active && a.clamp == b.clamp
}

/// A constant-offset correction, useful as a reference plant.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantDelta(pub Vec<f64>);

impl crate::tracking::ActionCorrection for ConstantDelta {
    fn delta(&self, _state: &SimState, _action: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}
