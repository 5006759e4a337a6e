//! Tracking metrics, open-loop replay and closed-loop deployment harnesses.
//!
//! Positions are in meters and errors are reported in millimeters. Frames are
//! taken at the control rate, so `E_acc` is mm/frame² and `E_vel` mm/frame
//! at that rate.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::TrajectoryDataset;
use crate::dynamics::{forward_kinematics, DynamicsParams, SimState};
use crate::error::{Error, Result};
use crate::ppo::{Agent, Environment, Outcome};
use crate::reference::{Difficulty, ReferenceMotion};
use crate::tracking::{plant_step, DomainRandomization, Plant, TrackingConfig, TrackingEnv};

/// Mean body-point distance (m) beyond which a rollout counts as failed.
pub const SUCCESS_THRESHOLD: f64 = 0.5;

/// Tracked body points of one frame.
pub type BodyFrame = Vec<[f64; 2]>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TrackingMetrics {
    pub success: bool,
    pub e_g_mpjpe: f64,
    pub e_mpjpe: f64,
    pub e_acc: f64,
    pub e_vel: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Points expressed in the root frame: origin at the first tracked point
/// (the outboard joint of link 0), x axis along link 0 (from its COM, the
/// second tracked point, towards the root).
fn root_relative(frame: &[[f64; 2]]) -> BodyFrame {
    let root = frame[0];
    let (mut cx, mut cy) = (1.0, 0.0);
    if frame.len() > 1 {
        let d = [root[0] - frame[1][0], root[1] - frame[1][1]];
        let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if norm > 1e-12 {
            cx = d[0] / norm;
            cy = d[1] / norm;
        }
    }
    frame
        .iter()
        .map(|p| {
            let (x, y) = (p[0] - root[0], p[1] - root[1]);
            [cx * x + cy * y, -cy * x + cx * y]
        })
        .collect()
}

pub fn compute_metrics(sim: &[BodyFrame], reference: &[BodyFrame]) -> Result<TrackingMetrics> {
    if sim.len() != reference.len() {
        return Err(Error::dim("metric frames", reference.len(), sim.len()));
    }
    if sim.is_empty() {
        return Err(Error::InvalidArgument("no frames to score".into()));
    }
    let m = reference[0].len();
    if m == 0 || sim.iter().chain(reference).any(|f| f.len() != m) {
        return Err(Error::InvalidArgument("body point counts differ".into()));
    }
    let frames = sim.len();
    let mut out = TrackingMetrics {
        success: true,
        ..Default::default()
    };
    for (s, r) in sim.iter().zip(reference) {
        let mean: f64 = s.iter().zip(r).map(|(a, b)| dist(*a, *b)).sum::<f64>() / m as f64;
        out.e_g_mpjpe += mean;
        if mean > SUCCESS_THRESHOLD {
            out.success = false;
        }
        let (sr, rr) = (root_relative(s), root_relative(r));
        out.e_mpjpe += sr.iter().zip(&rr).map(|(a, b)| dist(*a, *b)).sum::<f64>() / m as f64;
    }
    out.e_g_mpjpe *= 1000.0 / frames as f64;
    out.e_mpjpe *= 1000.0 / frames as f64;
    if frames >= 3 {
        let mut acc = 0.0;
        for t in 1..frames - 1 {
            for j in 0..m {
                let d2 = |f: &[BodyFrame], k: usize| f[t + 1][j][k] - 2.0 * f[t][j][k] + f[t - 1][j][k];
                acc += ((d2(sim, 0) - d2(reference, 0)).powi(2) + (d2(sim, 1) - d2(reference, 1)).powi(2)).sqrt();
            }
        }
        out.e_acc = 1000.0 * acc / ((frames - 2) * m) as f64;
    }
    if frames >= 2 {
        let mut vel = 0.0;
        for t in 1..frames {
            let d1 = |f: &[BodyFrame], k: usize| f[t][0][k] - f[t - 1][0][k];
            vel += ((d1(sim, 0) - d1(reference, 0)).powi(2) + (d1(sim, 1) - d1(reference, 1)).powi(2)).sqrt();
        }
        out.e_vel = 1000.0 * vel / (frames - 1) as f64;
    }
    Ok(out)
}

/// Mean of per-window metrics; `success_rate` is the fraction successful.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricSummary {
    pub count: usize,
    pub success_rate: f64,
    pub e_g_mpjpe: f64,
    pub e_mpjpe: f64,
    pub e_acc: f64,
    pub e_vel: f64,
}

impl MetricSummary {
    pub fn mean(items: &[TrackingMetrics]) -> Self {
        let k = items.len().max(1) as f64;
        let sum = |f: fn(&TrackingMetrics) -> f64| items.iter().map(f).sum::<f64>() / k;
        Self {
            count: items.len(),
            success_rate: sum(|m| m.success as u8 as f64),
            e_g_mpjpe: sum(|m| m.e_g_mpjpe),
            e_mpjpe: sum(|m| m.e_mpjpe),
            e_acc: sum(|m| m.e_acc),
            e_vel: sum(|m| m.e_vel),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpenLoopRow {
    pub method: String,
    pub horizon_s: f64,
    pub windows: usize,
    pub e_g_mpjpe: f64,
    pub e_mpjpe: f64,
    pub e_acc: f64,
    pub e_vel: f64,
}

pub const DEFAULT_HORIZONS: [f64; 3] = [0.25, 0.5, 1.0];
/// Spacing (s) of replay start points within each episode.
pub const DEFAULT_STRIDE_S: f64 = 0.25;

/// Replays each window of `data` from its recorded start state through
/// `plant` with `params` and scores body points against the recording.
///
/// Start points lie on a fixed stride grid; each horizon scores every start
/// whose window fits in its episode, using prefixes of one replay per start.
pub fn open_loop_eval(
    data: &TrajectoryDataset,
    params: &DynamicsParams,
    plant: &Plant,
    geometry: &DynamicsParams,
    horizons: &[f64],
    stride_s: f64,
    method: &str,
) -> Result<Vec<OpenLoopRow>> {
    if horizons.is_empty() || horizons.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::InvalidArgument("horizons must be positive".into()));
    }
    if data.n_links != params.n_links {
        return Err(Error::dim("dataset links", params.n_links, data.n_links));
    }
    let dt = data.dt;
    let steps: Vec<usize> = horizons.iter().map(|h| (h / dt).round().max(1.0) as usize).collect();
    let shortest = *steps.iter().min().unwrap();
    let stride = (stride_s / dt).round().max(1.0) as usize;
    let n = data.n_links;
    let mut per_horizon: Vec<Vec<TrackingMetrics>> = vec![Vec::new(); horizons.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for ep in &data.episodes {
        let mut t0 = 0;
        while t0 + shortest <= ep.n_steps() {
            let longest = steps.iter().copied().filter(|&k| t0 + k <= ep.n_steps()).max().unwrap();
            let mut s = ep.state_at(t0, dt, params);
            let mut sim = vec![forward_kinematics(&s.q, geometry).tracked()];
            let mut real = sim.clone();
            for k in 0..longest {
                plant_step(plant, &mut s, &ep.actions[t0 + k], params, &mut rng)?;
                if !s.is_finite() {
                    return Err(Error::Numeric(format!("open-loop replay diverged on {}", ep.motion)));
                }
                sim.push(forward_kinematics(&s.q, geometry).tracked());
                real.push(forward_kinematics(&ep.states[t0 + k + 1][..n], geometry).tracked());
            }
            for (h, &len) in steps.iter().enumerate().filter(|(_, &k)| k <= longest) {
                per_horizon[h].push(compute_metrics(&sim[..=len], &real[..=len])?);
            }
            t0 += stride;
        }
    }
    if let Some(h) = per_horizon.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!(
            "no episode covers the {} s horizon",
            horizons[h]
        )));
    }
    Ok(horizons
        .iter()
        .zip(&per_horizon)
        .map(|(&h, ms)| {
            let s = MetricSummary::mean(ms);
            OpenLoopRow {
                method: method.to_string(),
                horizon_s: h,
                windows: s.count,
                e_g_mpjpe: s.e_g_mpjpe,
                e_mpjpe: s.e_mpjpe,
                e_acc: s.e_acc,
                e_vel: s.e_vel,
            }
        })
        .collect())
}

/// Maps the tracking observation (and true state) to a joint setpoint.
pub trait Controller: Sync {
    fn act(&self, obs: &[f64], state: &SimState) -> Result<Vec<f64>>;
}

impl Controller for Agent {
    fn act(&self, obs: &[f64], _state: &SimState) -> Result<Vec<f64>> {
        self.act_deterministic(obs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosedLoopResult {
    pub motion: String,
    pub difficulty: Difficulty,
    pub seed: u64,
    /// Control steps executed before completion or failure.
    pub steps: usize,
    pub metrics: TrackingMetrics,
}

/// Deploys `controller` on `motion` from phase 0 in `plant` with `params`,
/// without randomization, until completion or failure.
pub fn closed_loop_run(
    controller: &dyn Controller,
    motion: Arc<ReferenceMotion>,
    params: &DynamicsParams,
    plant: Plant,
    geometry: &DynamicsParams,
    tracking: &TrackingConfig,
    seed: u64,
) -> Result<ClosedLoopResult> {
    let mut cfg = tracking.clone();
    cfg.domain_randomization = DomainRandomization::off();
    cfg.curriculum.fixed = Some(SUCCESS_THRESHOLD);
    let mut env = TrackingEnv::new(motion.clone(), params.clone(), cfg, plant)?;
    env.set_measurement_params(geometry.clone());
    env.reset_deterministic(0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sim = vec![forward_kinematics(&env.state().q, geometry).tracked()];
    let mut reference = vec![env.reference().body];
    let mut obs = Vec::new();
    let mut failed = false;
    loop {
        env.actor_obs(&mut obs);
        let a = controller.act(&obs, env.state())?;
        let out = env.step(&a, &mut rng)?;
        if env.aborted().is_some() {
            failed = true;
            break;
        }
        sim.push(forward_kinematics(&env.state().q, geometry).tracked());
        reference.push(env.reference().body);
        match out.outcome {
            Outcome::Continue => {}
            Outcome::Terminated => {
                failed = true;
                break;
            }
            Outcome::Completed | Outcome::Truncated => break,
        }
    }
    let mut metrics = compute_metrics(&sim, &reference)?;
    metrics.success &= !failed;
    Ok(ClosedLoopResult {
        motion: motion.name.clone(),
        difficulty: motion.difficulty,
        seed,
        steps: sim.len() - 1,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosedLoopRow {
    pub method: String,
    pub difficulty: Difficulty,
    pub runs: usize,
    pub success_rate: f64,
    pub e_g_mpjpe_mean: f64,
    pub e_g_mpjpe_std: f64,
    pub e_mpjpe_mean: f64,
    pub e_mpjpe_std: f64,
    pub e_acc_mean: f64,
    pub e_acc_std: f64,
    pub e_vel_mean: f64,
    pub e_vel_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let k = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / k;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / k;
    (m, v.sqrt())
}

/// Per-difficulty aggregate. Each seed's metrics are first averaged over its
/// motions; mean and std are then taken across seeds.
pub fn summarize_closed_loop(method: &str, results: &[ClosedLoopResult]) -> Vec<ClosedLoopRow> {
    let mut rows = Vec::new();
    for d in Difficulty::ALL {
        let of_d: Vec<&ClosedLoopResult> = results.iter().filter(|r| r.difficulty == d).collect();
        if of_d.is_empty() {
            continue;
        }
        let mut seeds: Vec<u64> = of_d.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let per_seed: Vec<MetricSummary> = seeds
            .iter()
            .map(|s| {
                let ms: Vec<TrackingMetrics> =
                    of_d.iter().filter(|r| r.seed == *s).map(|r| r.metrics).collect();
                MetricSummary::mean(&ms)
            })
            .collect();
        let col = |f: fn(&MetricSummary) -> f64| mean_std(&per_seed.iter().map(f).collect::<Vec<_>>());
        let (g, gs) = col(|m| m.e_g_mpjpe);
        let (l, ls) = col(|m| m.e_mpjpe);
        let (a, as_) = col(|m| m.e_acc);
        let (v, vs) = col(|m| m.e_vel);
        rows.push(ClosedLoopRow {
            method: method.to_string(),
            difficulty: d,
            runs: of_d.len(),
            success_rate: of_d.iter().filter(|r| r.metrics.success).count() as f64 / of_d.len() as f64,
            e_g_mpjpe_mean: g,
            e_g_mpjpe_std: gs,
            e_mpjpe_mean: l,
            e_mpjpe_std: ls,
            e_acc_mean: a,
            e_acc_std: as_,
            e_vel_mean: v,
            e_vel_std: vs,
        });
    }
    rows
}

/// Writes rows as CSV preceded by a `#` comment line stating units.
pub fn write_report<T: Serialize>(path: &Path, rows: &[T], control_hz: f64) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(
        file,
        "# errors in mm; frames at the control rate of {control_hz} Hz (e_acc mm/frame^2, e_vel mm/frame)"
    )?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{collect_rollouts, CollectConfig};
    use crate::reference::generate_synthetic;
    use proptest::prelude::*;

    fn traj(seed: u64, frames: usize) -> Vec<BodyFrame> {
        let p = DynamicsParams::nominal();
        (0..frames)
            .map(|t| {
                let x = t as f64 * 0.05 + seed as f64;
                forward_kinematics(&[x.sin(), 0.5 * x.cos()], &p).tracked()
            })
            .collect()
    }

    fn shifted(f: &[BodyFrame], d: [f64; 2]) -> Vec<BodyFrame> {
        f.iter()
            .map(|fr| fr.iter().map(|p| [p[0] + d[0], p[1] + d[1]]).collect())
            .collect()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let a = traj(1, 20);
        let m = compute_metrics(&a, &a).unwrap();
        assert_eq!(m, TrackingMetrics { success: true, ..Default::default() });
    }

    #[test]
    fn rigid_translation() {
        let a = traj(2, 30);
        let d = 0.03;
        let m = compute_metrics(&shifted(&a, [d, 0.0]), &a).unwrap();
        assert!((m.e_g_mpjpe - 1000.0 * d).abs() < 1e-9);
        assert!(m.e_mpjpe < 1e-9);
        assert!(m.e_acc < 1e-9 && m.e_vel < 1e-9);
        assert!(m.success);
    }

    #[test]
    fn single_far_frame_fails() {
        let a = traj(3, 10);
        let mut b = a.clone();
        b[4] = b[4].iter().map(|p| [p[0] + 0.6, p[1]]).collect();
        assert!(!compute_metrics(&b, &a).unwrap().success);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(compute_metrics(&traj(0, 5), &traj(0, 6)).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_position_errors(s1 in 0u64..50, s2 in 0u64..50, frames in 1usize..12) {
            let (a, b) = (traj(s1, frames), traj(s2, frames));
            let (ab, ba) = (compute_metrics(&a, &b).unwrap(), compute_metrics(&b, &a).unwrap());
            prop_assert!((ab.e_g_mpjpe - ba.e_g_mpjpe).abs() < 1e-9);
            prop_assert!((ab.e_mpjpe - ba.e_mpjpe).abs() < 1e-9);
        }

        #[test]
        fn acc_vel_offset_invariant(s1 in 0u64..50, s2 in 0u64..50, dx in -1.0f64..1.0, dy in -1.0f64..1.0) {
            let (a, b) = (traj(s1, 8), traj(s2, 8));
            let m0 = compute_metrics(&a, &b).unwrap();
            let m1 = compute_metrics(&shifted(&a, [dx, dy]), &b).unwrap();
            prop_assert!((m0.e_acc - m1.e_acc).abs() < 1e-6);
            prop_assert!((m0.e_vel - m1.e_vel).abs() < 1e-6);
        }
    }

    fn dataset() -> (TrajectoryDataset, DynamicsParams) {
        let p = DynamicsParams::nominal();
        let m = Arc::new(generate_synthetic(Difficulty::Easy, 2, &p));
        let tcfg = TrackingConfig::default();
        let n = p.n_links;
        let agent = Agent::new(
            TrackingEnv::actor_dim(n, tcfg.phase_harmonics),
            TrackingEnv::critic_dim(n, tcfg.phase_harmonics),
            n,
            &Default::default(),
            3,
        );
        let bank = crate::tracking::PolicyBank::from([(m.name.clone(), agent)]);
        let cfg = CollectConfig {
            n_episodes: 2,
            max_episode_s: 1.5,
            fail_threshold: 10.0,
            ..Default::default()
        };
        (collect_rollouts(&bank, &[m], &p, &p, &tcfg, &cfg, 1).unwrap(), p)
    }

    #[test]
    fn identity_replay_at_noise_floor() {
        let (ds, p) = dataset();
        let rows = open_loop_eval(&ds, &p, &Plant::Sim, &p, &DEFAULT_HORIZONS, 0.25, "none").unwrap();
        assert_eq!(rows.len(), 3);
        for r in rows {
            assert!(r.windows > 0);
            assert!(r.e_g_mpjpe < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn horizon_prefix_consistency() {
        let (ds, p) = dataset();
        let plant = Plant::ActionNoise { beta: 0.0 };
        let gap = crate::dynamics::apply_gap(&p, &crate::dynamics::GapSpec::motor_weak(&p)).unwrap();
        let all = open_loop_eval(&ds, &gap, &plant, &p, &[0.25, 1.0], 0.25, "x").unwrap();
        let short = open_loop_eval(&ds, &gap, &plant, &p, &[0.25], 0.25, "x").unwrap();
        assert!(all[0].e_g_mpjpe > 0.0);
        assert_eq!(all[0], short[0]);
        assert!(all[0].windows > all[1].windows);
    }

    #[test]
    fn constant_action_policy_fails_and_reports() {
        struct Hold;
        impl Controller for Hold {
            fn act(&self, _obs: &[f64], _s: &SimState) -> Result<Vec<f64>> {
                Ok(vec![2.0, -2.0])
            }
        }
        let p = DynamicsParams::nominal();
        let m = Arc::new(generate_synthetic(Difficulty::Easy, 2, &p));
        let r = closed_loop_run(&Hold, m.clone(), &p, Plant::Sim, &p, &TrackingConfig::default(), 0).unwrap();
        assert!(!r.metrics.success);
        assert!(r.steps < m.n_frames() - 1);
        assert!(r.metrics.e_g_mpjpe > 0.0);
        let rows = summarize_closed_loop("hold", &[r]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].success_rate, 0.0);
    }
}
