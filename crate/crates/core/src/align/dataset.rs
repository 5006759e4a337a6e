//! Recorded trajectories from the real-proxy plant.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsParams, SimState};
use crate::error::{Error, Result};
use crate::formats::{ByteReader, ByteWriter, TRAJ_MAGIC};
use crate::ppo::{Environment, Outcome};
use crate::reference::ReferenceMotion;
use crate::tracking::{DomainRandomization, PolicyBank, Plant, TrackingConfig, TrackingEnv};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Sim,
    RealProxy,
}

/// One recorded rollout: `states[t]` is `[q, qd]` before `actions[t]` is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub motion: String,
    /// Setpoint that filled the servo delay line when the episode started.
    pub prime: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub failed: bool,
}

impl Episode {
    pub fn n_steps(&self) -> usize {
        self.actions.len()
    }

    pub fn q(&self, t: usize) -> &[f64] {
        &self.states[t][..self.prime.len()]
    }

    pub fn qd(&self, t: usize) -> &[f64] {
        &self.states[t][self.prime.len()..]
    }

    /// Simulator state at step `t` with the delay line rebuilt for `params`
    /// from the recorded action history.
    pub fn state_at(&self, t: usize, dt: f64, params: &DynamicsParams) -> SimState {
        SimState::with_history(
            self.q(t).to_vec(),
            self.qd(t).to_vec(),
            t as f64 * dt,
            self.actions[..t].iter().rev().map(|a| a.as_slice()),
            &self.prime,
            params,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    /// Control period (s).
    pub dt: f64,
    pub n_links: usize,
    /// Digest of the parameters of the plant that generated the data.
    pub params_hash: String,
    pub provenance: Provenance,
    pub episodes: Vec<Episode>,
}

impl TrajectoryDataset {
    pub fn empty(dt: f64, n_links: usize, params_hash: String, provenance: Provenance) -> Self {
        Self {
            dt,
            n_links,
            params_hash,
            provenance,
            episodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Episode::n_steps).sum()
    }

    /// Episodes whose index satisfies `keep`, in order.
    pub fn subset(&self, keep: impl Fn(usize, &Episode) -> bool) -> Self {
        Self {
            episodes: self
                .episodes
                .iter()
                .enumerate()
                .filter(|(i, e)| keep(*i, e))
                .map(|(_, e)| e.clone())
                .collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidArgument("dataset dt must be positive".into()));
        }
        let n = self.n_links;
        for (i, e) in self.episodes.iter().enumerate() {
            let bad = |m: String| Err(Error::InvalidArgument(format!("episode {i}: {m}")));
            if e.n_steps() < 2 {
                return bad(format!("{} steps, at least 2 required", e.n_steps()));
            }
            if e.states.len() != e.n_steps() + 1 {
                return bad(format!("{} states for {} actions", e.states.len(), e.n_steps()));
            }
            if e.prime.len() != n
                || e.states.iter().any(|s| s.len() != 2 * n)
                || e.actions.iter().any(|a| a.len() != n)
            {
                return bad("vector length does not match n_links".into());
            }
            if e.states.iter().chain(&e.actions).flatten().any(|v| !v.is_finite()) {
                return bad("non-finite value".into());
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = ByteWriter::default();
        w.bytes(TRAJ_MAGIC);
        w.f64(self.dt);
        w.u32(self.n_links as u32);
        w.str16(&self.params_hash)?;
        w.u8(match self.provenance {
            Provenance::Sim => 0,
            Provenance::RealProxy => 1,
        });
        w.u32(self.episodes.len() as u32);
        for e in &self.episodes {
            w.str16(&e.motion)?;
            w.u8(e.failed as u8);
            w.u32(e.n_steps() as u32);
            w.f64s(&e.prime);
            for s in &e.states {
                w.f64s(s);
            }
            for a in &e.actions {
                w.f64s(a);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("trajectory", data, TRAJ_MAGIC)?;
        let dt = r.f64()?;
        let n = r.u32()? as usize;
        if n == 0 || n > crate::dynamics::MAX_LINKS {
            return Err(r.fail(format!("{n} links")));
        }
        let params_hash = r.str16()?;
        let provenance = match r.u8()? {
            0 => Provenance::Sim,
            1 => Provenance::RealProxy,
            p => return Err(r.fail(format!("unknown provenance {p}"))),
        };
        let count = r.u32()? as usize;
        let mut ds = Self::empty(dt, n, params_hash, provenance);
        for _ in 0..count {
            let motion = r.str16()?;
            let failed = match r.u8()? {
                0 => false,
                1 => true,
                f => return Err(r.fail(format!("bad failure flag {f}"))),
            };
            let steps = r.u32()? as usize;
            let prime = r.f64s(n)?;
            let states = r.f64s((steps + 1) * 2 * n)?;
            let actions = r.f64s(steps * n)?;
            ds.episodes.push(Episode {
                motion,
                prime,
                states: states.chunks_exact(2 * n).map(<[f64]>::to_vec).collect(),
                actions: actions.chunks_exact(n).map(<[f64]>::to_vec).collect(),
                failed,
            });
        }
        r.finish()?;
        ds.validate().map_err(|e| r.fail(e.to_string()))?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub n_episodes: usize,
    /// Episodes start at a random phase leaving at least this many seconds.
    pub min_episode_s: f64,
    pub max_episode_s: f64,
    /// Mean body-point distance (m) that marks an episode failed.
    pub fail_threshold: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            n_episodes: 100,
            min_episode_s: 2.0,
            max_episode_s: 4.0,
            fail_threshold: 0.5,
        }
    }
}

/// Rolls out the bank's mean actions in the `real` plant, cycling through
/// `motions` in order. Body points are measured with `geometry`.
pub fn collect_rollouts(
    bank: &PolicyBank,
    motions: &[Arc<ReferenceMotion>],
    real: &DynamicsParams,
    geometry: &DynamicsParams,
    tracking: &TrackingConfig,
    cfg: &CollectConfig,
    seed: u64,
) -> Result<TrajectoryDataset> {
    real.validate()?;
    let mut ds = TrajectoryDataset::empty(
        real.control_dt(),
        real.n_links,
        real.digest(),
        Provenance::RealProxy,
    );
    if cfg.n_episodes == 0 {
        return Ok(ds);
    }
    if motions.is_empty() {
        return Err(Error::InvalidArgument("no motions to collect".into()));
    }
    let mut tcfg = tracking.clone();
    tcfg.domain_randomization = DomainRandomization::off();
    tcfg.curriculum.fixed = Some(cfg.fail_threshold);
    let mut envs = Vec::with_capacity(motions.len());
    for m in motions {
        let agent = bank
            .get(&m.name)
            .ok_or_else(|| Error::InvalidArgument(format!("no policy for motion {}", m.name)))?;
        let mut env = TrackingEnv::new(m.clone(), real.clone(), tcfg.clone(), Plant::Sim)?;
        env.set_measurement_params(geometry.clone());
        envs.push((env, agent));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_steps = (cfg.max_episode_s / real.control_dt()).round().max(2.0) as usize;
    let mut obs = Vec::new();
    for i in 0..cfg.n_episodes {
        let (env, agent) = &mut envs[i % motions.len()];
        let span = (1.0 - cfg.min_episode_s / env.motion().duration()).max(0.0);
        let phase = if span > 0.0 { rng.gen_range(0.0..span) } else { 0.0 };
        env.reset_deterministic(phase)?;
        let prime = env.state().q.clone();
        let mut ep = Episode {
            motion: env.motion().name.clone(),
            prime,
            states: vec![env.state().flat()],
            actions: Vec::new(),
            failed: false,
        };
        while ep.actions.len() < max_steps {
            env.actor_obs(&mut obs);
            let a = agent.act_deterministic(&obs)?;
            let out = env.step(&a, &mut rng)?;
            if env.aborted().is_some() {
                ep.failed = true;
                break;
            }
            ep.actions.push(a);
            ep.states.push(env.state().flat());
            match out.outcome {
                Outcome::Terminated => {
                    ep.failed = true;
                    break;
                }
                Outcome::Completed | Outcome::Truncated => break,
                Outcome::Continue => {}
            }
        }
        if ep.n_steps() < 2 {
            return Err(Error::Numeric(format!(
                "episode {i} on {} diverged after {} steps",
                ep.motion,
                ep.n_steps()
            )));
        }
        ds.episodes.push(ep);
    }
    Ok(ds)
}

/// Policy-free rollouts in `real`: each episode starts at rest from a random
/// pose and applies a sum of two sinusoids per joint with random amplitude,
/// frequency and phase.
pub fn excitation_rollouts(
    real: &DynamicsParams,
    n_episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    real.validate()?;
    let n = real.n_links;
    let dt = real.control_dt();
    let mut ds = TrajectoryDataset::empty(dt, n, real.digest(), Provenance::RealProxy);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in 0..n_episodes {
        let q0: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let waves: Vec<[(f64, f64, f64); 2]> = (0..n)
            .map(|_| {
                [0, 1].map(|_| {
                    (
                        rng.gen_range(0.1..0.5),
                        rng.gen_range(0.2..1.5),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
            })
            .collect();
        let mut s = SimState::at_rest(q0.clone(), real);
        let mut ep = Episode {
            motion: format!("excitation_{e:03}"),
            prime: q0.clone(),
            states: vec![s.flat()],
            actions: Vec::new(),
            failed: false,
        };
        for t in 0..steps {
            let time = t as f64 * dt;
            let a: Vec<f64> = (0..n)
                .map(|j| {
                    q0[j]
                        + waves[j]
                            .iter()
                            .map(|(amp, hz, ph)| amp * ((std::f64::consts::TAU * hz * time + ph).sin() - ph.sin()))
                            .sum::<f64>()
                })
                .collect();
            crate::dynamics::control_step(&mut s, &a, real)?;
            if !s.is_finite() {
                return Err(Error::Numeric(format!("excitation episode {e} diverged")));
            }
            ep.actions.push(a);
            ep.states.push(s.flat());
        }
        ds.episodes.push(ep);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::control_step;
    use crate::ppo::{Agent, PpoConfig};
    use crate::reference::{generate_synthetic, Difficulty};
    use proptest::prelude::*;

    pub(crate) fn untrained_bank(motion: &ReferenceMotion, tcfg: &TrackingConfig) -> PolicyBank {
        let n = motion.n_links();
        let h = tcfg.phase_harmonics;
        let cfg = PpoConfig {
            hidden: vec![8],
            ..PpoConfig::default()
        };
        let agent = Agent::new(
            TrackingEnv::actor_dim(n, h),
            TrackingEnv::critic_dim(n, h),
            n,
            &cfg,
            1,
        );
        PolicyBank::from([(motion.name.clone(), agent)])
    }

    fn small(n_episodes: usize) -> (TrajectoryDataset, DynamicsParams) {
        let p = DynamicsParams::nominal();
        let m = Arc::new(generate_synthetic(Difficulty::Easy, 2, &p));
        let tcfg = TrackingConfig::default();
        let bank = untrained_bank(&m, &tcfg);
        let cfg = CollectConfig {
            n_episodes,
            max_episode_s: 1.0,
            ..CollectConfig::default()
        };
        (collect_rollouts(&bank, &[m], &p, &p, &tcfg, &cfg, 4).unwrap(), p)
    }

    #[test]
    fn zero_episodes_is_empty() {
        let (ds, _) = small(0);
        assert!(ds.is_empty());
    }

    #[test]
    fn identity_gap_replay_is_exact() {
        let (ds, p) = small(3);
        assert_eq!(ds.len(), 3);
        for e in &ds.episodes {
            for t0 in [0, 1, 5, e.n_steps() / 2] {
                let mut s = e.state_at(t0, ds.dt, &p);
                for t in t0..e.n_steps() {
                    control_step(&mut s, &e.actions[t], &p).unwrap();
                    let err = s
                        .flat()
                        .iter()
                        .zip(&e.states[t + 1])
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    assert!(err < 1e-9, "step {t}: {err}");
                }
            }
        }
    }

    #[test]
    fn validate_rejects_short_and_nonfinite() {
        let (mut ds, _) = small(1);
        let mut bad = ds.clone();
        bad.episodes[0].states[3][0] = f64::NAN;
        assert!(bad.validate().is_err());
        ds.episodes[0].actions.truncate(1);
        ds.episodes[0].states.truncate(2);
        assert!(ds.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn trajectory_round_trip(steps in 2usize..20, eps in 0usize..4, failed in any::<bool>(), x in -3.0f64..3.0) {
            let n = 3;
            let mut ds = TrajectoryDataset::empty(0.01, n, "abc".into(), Provenance::Sim);
            for k in 0..eps {
                ds.episodes.push(Episode {
                    motion: format!("m{k}"),
                    prime: vec![x; n],
                    states: (0..=steps).map(|t| vec![x * t as f64; 2 * n]).collect(),
                    actions: (0..steps).map(|t| vec![x + t as f64; n]).collect(),
                    failed,
                });
            }
            let back = TrajectoryDataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }

    #[test]
    fn excitation_is_deterministic_and_replays_exactly() {
        let p = DynamicsParams::nominal();
        let a = excitation_rollouts(&p, 3, 50, 4).unwrap();
        assert_eq!(a, excitation_rollouts(&p, 3, 50, 4).unwrap());
        a.validate().unwrap();
        assert_eq!(a.total_steps(), 150);
        for ep in &a.episodes {
            assert_eq!(ep.actions[0], ep.prime);
            let mut s = ep.state_at(0, a.dt, &p);
            for (t, act) in ep.actions.iter().enumerate() {
                control_step(&mut s, act, &p).unwrap();
                assert_eq!(s.flat(), ep.states[t + 1]);
            }
        }
    }
}
