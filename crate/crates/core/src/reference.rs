//! Reference motions: synthetic generation, torque-feasibility cleaning and
//! phase indexing.
//!
//! Three generator classes stand in for the difficulty tiers:
//!
//! - `easy`: one small sinusoid per joint around a random centre pose.
//! - `medium`: three harmonics per joint with independent phase offsets.
//! - `hard`: rest-to-rest swings between distant configurations, each
//!   segment following a minimum-jerk time profile.
//!
//! Every generator is an analytic function of time, so joint velocities are
//! exact rather than finite-differenced.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{forward_kinematics, inverse_dynamics, DynamicsParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn code(self) -> u8 {
        match self {
            Difficulty::Easy => 0,
            Difficulty::Medium => 1,
            Difficulty::Hard => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        })
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::InvalidArgument(format!("unknown difficulty {other:?}"))),
        }
    }
}

/// Time-indexed joint and body-point reference, sampled at the control rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceMotion {
    pub name: String,
    pub difficulty: Difficulty,
    pub dt: f64,
    pub q_ref: Vec<Vec<f64>>,
    pub qd_ref: Vec<Vec<f64>>,
    /// Tracked body points per frame (see `BodyPoints::tracked`).
    pub body_ref: Vec<Vec<[f64; 2]>>,
}

/// One interpolated reference sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub body: Vec<[f64; 2]>,
}

impl ReferenceMotion {
    /// Samples `profile` at `dt` over `duration` seconds.
    pub fn from_profile(
        name: impl Into<String>,
        difficulty: Difficulty,
        profile: &MotionProfile,
        duration: f64,
        params: &DynamicsParams,
    ) -> Self {
        let dt = params.control_dt();
        let n_frames = ((duration / dt).round() as usize).max(1) + 1;
        let mut q_ref = Vec::with_capacity(n_frames);
        let mut qd_ref = Vec::with_capacity(n_frames);
        let mut body_ref = Vec::with_capacity(n_frames);
        for k in 0..n_frames {
            let (q, qd, _) = profile.eval(k as f64 * dt);
            body_ref.push(forward_kinematics(&q, params).tracked());
            q_ref.push(q);
            qd_ref.push(qd);
        }
        Self {
            name: name.into(),
            difficulty,
            dt,
            q_ref,
            qd_ref,
            body_ref,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.q_ref.len()
    }

    pub fn n_links(&self) -> usize {
        self.q_ref.first().map_or(0, Vec::len)
    }

    pub fn duration(&self) -> f64 {
        (self.n_frames() - 1) as f64 * self.dt
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_links();
        if self.n_frames() < 2 {
            return Err(Error::InvalidArgument(format!(
                "motion {} needs at least 2 frames",
                self.name
            )));
        }
        if self.qd_ref.len() != self.n_frames() || self.body_ref.len() != self.n_frames() {
            return Err(Error::InvalidArgument(format!(
                "motion {} has ragged frame arrays",
                self.name
            )));
        }
        let finite = self
            .q_ref
            .iter()
            .chain(&self.qd_ref)
            .all(|f| f.len() == n && f.iter().all(|v| v.is_finite()));
        if !finite || !(self.dt > 0.0) {
            return Err(Error::NonFinite(format!("motion {}", self.name)));
        }
        Ok(())
    }

    /// Linear interpolation between bracketing frames; `phase = 1` is the last
    /// frame exactly.
    pub fn frame_at_phase(&self, phase: f64) -> Result<Frame> {
        if !(0.0..=1.0).contains(&phase) {
            return Err(Error::InvalidArgument(format!("phase {phase} outside [0, 1]")));
        }
        let last = self.n_frames() - 1;
        let x = phase * last as f64;
        let i0 = (x.floor() as usize).min(last);
        let frac = x - i0 as f64;
        if i0 == last || frac == 0.0 {
            return Ok(self.frame(i0));
        }
        let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| x + frac * (y - x)).collect()
        };
        let body = self.body_ref[i0]
            .iter()
            .zip(&self.body_ref[i0 + 1])
            .map(|(a, b)| [a[0] + frac * (b[0] - a[0]), a[1] + frac * (b[1] - a[1])])
            .collect();
        Ok(Frame {
            q: lerp(&self.q_ref[i0], &self.q_ref[i0 + 1]),
            qd: lerp(&self.qd_ref[i0], &self.qd_ref[i0 + 1]),
            body,
        })
    }

    pub fn frame(&self, index: usize) -> Frame {
        Frame {
            q: self.q_ref[index].clone(),
            qd: self.qd_ref[index].clone(),
            body: self.body_ref[index].clone(),
        }
    }
}

/// Analytic joint trajectory.
#[derive(Clone, Debug, PartialEq)]
pub enum MotionProfile {
    /// `q_i(t) = centre_i + Σ_h amp·sin(2π·freq·t + phase)`.
    Harmonic {
        centre: Vec<f64>,
        terms: Vec<Vec<Harmonic>>,
    },
    /// Piecewise minimum-jerk moves between waypoints, resting `hold`
    /// seconds at each waypoint.
    MinJerk {
        waypoints: Vec<Vec<f64>>,
        move_time: Vec<f64>,
        hold: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Harmonic {
    pub amp: f64,
    pub freq: f64,
    pub phase: f64,
}

impl MotionProfile {
    pub fn duration_hint(&self) -> Option<f64> {
        match self {
            MotionProfile::Harmonic { .. } => None,
            MotionProfile::MinJerk { move_time, hold, .. } => {
                Some(move_time.iter().sum::<f64>() + hold * (move_time.len() + 1) as f64)
            }
        }
    }

    /// Position, velocity and acceleration at time `t`.
    pub fn eval(&self, t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        match self {
            MotionProfile::Harmonic { centre, terms } => {
                let n = centre.len();
                let mut q = centre.clone();
                let mut qd = vec![0.0; n];
                let mut qdd = vec![0.0; n];
                for (i, joint_terms) in terms.iter().enumerate() {
                    for h in joint_terms {
                        let w = TAU * h.freq;
                        let arg = w * t + h.phase;
                        q[i] += h.amp * arg.sin();
                        qd[i] += h.amp * w * arg.cos();
                        qdd[i] -= h.amp * w * w * arg.sin();
                    }
                }
                (q, qd, qdd)
            }
            MotionProfile::MinJerk {
                waypoints,
                move_time,
                hold,
            } => {
                let n = waypoints[0].len();
                let mut clock = t - hold;
                for (seg, &dur) in move_time.iter().enumerate() {
                    if clock < 0.0 {
                        return (waypoints[seg].clone(), vec![0.0; n], vec![0.0; n]);
                    }
                    if clock < dur {
                        let s = clock / dur;
                        let pos = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
                        let vel = 30.0 * s * s * (1.0 - s) * (1.0 - s) / dur;
                        let acc = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / (dur * dur);
                        let (a, b) = (&waypoints[seg], &waypoints[seg + 1]);
                        let q = (0..n).map(|i| a[i] + pos * (b[i] - a[i])).collect();
                        let qd = (0..n).map(|i| vel * (b[i] - a[i])).collect();
                        let qdd = (0..n).map(|i| acc * (b[i] - a[i])).collect();
                        return (q, qd, qdd);
                    }
                    clock -= dur + hold;
                }
                (waypoints.last().unwrap().clone(), vec![0.0; n], vec![0.0; n])
            }
        }
    }
}

/// Tunables for the synthetic generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Multiplies every amplitude; 0 yields a constant pose.
    pub amplitude_scale: f64,
    pub easy_duration: (f64, f64),
    pub medium_duration: (f64, f64),
    /// Swing magnitude range for the base joint of hard motions (rad).
    pub hard_swing: (f64, f64),
    pub hard_move_time: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            amplitude_scale: 1.0,
            easy_duration: (2.0, 3.5),
            medium_duration: (3.0, 5.0),
            hard_swing: (0.7, 1.1),
            hard_move_time: (0.9, 1.2),
        }
    }
}

/// Draws the analytic profile and duration for a motion of `kind`.
pub fn synthetic_profile(
    kind: Difficulty,
    seed: u64,
    n_links: usize,
    cfg: &GeneratorConfig,
) -> (MotionProfile, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_7469_6f6e);
    let scale = cfg.amplitude_scale;
    match kind {
        Difficulty::Easy => {
            let duration = rng.gen_range(cfg.easy_duration.0..=cfg.easy_duration.1);
            let freq = rng.gen_range(0.3..0.7);
            let centre: Vec<f64> = (0..n_links).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let terms = (0..n_links)
                .map(|_| {
                    vec![Harmonic {
                        amp: scale * rng.gen_range(0.15..0.4),
                        freq,
                        phase: rng.gen_range(0.0..TAU),
                    }]
                })
                .collect();
            (MotionProfile::Harmonic { centre, terms }, duration)
        }
        Difficulty::Medium => {
            let duration = rng.gen_range(cfg.medium_duration.0..=cfg.medium_duration.1);
            let base = rng.gen_range(0.3..0.55);
            let centre: Vec<f64> = (0..n_links).map(|_| rng.gen_range(-0.4..0.4)).collect();
            let terms = (0..n_links)
                .map(|_| {
                    (1..=3)
                        .map(|h| Harmonic {
                            amp: scale * rng.gen_range(0.1..0.3) / h as f64,
                            freq: base * h as f64,
                            phase: rng.gen_range(0.0..TAU),
                        })
                        .collect()
                })
                .collect();
            (MotionProfile::Harmonic { centre, terms }, duration)
        }
        Difficulty::Hard => {
            let n_moves = rng.gen_range(2..=3usize);
            let hold = 0.2;
            let mut waypoints = Vec::with_capacity(n_moves + 1);
            let start: Vec<f64> = (0..n_links).map(|_| scale * rng.gen_range(-0.2..0.2)).collect();
            waypoints.push(start);
            let mut sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for _ in 0..n_moves {
                let mut w = Vec::with_capacity(n_links);
                w.push(scale * sign * rng.gen_range(cfg.hard_swing.0..=cfg.hard_swing.1));
                for _ in 1..n_links {
                    w.push(scale * rng.gen_range(-0.9..0.9));
                }
                waypoints.push(w);
                sign = -sign;
            }
            let move_time: Vec<f64> = (0..n_moves)
                .map(|_| rng.gen_range(cfg.hard_move_time.0..=cfg.hard_move_time.1))
                .collect();
            let profile = MotionProfile::MinJerk {
                waypoints,
                move_time,
                hold,
            };
            let duration = profile.duration_hint().unwrap();
            (profile, duration)
        }
    }
}

pub fn generate_synthetic(kind: Difficulty, seed: u64, params: &DynamicsParams) -> ReferenceMotion {
    generate_synthetic_with(kind, seed, params, &GeneratorConfig::default())
}

pub fn generate_synthetic_with(
    kind: Difficulty,
    seed: u64,
    params: &DynamicsParams,
    cfg: &GeneratorConfig,
) -> ReferenceMotion {
    let (profile, duration) = synthetic_profile(kind, seed, params.n_links, cfg);
    ReferenceMotion::from_profile(format!("{kind}_{seed}"), kind, &profile, duration, params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityReport {
    pub accepted: bool,
    /// Peak |τ| per joint over all frames (N·m).
    pub peak_torque: Vec<f64>,
    pub worst_frame: usize,
}

/// Inverse-dynamics torque check along the reference.
pub fn feasibility_clean(motion: &ReferenceMotion, params: &DynamicsParams) -> Result<FeasibilityReport> {
    let n = params.n_links;
    if motion.n_links() != n {
        return Err(Error::dim("motion joints", n, motion.n_links()));
    }
    let frames = motion.n_frames();
    let mut peak = vec![0.0; n];
    let mut worst_frame = 0;
    let mut worst_ratio = 0.0;
    for k in 0..frames {
        // Central differences of the analytic velocities; one-sided at the ends.
        let (lo, hi) = (k.saturating_sub(1), (k + 1).min(frames - 1));
        let span = (hi - lo) as f64 * motion.dt;
        let qdd: Vec<f64> = (0..n)
            .map(|i| (motion.qd_ref[hi][i] - motion.qd_ref[lo][i]) / span)
            .collect();
        let tau = inverse_dynamics(&motion.q_ref[k], &motion.qd_ref[k], &qdd, params);
        for i in 0..n {
            let a = tau[i].abs();
            if a > peak[i] {
                peak[i] = a;
            }
            let ratio = if params.torque_limit[i] > 0.0 {
                a / params.torque_limit[i]
            } else if a > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            if ratio > worst_ratio {
                worst_ratio = ratio;
                worst_frame = k;
            }
        }
    }
    let accepted = (0..n).all(|i| peak[i] <= params.torque_limit[i]);
    Ok(FeasibilityReport {
        accepted,
        peak_torque: peak,
        worst_frame,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

#[derive(Clone, Debug, Default)]
pub struct MotionSet {
    pub motions: Vec<ReferenceMotion>,
    pub splits: Vec<Split>,
}

impl MotionSet {
    pub fn new(motions: Vec<ReferenceMotion>, splits: Vec<Split>) -> Result<Self> {
        if motions.len() != splits.len() {
            return Err(Error::dim("motion splits", motions.len(), splits.len()));
        }
        let mut names: Vec<&str> = motions.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!("duplicate motion name {}", w[0])));
        }
        Ok(Self { motions, splits })
    }

    /// `per_difficulty` motions per tier, the last `held_out_per_difficulty`
    /// of each tier tagged held-out.
    pub fn synthetic(
        seed: u64,
        per_difficulty: usize,
        held_out_per_difficulty: usize,
        params: &DynamicsParams,
        cfg: &GeneratorConfig,
    ) -> Result<Self> {
        let mut motions = Vec::new();
        let mut splits = Vec::new();
        for kind in Difficulty::ALL {
            for k in 0..per_difficulty {
                let motion_seed = seed
                    .wrapping_mul(1_000)
                    .wrapping_add(100 * kind.code() as u64 + k as u64);
                let mut m = generate_synthetic_with(kind, motion_seed, params, cfg);
                m.name = format!("{kind}_{k:02}");
                motions.push(m);
                splits.push(if k + held_out_per_difficulty >= per_difficulty {
                    Split::HeldOut
                } else {
                    Split::Train
                });
            }
        }
        Self::new(motions, splits)
    }

    /// Twelve motions, four per tier, one per tier held out.
    pub fn default_set(seed: u64, params: &DynamicsParams) -> Result<Self> {
        Self::synthetic(seed, 4, 1, params, &GeneratorConfig::default())
    }

    pub fn len(&self) -> usize {
        self.motions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motions.is_empty()
    }

    pub fn iter_split(&self, split: Split) -> impl Iterator<Item = &ReferenceMotion> {
        self.motions
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(m, _)| m)
    }

    pub fn get(&self, name: &str) -> Option<&ReferenceMotion> {
        self.motions.iter().find(|m| m.name == name)
    }

    /// Motions rejected by [`feasibility_clean`] under `params`.
    pub fn infeasible(&self, params: &DynamicsParams) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for m in &self.motions {
            if !feasibility_clean(m, params)?.accepted {
                bad.push(m.name.clone());
            }
        }
        Ok(bad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params() -> DynamicsParams {
        DynamicsParams::nominal()
    }

    #[test]
    fn zero_amplitude_easy_is_constant() {
        let cfg = GeneratorConfig {
            amplitude_scale: 0.0,
            ..Default::default()
        };
        let m = generate_synthetic_with(Difficulty::Easy, 3, &params(), &cfg);
        for k in 0..m.n_frames() {
            assert_eq!(m.q_ref[k], m.q_ref[0]);
            assert!(m.qd_ref[k].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn hard_motion_is_rest_to_rest() {
        let m = generate_synthetic(Difficulty::Hard, 11, &params());
        for v in m.qd_ref[0].iter().chain(m.qd_ref.last().unwrap()) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn analytic_velocity_matches_finite_difference() {
        let h = 1e-6;
        for kind in Difficulty::ALL {
            let (profile, duration) = synthetic_profile(kind, 5, 2, &GeneratorConfig::default());
            for k in 1..50 {
                let t = duration * k as f64 / 50.0;
                let (_, qd, _) = profile.eval(t);
                let (qp, _, _) = profile.eval(t + h);
                let (qm, _, _) = profile.eval(t - h);
                for i in 0..2 {
                    let fd = (qp[i] - qm[i]) / (2.0 * h);
                    assert!((fd - qd[i]).abs() < 1e-6, "{kind} t={t}: {fd} vs {}", qd[i]);
                }
            }
        }
    }

    #[test]
    fn hard_fails_with_tiny_torque_limits() {
        let mut p = params();
        let m = generate_synthetic(Difficulty::Hard, 2, &p);
        for l in &mut p.torque_limit {
            *l *= 0.01;
        }
        assert!(!feasibility_clean(&m, &p).unwrap().accepted);
    }

    #[test]
    fn zero_motion_is_feasible_with_zero_torque() {
        let p = params();
        let profile = MotionProfile::Harmonic {
            centre: vec![0.0, 0.0],
            terms: vec![vec![], vec![]],
        };
        let m = ReferenceMotion::from_profile("still", Difficulty::Easy, &profile, 1.0, &p);
        let r = feasibility_clean(&m, &p).unwrap();
        assert!(r.accepted);
        assert_eq!(r.peak_torque, vec![0.0, 0.0]);
    }

    #[test]
    fn static_horizontal_link_needs_mgl() {
        // Distal link folded to nothing so joint 0 holds a single link of COM distance L.
        let mut p = params();
        p.link_mass = vec![2.0, 1e-12];
        p.link_length = vec![1.0, 1e-12];
        let profile = MotionProfile::Harmonic {
            centre: vec![std::f64::consts::FRAC_PI_2, 0.0],
            terms: vec![vec![], vec![]],
        };
        let m = ReferenceMotion::from_profile("hold", Difficulty::Easy, &profile, 0.5, &p);
        let r = feasibility_clean(&m, &p).unwrap();
        assert_relative_eq!(r.peak_torque[0], 2.0 * 9.81 * 0.5, max_relative = 1e-9);
    }

    #[test]
    fn default_set_passes_cleaning() {
        let p = params();
        let set = MotionSet::default_set(0, &p).unwrap();
        assert_eq!(set.len(), 12);
        assert_eq!(set.iter_split(Split::HeldOut).count(), 3);
        assert!(set.infeasible(&p).unwrap().is_empty());
        for m in &set.motions {
            assert!((2.0..=5.0 + 1e-9).contains(&m.duration()), "{} {}", m.name, m.duration());
        }
    }

    #[test]
    fn phase_endpoints_and_grid_points() {
        let m = generate_synthetic(Difficulty::Medium, 1, &params());
        assert_eq!(m.frame_at_phase(0.0).unwrap(), m.frame(0));
        assert_eq!(m.frame_at_phase(1.0).unwrap(), m.frame(m.n_frames() - 1));
        assert!(m.frame_at_phase(1.01).is_err());
        assert!(m.frame_at_phase(-0.1).is_err());

        let mut three = m.clone();
        three.q_ref.truncate(3);
        three.qd_ref.truncate(3);
        three.body_ref.truncate(3);
        assert_eq!(three.frame_at_phase(0.5).unwrap(), three.frame(1));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate_synthetic(Difficulty::Hard, 9, &params());
        let b = generate_synthetic(Difficulty::Hard, 9, &params());
        let c = generate_synthetic(Difficulty::Hard, 10, &params());
        assert_eq!(a, b);
        assert_ne!(a.q_ref, c.q_ref);
    }

    #[test]
    fn duplicate_names_rejected() {
        let m = generate_synthetic(Difficulty::Easy, 1, &params());
        assert!(MotionSet::new(vec![m.clone(), m], vec![Split::Train, Split::Train]).is_err());
    }

    proptest! {
        #[test]
        fn phase_lookup_is_lipschitz(seed in 0u64..20, phase in 0.0f64..0.999) {
            let m = generate_synthetic(Difficulty::Medium, seed, &params());
            let eps = 1e-4;
            let a = m.frame_at_phase(phase).unwrap();
            let b = m.frame_at_phase(phase + eps).unwrap();
            // |dq/dφ| ≤ duration · max|qd| over the bracketing frames.
            let vmax = m.qd_ref.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
            for i in 0..a.q.len() {
                prop_assert!((a.q[i] - b.q[i]).abs() <= eps * m.duration() * vmax * 1.05 + 1e-12);
            }
        }
    }
}
