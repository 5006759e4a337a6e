//! Run configuration: one TOML document with a section per pipeline stage.
//! Unknown keys are rejected and every omitted value takes its default.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{CollectConfig, DeltaActionConfig, DeltaDynamicsConfig, FinetuneConfig, SysIdGrid};
use crate::dynamics::{DynamicsParams, GapSpec};
use crate::error::{Error, Result};
use crate::ppo::PpoConfig;
use crate::reference::{Difficulty, GeneratorConfig};
use crate::tracking::TrackingConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapPreset {
    Identity,
    MotorWeak,
    /// Uses `gap.custom`.
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapConfig {
    pub preset: GapPreset,
    pub custom: Option<GapSpec>,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            preset: GapPreset::MotorWeak,
            custom: None,
        }
    }
}

impl GapConfig {
    pub fn spec(&self, sim: &DynamicsParams) -> Result<GapSpec> {
        match (self.preset, &self.custom) {
            (GapPreset::Identity, _) => Ok(GapSpec::identity(sim.n_links)),
            (GapPreset::MotorWeak, _) => Ok(GapSpec::motor_weak(sim)),
            (GapPreset::Custom, Some(g)) => Ok(g.clone()),
            (GapPreset::Custom, None) => Err(Error::Config("gap.preset = \"custom\" needs a [gap.custom] table".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionsConfig {
    pub per_difficulty: usize,
    /// The last motions of each tier are held out from delta-model training.
    pub held_out_per_difficulty: usize,
    pub difficulties: Vec<Difficulty>,
    pub generator: GeneratorConfig,
}

impl Default for MotionsConfig {
    fn default() -> Self {
        Self {
            per_difficulty: 4,
            held_out_per_difficulty: 1,
            difficulties: Difficulty::ALL.to_vec(),
            generator: GeneratorConfig::default(),
        }
    }
}

/// Alignment method selected for the finetune and eval stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Sysid,
    DeltaDynamics,
    Asap,
    FixedPoint,
    Gradient,
    Oracle,
    Noise,
    All,
}

impl Method {
    pub const CONCRETE: [Method; 8] = [
        Method::Vanilla,
        Method::Sysid,
        Method::DeltaDynamics,
        Method::Asap,
        Method::FixedPoint,
        Method::Gradient,
        Method::Oracle,
        Method::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Sysid => "sysid",
            Method::DeltaDynamics => "delta_dynamics",
            Method::Asap => "asap",
            Method::FixedPoint => "fixed_point",
            Method::Gradient => "gradient",
            Method::Oracle => "oracle",
            Method::Noise => "noise",
            Method::All => "all",
        }
    }

    /// Concrete methods to run; the vanilla baseline is always included.
    pub fn expand(self) -> Vec<Method> {
        match self {
            Method::All => Self::CONCRETE.to_vec(),
            Method::Vanilla => vec![Method::Vanilla],
            m => vec![Method::Vanilla, m],
        }
    }

    /// Fine-tunes a policy per motion.
    pub fn fine_tunes(self) -> bool {
        matches!(self, Method::Sysid | Method::DeltaDynamics | Method::Asap | Method::Oracle)
    }

    /// Uses the delta action model.
    pub fn needs_delta_action(self) -> bool {
        matches!(self, Method::Asap | Method::FixedPoint | Method::Gradient)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::CONCRETE
            .iter()
            .chain([Method::All].iter())
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SysIdConfig {
    pub grid: SysIdGrid,
    /// Replay window length (s).
    pub horizon_s: f64,
}

impl Default for SysIdConfig {
    fn default() -> Self {
        Self {
            grid: SysIdGrid::default(),
            horizon_s: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub method: Method,
    /// Fraction of collected training episodes used, taken from the front.
    pub dataset_fraction: f64,
    pub delta_action: DeltaActionConfig,
    pub delta_dynamics: DeltaDynamicsConfig,
    pub sysid: SysIdConfig,
    pub finetune: FinetuneConfig,
    /// Action-noise levels for the noise fine-tuning baseline.
    pub noise_betas: Vec<f64>,
    pub fixed_point_iterations: usize,
    pub gradient_steps: usize,
    pub gradient_lr: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            method: Method::All,
            dataset_fraction: 1.0,
            delta_action: DeltaActionConfig::default(),
            delta_dynamics: DeltaDynamicsConfig::default(),
            sysid: SysIdConfig::default(),
            finetune: FinetuneConfig::default(),
            noise_betas: vec![0.025, 0.05, 0.1, 0.2, 0.4],
            fixed_point_iterations: 10,
            gradient_steps: 20,
            gradient_lr: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub dataset_fractions: Vec<f64>,
    pub horizons: Vec<f64>,
    pub action_norm_weights: Vec<f64>,
    /// Fine-tune and deploy a policy per horizon-sweep model.
    pub closed_loop_horizons: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            dataset_fractions: vec![0.1, 0.3, 1.0],
            horizons: vec![0.25, 0.5, 1.0, 1.5],
            action_norm_weights: vec![0.01, 0.05, 0.1, 0.2, 0.5],
            closed_loop_horizons: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Open-loop replay horizons (s).
    pub horizons: Vec<f64>,
    /// Spacing (s) of open-loop start points.
    pub stride_s: f64,
    /// Episodes recorded on held-out motions for open-loop evaluation.
    pub held_out_episodes: usize,
    /// Training seeds `seed, seed + 1, ...` for every learned component.
    pub n_seeds: usize,
    /// Open-loop improvements below this (mm) count as no detectable gap.
    pub noise_floor_mm: f64,
    /// Run the ablation sweeps in the full pipeline.
    pub run_ablations: bool,
    pub ablation: AblationConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: vec![0.25, 0.5, 1.0],
            stride_s: 0.25,
            held_out_episodes: 20,
            n_seeds: 1,
            noise_floor_mm: 1.0,
            run_ablations: false,
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub output_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dynamics: DynamicsParams,
    pub gap: GapConfig,
    pub motions: MotionsConfig,
    /// Pretraining PPO settings.
    pub ppo: PpoConfig,
    pub tracking: TrackingConfig,
    pub collect: CollectConfig,
    pub align: AlignConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dynamics: DynamicsParams::nominal(),
            gap: GapConfig::default(),
            motions: MotionsConfig::default(),
            ppo: PpoConfig {
                total_steps: 500_000,
                ..PpoConfig::default()
            },
            tracking: TrackingConfig::default(),
            collect: CollectConfig::default(),
            align: AlignConfig::default(),
            eval: EvalConfig::default(),
            io: IoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Full document including every defaulted value.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds the TOML integer range", self.seed));
        }
        self.dynamics
            .validate()
            .map_err(|e| Error::Config(format!("dynamics: {e}")))?;
        let n = self.dynamics.n_links;
        self.gap.spec(&self.dynamics)?.validate(n).map_err(|e| Error::Config(format!("gap: {e}")))?;
        self.ppo.validate()?;
        self.tracking.validate()?;
        self.align.delta_action.validate(n)?;
        self.align.delta_dynamics.validate()?;
        self.align.finetune.ppo.validate()?;
        let m = &self.motions;
        if m.per_difficulty == 0 || m.held_out_per_difficulty >= m.per_difficulty {
            return bad("motions: need 0 <= held_out_per_difficulty < per_difficulty".into());
        }
        if m.difficulties.is_empty() {
            return bad("motions: difficulties must not be empty".into());
        }
        if !(self.align.dataset_fraction > 0.0 && self.align.dataset_fraction <= 1.0) {
            return bad("align.dataset_fraction must lie in (0, 1]".into());
        }
        if self.align.noise_betas.iter().any(|b| !(*b >= 0.0)) {
            return bad("align.noise_betas must be non-negative".into());
        }
        if self.align.fixed_point_iterations == 0 || self.align.gradient_steps == 0 {
            return bad("align: correction iterations must be positive".into());
        }
        if !(self.align.sysid.horizon_s > 0.0) {
            return bad("align.sysid.horizon_s must be positive".into());
        }
        let e = &self.eval;
        if e.horizons.is_empty() || e.horizons.iter().any(|h| !(*h > 0.0)) || !(e.stride_s > 0.0) {
            return bad("eval: horizons and stride must be positive".into());
        }
        if e.n_seeds == 0 {
            return bad("eval.n_seeds must be positive".into());
        }
        let a = &e.ablation;
        if a.dataset_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("eval.ablation.dataset_fractions must lie in (0, 1]".into());
        }
        if a.horizons.iter().any(|h| !(*h > 0.0)) || a.action_norm_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("eval.ablation: horizons must be positive and weights non-negative".into());
        }
        if self.collect.n_episodes == 0 {
            return bad("collect.n_episodes must be positive".into());
        }
        Ok(())
    }

    /// Training seeds for the learned alignment components.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.eval.n_seeds as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }

    /// Small, fast settings: two easy motions, tiny networks, 10⁴ PPO steps.
    pub fn smoke() -> Self {
        let tiny = |steps: u64, lr: f64, log_std: f64| PpoConfig {
            total_steps: steps,
            hidden: vec![16, 16],
            n_envs: 4,
            rollout_steps: 64,
            minibatch_size: 128,
            lr,
            init_log_std: log_std,
            ..PpoConfig::default()
        };
        let mut cfg = Self::default();
        cfg.motions.per_difficulty = 2;
        cfg.motions.difficulties = vec![Difficulty::Easy];
        cfg.ppo = tiny(10_000, 1e-3, -1.6);
        cfg.collect.n_episodes = 6;
        cfg.align.delta_action.ppo = tiny(10_000, 1e-3, -3.0);
        cfg.align.delta_dynamics.iterations = 100;
        cfg.align.delta_dynamics.hidden = vec![16];
        cfg.align.delta_dynamics.batch = 16;
        cfg.align.finetune.ppo = tiny(10_000, 3e-4, -1.6);
        cfg.align.noise_betas = vec![0.05, 0.2];
        cfg.align.sysid.grid.mass_ratio = vec![1.0];
        cfg.align.sysid.grid.com_shift = vec![0.0];
        cfg.eval.held_out_episodes = 4;
        cfg.eval.ablation.dataset_fractions = vec![0.5, 1.0];
        cfg.eval.ablation.horizons = vec![0.5, 1.0];
        cfg.eval.ablation.action_norm_weights = vec![0.05, 0.2];
        cfg.eval.ablation.closed_loop_horizons = false;
        cfg.io.output_dir = PathBuf::from("runs/smoke");
        cfg
    }
}
