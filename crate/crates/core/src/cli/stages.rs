//! Pipeline stages. Each stage verifies its inputs against the digests
//! recorded by the stages that wrote them, skips itself when an identical
//! run already completed, and records its outputs in the manifest.
//!
//! Output layout under `io.output_dir`:
//!
//! ```text
//! config.toml                      resolved configuration
//! manifest.json                    run manifest
//! motions/{name}.mot, index.csv
//! pretrain/{name}.{actor,critic}.ckpt, {name}.curves.csv
//! collect/train.traj, held_out.traj
//! align/seed{s}/delta_action.*     delta action model, curves, magnitudes
//! align/seed{s}/delta_dynamics.*   residual dynamics model and fit report
//! align/sysid.csv, sysid_best.csv
//! finetune/seed{s}/{method}/{name}.{actor,critic}.ckpt
//! noise/seed{s}/beta{b}/{name}.{actor,critic}.ckpt
//! eval/*.csv, *.svg, summary.txt
//! ablation/*.csv, *.svg
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig};
use super::manifest::{file_digest, unix_now, DirLock, RunManifest};
use super::plots::{bar_chart, line_plot, Series};
use crate::align::{
    collect_rollouts, delta_magnitude_report, finetune_in, finetune_policy,
    noise_finetune, sysid_grid_search, train_delta_action, train_delta_dynamics, CollectConfig,
    CorrectedController, CorrectionMethod, DeltaActionConfig, DeltaActionModel, DeltaDynamicsModel,
    GridPoint, TrajectoryDataset,
};
use crate::dynamics::{apply_gap, DynamicsParams};
use crate::error::{Error, Result};
use crate::evalkit::{
    closed_loop_run, open_loop_eval, summarize_closed_loop, write_report, ClosedLoopResult, ClosedLoopRow,
    Controller, OpenLoopRow,
};
use crate::formats::{load_agent, load_motion, save_agent, save_motion, Checkpoint};
use crate::ppo::{write_curves, TrainResult};
use crate::reference::{feasibility_clean, Difficulty, MotionSet, ReferenceMotion, Split};
use crate::tracking::{pretrain, Plant, PolicyBank};

const CONFIG_FILE: &str = "config.toml";
const TRAIN_DATA: &str = "collect/train.traj";
const HELD_OUT_DATA: &str = "collect/held_out.traj";
const SYSID_BEST: &str = "align/sysid_best.csv";
const SYSID_GRID: &str = "align/sysid.csv";
/// Open-loop label for replay without any correction.
pub const NO_CORRECTION: &str = "none";

/// Planned motion: name, tier and split, derived from the config alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionEntry {
    pub name: String,
    pub difficulty: Difficulty,
    pub split: Split,
}

pub fn motion_plan(cfg: &RunConfig) -> Vec<MotionEntry> {
    let m = &cfg.motions;
    Difficulty::ALL
        .iter()
        .filter(|d| m.difficulties.contains(d))
        .flat_map(|&difficulty| {
            (0..m.per_difficulty).map(move |k| MotionEntry {
                name: format!("{difficulty}_{k:02}"),
                difficulty,
                split: if k + m.held_out_per_difficulty >= m.per_difficulty {
                    Split::HeldOut
                } else {
                    Split::Train
                },
            })
        })
        .collect()
}

fn motion_file(name: &str) -> String {
    format!("motions/{name}.mot")
}

fn agent_files(dir: &str, stem: &str) -> Vec<String> {
    vec![format!("{dir}/{stem}.actor.ckpt"), format!("{dir}/{stem}.critic.ckpt")]
}

fn seed_dir(seed: u64) -> String {
    format!("align/seed{seed}")
}

fn delta_action_files(seed: u64) -> Vec<String> {
    agent_files(&seed_dir(seed), "delta_action")
}

fn delta_dynamics_file(seed: u64) -> String {
    format!("{}/delta_dynamics.ckpt", seed_dir(seed))
}

fn finetune_dir(seed: u64, method: Method) -> String {
    format!("finetune/seed{seed}/{method}")
}

fn noise_dir(seed: u64, beta: f64) -> String {
    format!("noise/seed{seed}/beta{beta}")
}

fn numeric(what: &str, r: TrainResult) -> Result<TrainResult> {
    match &r.diverged {
        Some(msg) => Err(Error::Numeric(format!("{what}: {msg}"))),
        None => Ok(r),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Delta action model from a saved agent and the configured mask and clamp.
pub fn load_delta_action(dir: &Path, stem: &str, cfg: &DeltaActionConfig, n: usize) -> Result<DeltaActionModel> {
    let agent = load_agent(dir, stem)?;
    DeltaActionModel::new(agent.policy, cfg.active_joints(n), cfg.clamp)
}

pub fn save_delta_dynamics(model: &DeltaDynamicsModel, path: &Path) -> Result<()> {
    Checkpoint {
        net: model.net.clone(),
        extra: model.scale.clone(),
        optimizer: None,
    }
    .save(path)
}

pub fn load_delta_dynamics(path: &Path) -> Result<DeltaDynamicsModel> {
    let ck = Checkpoint::load(path)?;
    if ck.extra.len() != ck.net.output_dim() {
        return Err(Error::format("checkpoint", "residual scale does not match network output"));
    }
    Ok(DeltaDynamicsModel {
        net: ck.net,
        scale: ck.extra,
    })
}

/// The first `ceil(fraction · len)` episodes (at least one).
pub fn dataset_fraction(data: &TrajectoryDataset, fraction: f64) -> TrajectoryDataset {
    let keep = ((fraction * data.len() as f64).ceil() as usize).clamp(1, data.len().max(1));
    data.subset(|i, _| i < keep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MotionIndexRow {
    name: String,
    difficulty: Difficulty,
    split: Split,
    duration_s: f64,
    frames: usize,
    peak_torque_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SysIdRow {
    mass_ratio: f64,
    com_shift: f64,
    kp_ratio: f64,
    kd_ratio: f64,
    replay_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct MagnitudeRow {
    joint: usize,
    mean_abs_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct DynamicsFitRow {
    k1_mse: f64,
    raw_mse: f64,
    fit_converged: bool,
    final_loss: f64,
}

/// One closed-loop deployment, flattened for CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosedLoopRunRow {
    pub method: String,
    pub motion: String,
    pub difficulty: Difficulty,
    pub seed: u64,
    pub steps: usize,
    pub success: bool,
    pub e_g_mpjpe: f64,
    pub e_mpjpe: f64,
    pub e_acc: f64,
    pub e_vel: f64,
}

impl ClosedLoopRunRow {
    fn new(method: &str, r: &ClosedLoopResult) -> Self {
        Self {
            method: method.to_string(),
            motion: r.motion.clone(),
            difficulty: r.difficulty,
            seed: r.seed,
            steps: r.steps,
            success: r.metrics.success,
            e_g_mpjpe: r.metrics.e_g_mpjpe,
            e_mpjpe: r.metrics.e_mpjpe,
            e_acc: r.metrics.e_acc,
            e_vel: r.metrics.e_vel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseRow {
    pub beta: f64,
    pub e_g_mpjpe: f64,
    pub success_rate: f64,
}

/// Sweep point of an ablation: the swept value, open-loop error of the
/// corrected replay and, when measured, closed-loop error after fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub value: f64,
    pub episodes: usize,
    pub open_loop_horizon_s: f64,
    pub open_loop_e_g_mpjpe: f64,
    pub closed_loop_e_g_mpjpe: Option<f64>,
}

/// Element-wise mean of open-loop reports that share their row layout.
pub fn average_open_loop(runs: &[Vec<OpenLoopRow>]) -> Result<Vec<OpenLoopRow>> {
    let first = runs.first().ok_or_else(|| Error::InvalidArgument("no open-loop runs".into()))?;
    let k = runs.len() as f64;
    Ok(first
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mean = |f: fn(&OpenLoopRow) -> f64| runs.iter().map(|r| f(&r[i])).sum::<f64>() / k;
            OpenLoopRow {
                e_g_mpjpe: mean(|r| r.e_g_mpjpe),
                e_mpjpe: mean(|r| r.e_mpjpe),
                e_acc: mean(|r| r.e_acc),
                e_vel: mean(|r| r.e_vel),
                ..row.clone()
            }
        })
        .collect())
}

/// Open-loop `E_g_mpjpe` of a delta action model on `data` at `horizon_s`.
pub fn delta_open_loop_error(
    data: &TrajectoryDataset,
    model: Arc<DeltaActionModel>,
    sim: &DynamicsParams,
    horizon_s: f64,
    stride_s: f64,
) -> Result<f64> {
    let rows = open_loop_eval(data, sim, &Plant::DeltaAction(model), sim, &[horizon_s], stride_s, "asap")?;
    Ok(rows[0].e_g_mpjpe)
}

/// Owns an output directory for the lifetime of a pipeline invocation.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    manifest: RunManifest,
    sim: DynamicsParams,
    real: DynamicsParams,
    _lock: DirLock,
}

impl Pipeline {
    /// Locks `cfg.io.output_dir`. An existing run with a different config is
    /// refused unless `resume` is set, in which case stages whose inputs or
    /// config changed run again.
    pub fn open(cfg: RunConfig, resume: bool) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.io.output_dir.clone();
        let lock = DirLock::acquire(&dir)?;
        let hash = cfg.hash()?;
        let manifest = match RunManifest::load(&dir)? {
            Some(m) if m.config_hash == hash => m,
            Some(mut m) if resume => {
                m.config_hash = hash;
                m.config = cfg.clone();
                m
            }
            Some(_) => {
                return Err(Error::Config(format!(
                    "{} holds a run with a different config; pass --resume or choose another --out",
                    dir.display()
                )))
            }
            None => RunManifest::new(&cfg)?,
        };
        let sim = cfg.dynamics.clone();
        let real = apply_gap(&sim, &cfg.gap.spec(&sim)?)?;
        let mut p = Self {
            cfg,
            dir,
            manifest,
            sim,
            real,
            _lock: lock,
        };
        p.stage("config", &[], |p| {
            fs::write(p.path(CONFIG_FILE), p.cfg.to_toml()?)?;
            Ok(vec![CONFIG_FILE.to_string()])
        })?;
        Ok(p)
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn sim_params(&self) -> &DynamicsParams {
        &self.sim
    }

    pub fn real_params(&self) -> &DynamicsParams {
        &self.real
    }

    fn verify(&self, rel: &str) -> Result<String> {
        let path = self.path(rel);
        let expected = self.manifest.produced(rel).ok_or_else(|| Error::Digest(path.clone()))?;
        let actual = file_digest(&path)?;
        if actual != expected {
            return Err(Error::Digest(path));
        }
        Ok(actual)
    }

    /// Runs `body` unless an identical completed record exists. Returns
    /// whether the stage ran.
    fn stage(
        &mut self,
        name: &str,
        inputs: &[String],
        body: impl FnOnce(&Self) -> Result<Vec<String>>,
    ) -> Result<bool> {
        let digests = inputs
            .iter()
            .map(|rel| Ok((rel.clone(), self.verify(rel)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let key = self.manifest.stage_key(name, &digests);
        if self.manifest.up_to_date(&self.dir, name, &key) {
            info!("stage {name}: up to date, skipped");
            return Ok(false);
        }
        info!("stage {name}: running");
        let started = unix_now();
        let outputs = body(self)?;
        self.manifest.record(&self.dir, name, key, digests, &outputs, started)?;
        Ok(true)
    }

    fn mkdir(&self, rel: &str) -> Result<()> {
        fs::create_dir_all(self.path(rel))?;
        Ok(())
    }

    fn motions(&self) -> Result<Vec<(Arc<ReferenceMotion>, Split)>> {
        motion_plan(&self.cfg)
            .into_iter()
            .map(|e| Ok((Arc::new(load_motion(&self.path(&motion_file(&e.name)))?), e.split)))
            .collect()
    }

    fn motion_inputs(&self) -> Vec<String> {
        motion_plan(&self.cfg).iter().map(|e| motion_file(&e.name)).collect()
    }

    fn bank_inputs(&self) -> Vec<String> {
        motion_plan(&self.cfg)
            .iter()
            .flat_map(|e| agent_files("pretrain", &e.name))
            .collect()
    }

    fn bank(&self) -> Result<PolicyBank> {
        motion_plan(&self.cfg)
            .into_iter()
            .map(|e| Ok((e.name.clone(), load_agent(&self.path("pretrain"), &e.name)?)))
            .collect()
    }

    fn train_data(&self) -> Result<TrajectoryDataset> {
        let full = TrajectoryDataset::load(&self.path(TRAIN_DATA))?;
        Ok(dataset_fraction(&full, self.cfg.align.dataset_fraction))
    }

    fn delta_model(&self, seed: u64) -> Result<DeltaActionModel> {
        load_delta_action(
            &self.path(&seed_dir(seed)),
            "delta_action",
            &self.cfg.align.delta_action,
            self.sim.n_links,
        )
    }

    fn sysid_params(&self) -> Result<DynamicsParams> {
        let rows: Vec<SysIdRow> = read_csv(&self.path(SYSID_BEST))?;
        let r = rows
            .first()
            .ok_or_else(|| Error::format("sysid result", "empty"))?;
        GridPoint {
            mass_ratio: r.mass_ratio,
            com_shift: r.com_shift,
            kp_ratio: r.kp_ratio,
            kd_ratio: r.kd_ratio,
        }
        .params(&self.sim)
    }

    fn methods(&self) -> Vec<Method> {
        self.cfg.align.method.expand()
    }

    /// Writes every planned motion after checking feasibility.
    pub fn gen_motions(&mut self) -> Result<()> {
        self.stage("gen_motions", &[], |p| {
            let m = &p.cfg.motions;
            let set = MotionSet::synthetic(p.cfg.seed, m.per_difficulty, m.held_out_per_difficulty, &p.sim, &m.generator)?;
            p.mkdir("motions")?;
            let mut outputs = Vec::new();
            let mut index = Vec::new();
            for e in motion_plan(&p.cfg) {
                let motion = set
                    .get(&e.name)
                    .ok_or_else(|| Error::InvalidArgument(format!("motion {} was not generated", e.name)))?;
                let report = feasibility_clean(motion, &p.sim)?;
                let ratio = report
                    .peak_torque
                    .iter()
                    .zip(&p.sim.torque_limit)
                    .map(|(t, l)| t / l)
                    .fold(0.0, f64::max);
                if !report.accepted {
                    return Err(Error::Config(format!(
                        "motion {} is infeasible under the configured dynamics (peak torque ratio {ratio:.2})",
                        e.name
                    )));
                }
                let rel = motion_file(&e.name);
                save_motion(motion, &p.path(&rel))?;
                index.push(MotionIndexRow {
                    name: e.name.clone(),
                    difficulty: e.difficulty,
                    split: e.split,
                    duration_s: motion.duration(),
                    frames: motion.n_frames(),
                    peak_torque_ratio: ratio,
                });
                outputs.push(rel);
            }
            write_csv(&p.path("motions/index.csv"), &index)?;
            outputs.push("motions/index.csv".into());
            Ok(outputs)
        })?;
        Ok(())
    }

    /// One tracking policy per motion, trained in the nominal simulator.
    pub fn pretrain(&mut self) -> Result<()> {
        for (i, e) in motion_plan(&self.cfg).into_iter().enumerate() {
            let input = motion_file(&e.name);
            self.stage(&format!("pretrain.{}", e.name), &[input.clone()], |p| {
                let motion = Arc::new(load_motion(&p.path(&input))?);
                let seed = p.cfg.seed.wrapping_add(i as u64);
                let r = numeric(
                    &format!("pretraining {}", e.name),
                    pretrain(motion, &p.sim, &p.cfg.tracking, &p.cfg.ppo, seed)?,
                )?;
                p.mkdir("pretrain")?;
                save_agent(&r.agent, &p.path("pretrain"), &e.name)?;
                let curves = format!("pretrain/{}.curves.csv", e.name);
                write_curves(&p.path(&curves), &r.curves)?;
                let mut out = agent_files("pretrain", &e.name);
                out.push(curves);
                Ok(out)
            })?;
        }
        Ok(())
    }

    /// Records deployment rollouts in the gapped plant: the training set on
    /// train-split motions and an evaluation set on held-out motions.
    pub fn collect(&mut self) -> Result<()> {
        let mut inputs = self.motion_inputs();
        inputs.extend(self.bank_inputs());
        self.stage("collect", &inputs, |p| {
            let bank = p.bank()?;
            let motions = p.motions()?;
            let of = |split: Split| -> Vec<Arc<ReferenceMotion>> {
                motions.iter().filter(|m| m.1 == split).map(|m| m.0.clone()).collect()
            };
            p.mkdir("collect")?;
            let (train, held) = (of(Split::Train), of(Split::HeldOut));
            let ds = collect_rollouts(&bank, &train, &p.real, &p.sim, &p.cfg.tracking, &p.cfg.collect, p.cfg.seed)?;
            ds.save(&p.path(TRAIN_DATA))?;
            let held_cfg = CollectConfig {
                n_episodes: p.cfg.eval.held_out_episodes,
                ..p.cfg.collect.clone()
            };
            let seed = p.cfg.seed.wrapping_add(1);
            let ds = collect_rollouts(&bank, &held, &p.real, &p.sim, &p.cfg.tracking, &held_cfg, seed)?;
            ds.save(&p.path(HELD_OUT_DATA))?;
            Ok(vec![TRAIN_DATA.into(), HELD_OUT_DATA.into()])
        })?;
        Ok(())
    }

    pub fn train_delta(&mut self) -> Result<()> {
        for seed in self.cfg.seeds() {
            self.stage(&format!("train_delta.seed{seed}"), &[TRAIN_DATA.into()], |p| {
                let data = Arc::new(p.train_data()?);
                let r = train_delta_action(data.clone(), &p.sim, &p.sim, &p.cfg.align.delta_action, seed)?;
                if let Some(msg) = &r.diverged {
                    return Err(Error::Numeric(format!("delta action training: {msg}")));
                }
                let dir = seed_dir(seed);
                p.mkdir(&dir)?;
                save_agent(&r.agent, &p.path(&dir), "delta_action")?;
                let curves = format!("{dir}/delta_action.curves.csv");
                write_curves(&p.path(&curves), &r.curves)?;
                let mags = delta_magnitude_report(&r.model, &data)?;
                let rows: Vec<MagnitudeRow> = mags
                    .iter()
                    .enumerate()
                    .map(|(joint, &mean_abs_delta)| MagnitudeRow { joint, mean_abs_delta })
                    .collect();
                let csv_rel = format!("{dir}/delta_magnitude.csv");
                write_csv(&p.path(&csv_rel), &rows)?;
                let svg_rel = format!("{dir}/delta_magnitude.svg");
                let bars: Vec<(String, f64)> = mags.iter().enumerate().map(|(j, m)| (format!("joint {j}"), *m)).collect();
                bar_chart(&p.path(&svg_rel), "Mean |delta a| per joint", "rad", &bars)?;
                let mut out = delta_action_files(seed);
                out.extend([curves, csv_rel, svg_rel]);
                Ok(out)
            })?;
        }
        Ok(())
    }

    pub fn train_delta_dyn(&mut self) -> Result<()> {
        for seed in self.cfg.seeds() {
            self.stage(&format!("train_delta_dyn.seed{seed}"), &[TRAIN_DATA.into()], |p| {
                let data = p.train_data()?;
                let (model, rep) = train_delta_dynamics(&data, &p.sim, &p.cfg.align.delta_dynamics, seed)?;
                let dir = seed_dir(seed);
                p.mkdir(&dir)?;
                save_delta_dynamics(&model, &p.path(&delta_dynamics_file(seed)))?;
                let fit = format!("{dir}/delta_dynamics_fit.csv");
                write_csv(
                    &p.path(&fit),
                    &[DynamicsFitRow {
                        k1_mse: rep.k1_mse,
                        raw_mse: rep.raw_mse,
                        fit_converged: rep.fit_converged,
                        final_loss: rep.losses.last().copied().unwrap_or(0.0),
                    }],
                )?;
                Ok(vec![delta_dynamics_file(seed), fit])
            })?;
        }
        Ok(())
    }

    pub fn sysid(&mut self) -> Result<()> {
        self.stage("sysid", &[TRAIN_DATA.into()], |p| {
            let data = p.train_data()?;
            let s = &p.cfg.align.sysid;
            let r = sysid_grid_search(&data, &p.sim, &s.grid, s.horizon_s)?;
            let row = |g: &GridPoint, e: f64| SysIdRow {
                mass_ratio: g.mass_ratio,
                com_shift: g.com_shift,
                kp_ratio: g.kp_ratio,
                kd_ratio: g.kd_ratio,
                replay_mse: e,
            };
            p.mkdir("align")?;
            write_csv(&p.path(SYSID_GRID), &r.errors.iter().map(|(g, e)| row(g, *e)).collect::<Vec<_>>())?;
            write_csv(&p.path(SYSID_BEST), &[row(&r.best, r.best_error)])?;
            Ok(vec![SYSID_GRID.into(), SYSID_BEST.into()])
        })?;
        Ok(())
    }

    /// Alignment artifacts needed by the selected methods.
    pub fn align(&mut self) -> Result<()> {
        let ms = self.methods();
        if ms.iter().any(|m| m.needs_delta_action()) {
            self.train_delta()?;
        }
        if ms.contains(&Method::DeltaDynamics) {
            self.train_delta_dyn()?;
        }
        if ms.contains(&Method::Sysid) {
            self.sysid()?;
        }
        Ok(())
    }

    fn method_inputs(&self, method: Method, seed: u64) -> Vec<String> {
        match method {
            Method::Asap | Method::FixedPoint | Method::Gradient => delta_action_files(seed),
            Method::DeltaDynamics => vec![delta_dynamics_file(seed)],
            Method::Sysid => vec![SYSID_BEST.into()],
            _ => Vec::new(),
        }
    }

    /// Fine-tunes every motion's policy for each selected fine-tuning method.
    pub fn finetune(&mut self) -> Result<()> {
        for method in self.methods().into_iter().filter(|m| m.fine_tunes()) {
            for seed in self.cfg.seeds() {
                let mut inputs = self.motion_inputs();
                inputs.extend(self.bank_inputs());
                inputs.extend(self.method_inputs(method, seed));
                self.stage(&format!("finetune.{method}.seed{seed}"), &inputs, |p| {
                    let bank = p.bank()?;
                    let (train_params, plant) = match method {
                        Method::Asap => (p.sim.clone(), Plant::DeltaAction(Arc::new(p.delta_model(seed)?))),
                        Method::DeltaDynamics => (
                            p.sim.clone(),
                            Plant::DeltaDynamics(Arc::new(load_delta_dynamics(&p.path(&delta_dynamics_file(seed)))?)),
                        ),
                        Method::Sysid => (p.sysid_params()?, Plant::Sim),
                        Method::Oracle => (p.real.clone(), Plant::Sim),
                        m => return Err(Error::InvalidArgument(format!("{m} does not fine-tune"))),
                    };
                    let dir = finetune_dir(seed, method);
                    p.mkdir(&dir)?;
                    let mut out = Vec::new();
                    for (motion, _) in p.motions()? {
                        let r = finetune_in(
                            &bank[&motion.name],
                            motion.clone(),
                            &train_params,
                            &p.cfg.tracking,
                            plant.clone(),
                            &p.cfg.align.finetune,
                            seed,
                        )?;
                        let r = numeric(&format!("{method} fine-tuning of {}", motion.name), r)?;
                        save_agent(&r.agent, &p.path(&dir), &motion.name)?;
                        out.extend(agent_files(&dir, &motion.name));
                    }
                    Ok(out)
                })?;
            }
        }
        Ok(())
    }

    /// Fine-tunes every motion's policy in the nominal simulator with
    /// uniform action noise, once per configured level.
    pub fn noise_finetune(&mut self) -> Result<()> {
        for seed in self.cfg.seeds() {
            let mut inputs = self.motion_inputs();
            inputs.extend(self.bank_inputs());
            self.stage(&format!("noise_finetune.seed{seed}"), &inputs, |p| {
                let bank = p.bank()?;
                let mut out = Vec::new();
                for &beta in &p.cfg.align.noise_betas {
                    let dir = noise_dir(seed, beta);
                    p.mkdir(&dir)?;
                    for (motion, _) in p.motions()? {
                        let r = noise_finetune(
                            &bank[&motion.name],
                            motion.clone(),
                            &p.sim,
                            &p.cfg.tracking,
                            beta,
                            &p.cfg.align.finetune,
                            seed,
                        )?;
                        let r = numeric(&format!("noise fine-tuning of {}", motion.name), r)?;
                        save_agent(&r.agent, &p.path(&dir), &motion.name)?;
                        out.extend(agent_files(&dir, &motion.name));
                    }
                }
                Ok(out)
            })?;
        }
        Ok(())
    }

    /// Open-loop replay of held-out recordings with each correction.
    pub fn eval_open(&mut self) -> Result<()> {
        let methods: Vec<Method> = self
            .methods()
            .into_iter()
            .filter(|m| matches!(m, Method::Asap | Method::DeltaDynamics | Method::Sysid))
            .collect();
        let mut inputs = vec![HELD_OUT_DATA.to_string()];
        for &m in &methods {
            for seed in self.cfg.seeds() {
                inputs.extend(self.method_inputs(m, seed));
            }
        }
        inputs.dedup();
        self.stage("eval_open", &inputs, |p| {
            let data = TrajectoryDataset::load(&p.path(HELD_OUT_DATA))?;
            let e = &p.cfg.eval;
            let run = |params: &DynamicsParams, plant: Plant, label: &str| {
                open_loop_eval(&data, params, &plant, &p.sim, &e.horizons, e.stride_s, label)
            };
            let mut rows = run(&p.sim, Plant::Sim, NO_CORRECTION)?;
            for &m in &methods {
                let per_seed = p
                    .cfg
                    .seeds()
                    .into_iter()
                    .map(|seed| match m {
                        Method::Asap => run(&p.sim, Plant::DeltaAction(Arc::new(p.delta_model(seed)?)), m.name()),
                        Method::DeltaDynamics => run(
                            &p.sim,
                            Plant::DeltaDynamics(Arc::new(load_delta_dynamics(&p.path(&delta_dynamics_file(seed)))?)),
                            m.name(),
                        ),
                        _ => run(&p.sysid_params()?, Plant::Sim, m.name()),
                    })
                    .collect::<Result<Vec<_>>>()?;
                rows.extend(average_open_loop(&per_seed)?);
            }
            p.mkdir("eval")?;
            write_report(&p.path("eval/open_loop.csv"), &rows, 1.0 / p.sim.control_dt())?;
            let mut labels: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
            labels.dedup();
            let series: Vec<Series> = labels
                .iter()
                .map(|l| Series {
                    label: l.to_string(),
                    points: rows.iter().filter(|r| r.method == *l).map(|r| (r.horizon_s, r.e_g_mpjpe)).collect(),
                })
                .collect();
            line_plot(
                &p.path("eval/open_loop.svg"),
                "Open-loop error on held-out recordings",
                "horizon (s)",
                "E_g_mpjpe (mm)",
                &series,
                &[],
            )?;
            let flag = gap_flag(&rows, e.noise_floor_mm);
            fs::write(p.path("eval/open_loop_summary.txt"), format!("{flag}\n"))?;
            println!("{flag}");
            Ok(vec![
                "eval/open_loop.csv".into(),
                "eval/open_loop.svg".into(),
                "eval/open_loop_summary.txt".into(),
            ])
        })?;
        Ok(())
    }

    /// Deploys each selected method on every motion in the gapped plant.
    pub fn eval_closed(&mut self) -> Result<()> {
        let methods = self.methods();
        let seeds = self.cfg.seeds();
        let mut inputs = self.motion_inputs();
        inputs.extend(self.bank_inputs());
        for &m in &methods {
            for &seed in &seeds {
                inputs.extend(self.method_inputs(m, seed));
                if m.fine_tunes() {
                    inputs.extend(
                        motion_plan(&self.cfg)
                            .iter()
                            .flat_map(|e| agent_files(&finetune_dir(seed, m), &e.name)),
                    );
                }
                if m == Method::Noise {
                    for &beta in &self.cfg.align.noise_betas {
                        inputs.extend(
                            motion_plan(&self.cfg)
                                .iter()
                                .flat_map(|e| agent_files(&noise_dir(seed, beta), &e.name)),
                        );
                    }
                }
            }
        }
        inputs.sort();
        inputs.dedup();
        self.stage("eval_closed", &inputs, |p| p.eval_closed_body(&methods, &seeds))?;
        Ok(())
    }

    fn deploy(&self, label: &str, controller: &dyn Controller, motion: &Arc<ReferenceMotion>, seed: u64) -> Result<ClosedLoopResult> {
        let r = closed_loop_run(controller, motion.clone(), &self.real, Plant::Sim, &self.sim, &self.cfg.tracking, seed)?;
        info!("{label} on {}: E_g_mpjpe {:.2} mm, success {}", motion.name, r.metrics.e_g_mpjpe, r.metrics.success);
        Ok(r)
    }

    fn eval_closed_body(&self, methods: &[Method], seeds: &[u64]) -> Result<Vec<String>> {
        let bank = self.bank()?;
        let motions = self.motions()?;
        let mut runs: Vec<ClosedLoopRunRow> = Vec::new();
        let mut summary: Vec<ClosedLoopRow> = Vec::new();
        let mut noise_rows = Vec::new();
        let mut vanilla_mean = None;
        let a = &self.cfg.align;
        for &m in methods {
            let mut groups: Vec<(String, Vec<ClosedLoopResult>)> = Vec::new();
            match m {
                Method::Noise => {
                    for &beta in &a.noise_betas {
                        let mut res = Vec::new();
                        for &seed in seeds {
                            let dir = self.path(&noise_dir(seed, beta));
                            for (motion, _) in &motions {
                                let agent = load_agent(&dir, &motion.name)?;
                                res.push(self.deploy("noise", &agent, motion, seed)?);
                            }
                        }
                        groups.push((format!("noise_{beta}"), res));
                    }
                }
                _ => {
                    let mut res = Vec::new();
                    for &seed in seeds {
                        let delta = if m.needs_delta_action() { Some(self.delta_model(seed)?) } else { None };
                        for (motion, _) in &motions {
                            let base = &bank[&motion.name];
                            let r = match m {
                                Method::Vanilla => self.deploy(m.name(), base, motion, seed)?,
                                Method::FixedPoint | Method::Gradient => {
                                    let method = if m == Method::FixedPoint {
                                        CorrectionMethod::FixedPoint {
                                            iterations: a.fixed_point_iterations,
                                        }
                                    } else {
                                        CorrectionMethod::Gradient {
                                            steps: a.gradient_steps,
                                            lr: a.gradient_lr,
                                        }
                                    };
                                    let c = CorrectedController {
                                        policy: base,
                                        delta: delta.as_ref().expect("delta model loaded"),
                                        method,
                                    };
                                    self.deploy(m.name(), &c, motion, seed)?
                                }
                                _ => {
                                    let agent = load_agent(&self.path(&finetune_dir(seed, m)), &motion.name)?;
                                    self.deploy(m.name(), &agent, motion, seed)?
                                }
                            };
                            res.push(r);
                        }
                    }
                    groups.push((m.name().to_string(), res));
                }
            }
            for (label, res) in groups {
                let mean = res.iter().map(|r| r.metrics.e_g_mpjpe).sum::<f64>() / res.len().max(1) as f64;
                let success = res.iter().filter(|r| r.metrics.success).count() as f64 / res.len().max(1) as f64;
                if m == Method::Vanilla {
                    vanilla_mean = Some(mean);
                }
                if let Some(beta) = label.strip_prefix("noise_").and_then(|b| b.parse::<f64>().ok()) {
                    noise_rows.push(NoiseRow {
                        beta,
                        e_g_mpjpe: mean,
                        success_rate: success,
                    });
                }
                runs.extend(res.iter().map(|r| ClosedLoopRunRow::new(&label, r)));
                summary.extend(summarize_closed_loop(&label, &res));
            }
        }
        self.mkdir("eval")?;
        let hz = 1.0 / self.sim.control_dt();
        write_report(&self.path("eval/closed_loop.csv"), &summary, hz)?;
        write_report(&self.path("eval/closed_loop_runs.csv"), &runs, hz)?;
        let mut out = vec!["eval/closed_loop.csv".to_string(), "eval/closed_loop_runs.csv".to_string()];
        if !noise_rows.is_empty() {
            write_csv(&self.path("eval/noise.csv"), &noise_rows)?;
            let reference: Vec<(String, f64)> = vanilla_mean.map(|v| ("no fine-tuning".to_string(), v)).into_iter().collect();
            line_plot(
                &self.path("eval/noise.svg"),
                "Closed-loop error after action-noise fine-tuning",
                "noise level beta",
                "E_g_mpjpe (mm)",
                &[Series {
                    label: "noise fine-tune".into(),
                    points: noise_rows.iter().map(|r| (r.beta, r.e_g_mpjpe)).collect(),
                }],
                &reference,
            )?;
            out.extend(["eval/noise.csv".to_string(), "eval/noise.svg".to_string()]);
        }
        let mut text = String::from("method,e_g_mpjpe_mean_mm,success_rate\n");
        let mut labels: Vec<&str> = runs.iter().map(|r| r.method.as_str()).collect();
        labels.dedup();
        for l in labels {
            let of: Vec<&ClosedLoopRunRow> = runs.iter().filter(|r| r.method == l).collect();
            let k = of.len() as f64;
            text += &format!(
                "{l},{:.4},{:.3}\n",
                of.iter().map(|r| r.e_g_mpjpe).sum::<f64>() / k,
                of.iter().filter(|r| r.success).count() as f64 / k
            );
        }
        fs::write(self.path("eval/closed_loop_overall.csv"), text)?;
        out.push("eval/closed_loop_overall.csv".into());
        Ok(out)
    }

    pub fn eval(&mut self) -> Result<()> {
        self.eval_open()?;
        self.eval_closed()
    }

    /// Dataset-size, training-horizon and action-norm sweeps of the delta
    /// action model, scored by open-loop error on held-out recordings.
    pub fn ablate(&mut self) -> Result<()> {
        let inputs = vec![TRAIN_DATA.to_string(), HELD_OUT_DATA.to_string()];
        let ab = self.cfg.eval.ablation.clone();
        let eval_h = self.cfg.eval.horizons.iter().copied().fold(0.0, f64::max);
        self.stage("ablate.dataset_size", &inputs, |p| {
            let (train, held) = p.ablation_data()?;
            let base = p.none_error(&held, eval_h)?;
            let rows = ab
                .dataset_fractions
                .iter()
                .map(|&f| {
                    let data = dataset_fraction(&train, f);
                    let episodes = data.len();
                    let model = p.sweep_model(data, &p.cfg.align.delta_action)?;
                    Ok(AblationRow {
                        value: f,
                        episodes,
                        open_loop_horizon_s: eval_h,
                        open_loop_e_g_mpjpe: delta_open_loop_error(&held, model, &p.sim, eval_h, p.cfg.eval.stride_s)?,
                        closed_loop_e_g_mpjpe: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            p.write_ablation("dataset_size", "fraction of training episodes", &rows, base)
        })?;
        let sweep_h = ab.horizons.iter().copied().fold(eval_h, f64::max);
        let mut h_inputs = inputs.clone();
        if ab.closed_loop_horizons {
            h_inputs.extend(self.motion_inputs());
            h_inputs.extend(self.bank_inputs());
        }
        self.stage("ablate.horizon", &h_inputs, |p| {
            let (train, held) = p.ablation_data()?;
            let base = p.none_error(&held, sweep_h)?;
            let bank = if ab.closed_loop_horizons { Some(p.bank()?) } else { None };
            let rows = ab
                .horizons
                .iter()
                .map(|&h| {
                    let cfg = DeltaActionConfig {
                        horizon_s: h,
                        ..p.cfg.align.delta_action.clone()
                    };
                    let model = p.sweep_model(train.clone(), &cfg)?;
                    let closed = match &bank {
                        Some(bank) => Some(p.finetune_and_deploy(bank, model.clone())?),
                        None => None,
                    };
                    Ok(AblationRow {
                        value: h,
                        episodes: train.len(),
                        open_loop_horizon_s: sweep_h,
                        open_loop_e_g_mpjpe: delta_open_loop_error(&held, model, &p.sim, sweep_h, p.cfg.eval.stride_s)?,
                        closed_loop_e_g_mpjpe: closed,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            p.write_ablation("horizon", "delta training horizon (s)", &rows, base)
        })?;
        self.stage("ablate.action_norm", &inputs, |p| {
            let (train, held) = p.ablation_data()?;
            let base = p.none_error(&held, eval_h)?;
            let rows = ab
                .action_norm_weights
                .iter()
                .map(|&w| {
                    let cfg = DeltaActionConfig {
                        action_norm_weight: w,
                        ..p.cfg.align.delta_action.clone()
                    };
                    let model = p.sweep_model(train.clone(), &cfg)?;
                    Ok(AblationRow {
                        value: w,
                        episodes: train.len(),
                        open_loop_horizon_s: eval_h,
                        open_loop_e_g_mpjpe: delta_open_loop_error(&held, model, &p.sim, eval_h, p.cfg.eval.stride_s)?,
                        closed_loop_e_g_mpjpe: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            p.write_ablation("action_norm", "action-norm reward weight", &rows, base)
        })?;
        Ok(())
    }

    fn ablation_data(&self) -> Result<(TrajectoryDataset, TrajectoryDataset)> {
        Ok((
            TrajectoryDataset::load(&self.path(TRAIN_DATA))?,
            TrajectoryDataset::load(&self.path(HELD_OUT_DATA))?,
        ))
    }

    fn none_error(&self, held: &TrajectoryDataset, h: f64) -> Result<f64> {
        let rows = open_loop_eval(held, &self.sim, &Plant::Sim, &self.sim, &[h], self.cfg.eval.stride_s, NO_CORRECTION)?;
        Ok(rows[0].e_g_mpjpe)
    }

    fn sweep_model(&self, data: TrajectoryDataset, cfg: &DeltaActionConfig) -> Result<Arc<DeltaActionModel>> {
        let r = train_delta_action(Arc::new(data), &self.sim, &self.sim, cfg, self.cfg.seed)?;
        if let Some(msg) = &r.diverged {
            return Err(Error::Numeric(format!("delta action training: {msg}")));
        }
        Ok(Arc::new(r.model))
    }

    /// Mean closed-loop `E_g_mpjpe` over all motions after fine-tuning each
    /// policy against `delta`.
    fn finetune_and_deploy(&self, bank: &PolicyBank, delta: Arc<DeltaActionModel>) -> Result<f64> {
        let motions = self.motions()?;
        let mut sum = 0.0;
        for (motion, _) in &motions {
            let r = finetune_policy(
                &bank[&motion.name],
                motion.clone(),
                &self.sim,
                &self.cfg.tracking,
                delta.clone(),
                &self.cfg.align.finetune,
                self.cfg.seed,
            )?;
            let r = numeric(&format!("fine-tuning of {}", motion.name), r)?;
            sum += self.deploy("asap", &r.agent, motion, self.cfg.seed)?.metrics.e_g_mpjpe;
        }
        Ok(sum / motions.len().max(1) as f64)
    }

    fn write_ablation(&self, stem: &str, x_label: &str, rows: &[AblationRow], base: f64) -> Result<Vec<String>> {
        self.mkdir("ablation")?;
        let csv_rel = format!("ablation/{stem}.csv");
        write_csv(&self.path(&csv_rel), rows)?;
        let mut series = vec![Series {
            label: "open loop".into(),
            points: rows.iter().map(|r| (r.value, r.open_loop_e_g_mpjpe)).collect(),
        }];
        if rows.iter().all(|r| r.closed_loop_e_g_mpjpe.is_some()) && !rows.is_empty() {
            series.push(Series {
                label: "closed loop after fine-tuning".into(),
                points: rows.iter().map(|r| (r.value, r.closed_loop_e_g_mpjpe.unwrap_or(0.0))).collect(),
            });
        }
        let svg_rel = format!("ablation/{stem}.svg");
        line_plot(
            &self.path(&svg_rel),
            &format!("Delta action ablation: {x_label}"),
            x_label,
            "E_g_mpjpe (mm)",
            &series,
            &[("no correction (open loop)".into(), base)],
        )?;
        Ok(vec![csv_rel, svg_rel])
    }

    /// gen → pretrain → collect → align → finetune → eval, plus the noise
    /// baseline and ablations when selected.
    pub fn full(&mut self) -> Result<()> {
        self.gen_motions()?;
        self.pretrain()?;
        self.collect()?;
        self.align()?;
        self.finetune()?;
        if self.methods().contains(&Method::Noise) {
            self.noise_finetune()?;
        }
        self.eval()?;
        if self.cfg.eval.run_ablations {
            self.ablate()?;
        }
        Ok(())
    }
}

/// "no significant gap detected" when neither the uncorrected replay error
/// nor the ASAP improvement at the longest horizon exceeds `floor_mm`.
pub fn gap_flag(rows: &[OpenLoopRow], floor_mm: f64) -> String {
    let longest = rows.iter().map(|r| r.horizon_s).fold(0.0, f64::max);
    let at = |m: &str| rows.iter().find(|r| r.method == m && r.horizon_s == longest).map(|r| r.e_g_mpjpe);
    let none = at(NO_CORRECTION).unwrap_or(0.0);
    let improvement = at(Method::Asap.name()).map(|a| none - a);
    if none < floor_mm || improvement.is_some_and(|d| d < floor_mm) {
        let asap = improvement.map_or(String::new(), |d| format!(", ASAP improvement {d:.3} mm"));
        format!("no significant gap detected (uncorrected {longest} s error {none:.3} mm{asap}, floor {floor_mm} mm)")
    } else {
        match improvement {
            Some(d) => format!("gap detected: uncorrected {longest} s error {none:.3} mm, ASAP improvement {d:.3} mm"),
            None => format!("gap detected: uncorrected {longest} s error {none:.3} mm"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, h: f64, e: f64) -> OpenLoopRow {
        OpenLoopRow {
            method: method.into(),
            horizon_s: h,
            windows: 1,
            e_g_mpjpe: e,
            e_mpjpe: e,
            e_acc: 0.0,
            e_vel: 0.0,
        }
    }

    #[test]
    fn default_plan_has_twelve_motions_with_three_held_out() {
        let plan = motion_plan(&RunConfig::default());
        assert_eq!(plan.len(), 12);
        assert_eq!(plan.iter().filter(|e| e.split == Split::HeldOut).count(), 3);
        assert_eq!(plan[3].name, "easy_03");
        assert_eq!(plan[3].split, Split::HeldOut);
    }

    #[test]
    fn gap_flag_cases() {
        let rows = vec![row("none", 0.5, 5.0), row("none", 1.0, 1e-9), row("asap", 1.0, 1e-9)];
        assert!(gap_flag(&rows, 1.0).starts_with("no significant gap"));
        let rows = vec![row("none", 1.0, 20.0), row("asap", 1.0, 19.5)];
        assert!(gap_flag(&rows, 1.0).starts_with("no significant gap"));
        let rows = vec![row("none", 1.0, 20.0), row("asap", 1.0, 5.0)];
        assert!(gap_flag(&rows, 1.0).starts_with("gap detected"));
    }

    #[test]
    fn averaging_is_elementwise() {
        let a = vec![row("asap", 1.0, 2.0)];
        let b = vec![row("asap", 1.0, 4.0)];
        assert_eq!(average_open_loop(&[a, b]).unwrap()[0].e_g_mpjpe, 3.0);
    }

    #[test]
    fn fraction_keeps_front_episodes() {
        let mut ds = TrajectoryDataset::empty(0.01, 2, String::new(), crate::align::Provenance::RealProxy);
        for i in 0..10 {
            ds.episodes.push(crate::align::Episode {
                motion: format!("m{i}"),
                prime: vec![0.0; 2],
                states: vec![vec![0.0; 4]; 3],
                actions: vec![vec![0.0; 2]; 2],
                failed: false,
            });
        }
        assert_eq!(dataset_fraction(&ds, 0.1).len(), 1);
        assert_eq!(dataset_fraction(&ds, 0.3).len(), 3);
        assert_eq!(dataset_fraction(&ds, 0.01).len(), 1);
        assert_eq!(dataset_fraction(&ds, 1.0).episodes[9].motion, "m9");
    }
}
