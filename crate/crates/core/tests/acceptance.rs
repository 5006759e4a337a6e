//! End-to-end acceptance run. One shared fixture (a pretrained policy bank
//! plus motor-weak recordings) feeds ten criteria; each prints a PASS/FAIL
//! line with its measurements and runtime, and the test fails at the end if
//! any criterion failed.
//!
//! Run alone with `cargo test --release --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use dlalign::align::{
    collect_rollouts, delta_magnitude_report, finetune_policy, noise_finetune, sysid_grid_search,
    train_delta_action, train_delta_dynamics, CollectConfig, CorrectedController, CorrectionMethod,
    DeltaActionConfig, DeltaActionModel, DeltaDynamicsConfig, FinetuneConfig, GridPoint, SysIdGrid,
    TrajectoryDataset,
};
use dlalign::cli::stages::dataset_fraction;
use dlalign::cli::{Pipeline, RunConfig, RunManifest};
use dlalign::dynamics::{advance, apply_gap, energy, DynamicsParams, GapSpec, SimState};
use dlalign::evalkit::{closed_loop_run, open_loop_eval, Controller, OpenLoopRow};
use dlalign::formats::{load_agent, motion_from_bytes, motion_to_bytes, save_agent, Checkpoint};
use dlalign::neural::{Activation, Mlp, MlpSpec};
use dlalign::ppo::{Agent, PpoConfig};
use dlalign::reference::{MotionSet, ReferenceMotion};
use dlalign::tracking::{pretrain, Plant, PolicyBank, TrackingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAIN_MOTIONS: [&str; 3] = ["easy_00", "easy_01", "medium_00"];
const HELD_OUT_MOTION: &str = "easy_03";
const EASY_MOTIONS: [&str; 3] = ["easy_00", "easy_01", "easy_03"];
const PRETRAIN_SEED: u64 = 1;
const EVAL_HORIZON: f64 = 1.0;
/// Mean `‖Δa‖` allowed on identity-gap data: 5% of the 0.25 rad correction bound.
const IDENTITY_DELTA_BOUND: f64 = 0.05 * 0.25;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

struct Fixture {
    sim: DynamicsParams,
    real: DynamicsParams,
    tracking: TrackingConfig,
    motions: BTreeMap<String, Arc<ReferenceMotion>>,
    bank: PolicyBank,
    train: Arc<TrajectoryDataset>,
    held_out: TrajectoryDataset,
}

impl Fixture {
    fn build() -> Self {
        let sim = DynamicsParams::nominal();
        let real = apply_gap(&sim, &GapSpec::motor_weak(&sim)).unwrap();
        let tracking = TrackingConfig::default();
        let set = MotionSet::default_set(0, &sim).unwrap();
        let motions: BTreeMap<String, Arc<ReferenceMotion>> = TRAIN_MOTIONS
            .iter()
            .chain([&HELD_OUT_MOTION])
            .map(|n| (n.to_string(), Arc::new(set.get(n).unwrap().clone())))
            .collect();
        let ppo = PpoConfig {
            total_steps: 500_000,
            ..PpoConfig::default()
        };
        let bank: PolicyBank = motions
            .iter()
            .map(|(name, m)| {
                let agent = pretrain(m.clone(), &sim, &tracking, &ppo, PRETRAIN_SEED).unwrap().agent;
                (name.clone(), agent)
            })
            .collect();
        let (train, held_out) = record(&bank, &motions, &sim, &tracking, &real);
        Fixture {
            sim,
            real,
            tracking,
            motions,
            bank,
            train: Arc::new(train),
            held_out,
        }
    }

    fn motion(&self, name: &str) -> Arc<ReferenceMotion> {
        self.motions[name].clone()
    }

    fn record(&self, plant: &DynamicsParams) -> (TrajectoryDataset, TrajectoryDataset) {
        record(&self.bank, &self.motions, &self.sim, &self.tracking, plant)
    }

    fn open_loop(&self, data: &TrajectoryDataset, plant: Plant, horizons: &[f64]) -> Vec<OpenLoopRow> {
        open_loop_eval(data, &self.sim, &plant, &self.sim, horizons, 0.25, "acceptance").unwrap()
    }

    fn open_loop_at(&self, plant: Plant, horizon: f64) -> f64 {
        self.open_loop(&self.held_out, plant, &[horizon])[0].e_g_mpjpe
    }

    fn delta(&self, data: Arc<TrajectoryDataset>, cfg: &DeltaActionConfig, seed: u64) -> Arc<DeltaActionModel> {
        Arc::new(train_delta_action(data, &self.sim, &self.sim, cfg, seed).unwrap().model)
    }

    /// Closed-loop E_g_mpjpe (mm) and success of `controller` on `motion` in the gapped plant.
    fn deploy(&self, controller: &dyn Controller, motion: &str) -> (f64, bool) {
        let r = closed_loop_run(controller, self.motion(motion), &self.real, Plant::Sim, &self.sim, &self.tracking, 0)
            .unwrap();
        (r.metrics.e_g_mpjpe, r.metrics.success)
    }

    /// ASAP fine-tuning of every easy motion's policy through `delta`.
    fn asap_finetune(&self, delta: &Arc<DeltaActionModel>, seed: u64) -> BTreeMap<&'static str, Agent> {
        EASY_MOTIONS
            .iter()
            .map(|m| {
                let agent = finetune_policy(
                    &self.bank[*m],
                    self.motion(m),
                    &self.sim,
                    &self.tracking,
                    delta.clone(),
                    &FinetuneConfig::default(),
                    seed,
                )
                .unwrap()
                .agent;
                (*m, agent)
            })
            .collect()
    }
}

/// 100 training episodes on the training motions and 20 held-out episodes
/// on the held-out motion, recorded in `plant`.
fn record(
    bank: &PolicyBank,
    motions: &BTreeMap<String, Arc<ReferenceMotion>>,
    sim: &DynamicsParams,
    tracking: &TrackingConfig,
    plant: &DynamicsParams,
) -> (TrajectoryDataset, TrajectoryDataset) {
    let train_motions: Vec<_> = TRAIN_MOTIONS.iter().map(|n| motions[*n].clone()).collect();
    let train = collect_rollouts(bank, &train_motions, plant, sim, tracking, &CollectConfig::default(), 11).unwrap();
    let held_cfg = CollectConfig {
        n_episodes: 20,
        ..Default::default()
    };
    let held = collect_rollouts(bank, &[motions[HELD_OUT_MOTION].clone()], plant, sim, tracking, &held_cfg, 12).unwrap();
    (train, held)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ")
}

fn run(
    outcomes: &mut Vec<Outcome>,
    id: usize,
    name: &'static str,
    budget_s: u64,
    f: impl FnOnce() -> (bool, String),
) {
    let start = Instant::now();
    let (pass, detail) = f();
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(budget_s);
    let o = Outcome {
        id,
        name,
        pass: pass && elapsed < budget,
        detail,
        elapsed,
        budget,
    };
    println!(
        "[{}] {:>2}. {}: {} ({:.1} s of {} s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.detail,
        o.elapsed.as_secs_f64(),
        o.budget.as_secs()
    );
    outcomes.push(o);
}

fn physics_oracle() -> (bool, String) {
    let mut p = DynamicsParams::nominal();
    p.motor_strength = vec![0.0; 2];
    p.joint_damping = vec![0.0; 2];
    p.control_delay_steps = 0;
    p.dt = 1e-3;
    let steps = (2.0 / p.dt).round() as usize;
    let mut s = SimState::at_rest(vec![std::f64::consts::FRAC_PI_2, 0.0], &p);
    let e0 = energy(&s, &p);
    let mut drift: f64 = 0.0;
    for _ in 0..steps {
        advance(&mut s, &[0.0, 0.0], &p).unwrap();
        drift = drift.max(((energy(&s, &p) - e0) / e0).abs());
    }
    p.joint_damping = vec![0.2, 0.2];
    let mut s = SimState::at_rest(vec![std::f64::consts::FRAC_PI_2, 0.3], &p);
    let start = energy(&s, &p);
    let mut prev = start;
    let mut rises = 0;
    for _ in 0..steps {
        advance(&mut s, &[0.0, 0.0], &p).unwrap();
        let e = energy(&s, &p);
        if e > prev {
            rises += 1;
        }
        prev = e;
    }
    let pass = drift < 0.01 && rises == 0 && prev < start;
    (
        pass,
        format!(
            "passive max energy drift {:.2e} (< 1e-2); damped energy {start:.4} -> {prev:.4} J with {rises} increasing steps",
            drift
        ),
    )
}

/// Max relative error between analytic and central-difference gradients of `g · f(x)`.
fn gradient_error(net: &Mlp, x: &[f64], g: &[f64]) -> f64 {
    let h = 1e-6;
    let loss = |n: &Mlp, x: &[f64]| -> f64 { n.forward(x).unwrap().iter().zip(g).map(|(a, b)| a * b).sum() };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
    let (pg, ig) = net.backward(x, g).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for i in 0..net.params.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let up = loss(&probe, x);
        probe.params[i] = orig - h;
        let down = loss(&probe, x);
        probe.params[i] = orig;
        worst = worst.max(rel((up - down) / (2.0 * h), pg[i]));
    }
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = loss(net, &xp);
        xp[i] = x[i] - h;
        let down = loss(net, &xp);
        xp[i] = x[i];
        worst = worst.max(rel((up - down) / (2.0 * h), ig[i]));
    }
    worst
}

fn gradient_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut counts = [0usize; 2];
    for k in 0..100 {
        let activation = if k % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        counts[k % 2] += 1;
        let layers = rng.gen_range(1..=4);
        let sizes: Vec<usize> = (0..=layers).map(|_| rng.gen_range(1..=12)).collect();
        let mut net = Mlp::init(MlpSpec::new(sizes.clone(), activation).unwrap(), 1.0, &mut rng);
        // Zero initial biases put ReLU units exactly on the kink behind a dead layer.
        for p in net.params.iter_mut() {
            *p += rng.gen_range(-0.1..0.1);
        }
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..sizes[layers]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        worst = worst.max(gradient_error(&net, &x, &g));
    }
    (
        worst < 1e-4,
        format!("{} tanh + {} relu networks, max relative error {worst:.2e} (< 1e-4)", counts[0], counts[1]),
    )
}

fn identity_null(fx: &Fixture) -> (bool, String) {
    let (train, held) = fx.record(&fx.sim);
    let replay = fx.open_loop(&held, Plant::Sim, &[0.25, 0.5, 1.0]);
    let replay_err = replay.iter().map(|r| r.e_g_mpjpe).fold(0.0, f64::max);
    let train = Arc::new(train);
    let delta = fx.delta(train.clone(), &DeltaActionConfig::default(), 0);
    let mut norms = Vec::new();
    for ep in &train.episodes {
        for t in 0..ep.n_steps() {
            let d = delta.mean_delta(ep.q(t), ep.qd(t), &ep.actions[t]).unwrap();
            norms.push(d.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    let mean_norm = mean(&norms);
    let sysid = sysid_grid_search(&train, &fx.sim, &SysIdGrid::default(), 1.0).unwrap();
    let pass = replay_err < 1e-6 && mean_norm < IDENTITY_DELTA_BOUND && sysid.best == GridPoint::NOMINAL;
    (
        pass,
        format!(
            "replay error {replay_err:.2e} mm (< 1e-6); mean |delta a| {mean_norm:.4} rad (< {IDENTITY_DELTA_BOUND}); SysID {}",
            if sysid.best == GridPoint::NOMINAL { "nominal".to_string() } else { format!("{:?}", sysid.best) }
        ),
    )
}

fn sysid_recovery(fx: &Fixture) -> (bool, String) {
    let grid = SysIdGrid::default();
    let cfg = CollectConfig {
        n_episodes: 3,
        ..Default::default()
    };
    let motions: Vec<_> = TRAIN_MOTIONS.iter().map(|n| fx.motion(n)).collect();
    let mut misses = Vec::new();
    let mut tried = 0usize;
    for truth in grid.points().into_iter().filter(|p| *p != GridPoint::NOMINAL) {
        tried += 1;
        let plant = truth.params(&fx.sim).unwrap();
        let data = collect_rollouts(&fx.bank, &motions, &plant, &fx.sim, &fx.tracking, &cfg, tried as u64).unwrap();
        let found = sysid_grid_search(&data, &fx.sim, &grid, 1.0).unwrap().best;
        if found != truth {
            misses.push(format!("{truth:?} -> {found:?}"));
        }
    }
    (
        misses.is_empty() && tried == 80,
        format!("{} of {tried} off-nominal grid points recovered exactly{}", tried - misses.len(), misses.join("; ")),
    )
}

struct Shared {
    /// Default delta action models, seeds 0..5.
    deltas: Vec<Arc<DeltaActionModel>>,
    /// Held-out 1.0 s open-loop error of each default model.
    asap_open: Vec<f64>,
    none_open: f64,
    /// ASAP fine-tuned closed-loop results per seed: (motion, E_g, success).
    asap_closed: Vec<Vec<(&'static str, f64, bool)>>,
}

fn open_loop_improvement(fx: &Fixture, sh: &mut Shared) -> (bool, String) {
    for seed in 0..3 {
        let d = fx.delta(fx.train.clone(), &DeltaActionConfig::default(), seed);
        sh.asap_open.push(fx.open_loop_at(Plant::DeltaAction(d.clone()), EVAL_HORIZON));
        sh.deltas.push(d);
    }
    sh.none_open = fx.open_loop_at(Plant::Sim, EVAL_HORIZON);
    let asap = mean(&sh.asap_open);
    let reduction = 1.0 - asap / sh.none_open;
    (
        reduction >= 0.4,
        format!(
            "1.0 s held-out E_g_mpjpe: none {:.2} mm, ASAP seeds [{}] mean {asap:.2} mm, reduction {:.0}% (>= 40%)",
            sh.none_open,
            fmt_list(&sh.asap_open),
            100.0 * reduction
        ),
    )
}

fn closed_loop_improvement(fx: &Fixture, sh: &mut Shared) -> (bool, String) {
    while sh.deltas.len() < 5 {
        let seed = sh.deltas.len() as u64;
        sh.deltas.push(fx.delta(fx.train.clone(), &DeltaActionConfig::default(), seed));
    }
    let vanilla: Vec<f64> = EASY_MOTIONS.iter().map(|m| fx.deploy(&fx.bank[*m], m).0).collect();
    let vanilla_mean = mean(&vanilla);
    let mut wins = 0;
    let mut all_success = true;
    let mut per_seed = Vec::new();
    for (seed, delta) in sh.deltas.clone().iter().enumerate() {
        let tuned = fx.asap_finetune(delta, seed as u64);
        let results: Vec<(&'static str, f64, bool)> = EASY_MOTIONS
            .iter()
            .map(|m| {
                let (e, ok) = fx.deploy(&tuned[*m], m);
                (*m, e, ok)
            })
            .collect();
        let e = mean(&results.iter().map(|r| r.1).collect::<Vec<_>>());
        all_success &= results.iter().all(|r| r.2);
        if e < vanilla_mean {
            wins += 1;
        }
        per_seed.push(e);
        sh.asap_closed.push(results);
    }
    (
        wins >= 4 && all_success,
        format!(
            "easy-motion E_g_mpjpe: vanilla {vanilla_mean:.2} mm, fine-tuned per seed [{}]; better in {wins}/5 seeds (>= 4); success on easy motions {}",
            fmt_list(&per_seed),
            if all_success { "100%" } else { "below 100%" }
        ),
    )
}

fn baseline_ordering(fx: &Fixture, sh: &Shared) -> (bool, String) {
    let seeds = 0..3u64;
    let asap = mean(&sh.asap_closed[..3].iter().flatten().map(|r| r.1).collect::<Vec<_>>());
    let mut noise = Vec::new();
    for beta in [0.025, 0.05, 0.1, 0.2, 0.4] {
        let mut errs = Vec::new();
        for seed in seeds.clone() {
            for m in EASY_MOTIONS {
                let tuned = noise_finetune(
                    &fx.bank[m],
                    fx.motion(m),
                    &fx.sim,
                    &fx.tracking,
                    beta,
                    &FinetuneConfig::default(),
                    seed,
                )
                .unwrap()
                .agent;
                errs.push(fx.deploy(&tuned, m).0);
            }
        }
        noise.push((beta, mean(&errs)));
    }
    let (best_beta, best_noise) = noise.iter().copied().fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let corrected = |method: CorrectionMethod| {
        let mut errs = Vec::new();
        for seed in seeds.clone() {
            for m in EASY_MOTIONS {
                let c = CorrectedController {
                    policy: &fx.bank[m],
                    delta: &sh.deltas[seed as usize],
                    method,
                };
                errs.push(fx.deploy(&c, m).0);
            }
        }
        mean(&errs)
    };
    let fixed_point = corrected(CorrectionMethod::FixedPoint { iterations: 10 });
    let gradient = corrected(CorrectionMethod::Gradient { steps: 20, lr: 0.25 });
    let pass = asap < best_noise && asap < fixed_point && asap < gradient;
    (
        pass,
        format!(
            "3-seed easy-motion E_g_mpjpe: ASAP {asap:.2} mm, best noise (beta {best_beta}) {best_noise:.2} mm [{}], fixed-point {fixed_point:.2} mm, gradient {gradient:.2} mm",
            noise.iter().map(|(b, e)| format!("{b}: {e:.2}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn delta_dynamics_cascade(fx: &Fixture, sh: &Shared) -> (bool, String) {
    let cfg = DeltaDynamicsConfig::default();
    let mut ratios = Vec::new();
    let mut open = Vec::new();
    let mut short = Vec::new();
    let mut converged = true;
    for seed in 0..3 {
        let (model, rep) = train_delta_dynamics(&fx.train, &fx.sim, &cfg, seed).unwrap();
        converged &= rep.fit_converged;
        ratios.push(rep.k1_mse / rep.raw_mse);
        let rows = fx.open_loop(&fx.held_out, Plant::DeltaDynamics(Arc::new(model)), &[0.25, EVAL_HORIZON]);
        short.push(rows[0].e_mpjpe);
        open.push(rows[1].e_g_mpjpe);
    }
    let asap = mean(&sh.asap_open);
    let dd = mean(&open);
    (
        converged && dd > asap,
        format!(
            "one-step MSE / simulator MSE [{}] (< {}); 1.0 s E_g_mpjpe delta dynamics [{}] mean {dd:.2} mm vs ASAP {asap:.2} mm; 0.25 s E_mpjpe delta dynamics mean {:.2} mm",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", "),
            cfg.fit_threshold,
            fmt_list(&open),
            mean(&short)
        ),
    )
}

fn ablation_shapes(fx: &Fixture, sh: &Shared) -> (bool, String) {
    let seeds = 0..3u64;
    let default = DeltaActionConfig::default();
    let sweep = |values: &[f64], make: &dyn Fn(f64) -> Option<(Arc<TrajectoryDataset>, DeltaActionConfig)>, horizon: f64| {
        values
            .iter()
            .map(|&v| {
                let errs: Vec<f64> = seeds
                    .clone()
                    .map(|seed| match make(v) {
                        Some((data, cfg)) => fx.open_loop_at(Plant::DeltaAction(fx.delta(data, &cfg, seed)), horizon),
                        None => fx.open_loop_at(Plant::DeltaAction(sh.deltas[seed as usize].clone()), horizon),
                    })
                    .collect();
                mean(&errs)
            })
            .collect::<Vec<f64>>()
    };

    let fractions = [0.1, 0.3, 1.0];
    let by_size = sweep(
        &fractions,
        &|f| (f < 1.0).then(|| (Arc::new(dataset_fraction(&fx.train, f)), default.clone())),
        EVAL_HORIZON,
    );
    let size_ok = by_size.windows(2).all(|w| w[1] <= w[0]);

    let weights = [0.01, 0.05, 0.1, 0.2, 0.5];
    let by_weight = sweep(
        &weights,
        &|w| {
            (w != default.action_norm_weight).then(|| {
                (
                    fx.train.clone(),
                    DeltaActionConfig {
                        action_norm_weight: w,
                        ..default.clone()
                    },
                )
            })
        },
        EVAL_HORIZON,
    );
    let argmin = |xs: &[f64]| xs.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let weight_min = argmin(&by_weight);
    let norm_ok = weight_min > 0 && weight_min + 1 < weights.len();

    let horizons = [0.25, 0.5, 1.0, 1.5];
    let longest = horizons[horizons.len() - 1];
    let mut horizon_models: Vec<Vec<Arc<DeltaActionModel>>> = Vec::new();
    for &h in &horizons {
        horizon_models.push(
            seeds
                .clone()
                .map(|seed| {
                    if h == default.horizon_s {
                        sh.deltas[seed as usize].clone()
                    } else {
                        fx.delta(fx.train.clone(), &DeltaActionConfig { horizon_s: h, ..default.clone() }, seed)
                    }
                })
                .collect(),
        );
    }
    let by_horizon_open: Vec<f64> = horizon_models
        .iter()
        .map(|ms| mean(&ms.iter().map(|m| fx.open_loop_at(Plant::DeltaAction(m.clone()), longest)).collect::<Vec<_>>()))
        .collect();
    let by_horizon_closed: Vec<f64> = horizons
        .iter()
        .zip(&horizon_models)
        .map(|(&h, ms)| {
            let errs: Vec<f64> = seeds
                .clone()
                .flat_map(|seed| {
                    if h == default.horizon_s {
                        return sh.asap_closed[seed as usize].iter().map(|r| r.1).collect::<Vec<_>>();
                    }
                    let tuned = fx.asap_finetune(&ms[seed as usize], seed);
                    EASY_MOTIONS.iter().map(|m| fx.deploy(&tuned[*m], m).0).collect()
                })
                .collect();
            mean(&errs)
        })
        .collect();
    let open_best = horizons[argmin(&by_horizon_open)];
    let closed_best = horizons[argmin(&by_horizon_closed)];
    let horizon_ok = open_best == longest && closed_best <= 1.0;

    (
        size_ok && norm_ok && horizon_ok,
        format!(
            "dataset {{10%, 30%, 100%}} -> [{}] mm monotone={size_ok}; action norm {{0.01, 0.05, 0.1, 0.2, 0.5}} -> [{}] mm interior minimum={norm_ok}; horizon {{0.25, 0.5, 1.0, 1.5}} s -> open loop at 1.5 s [{}] mm (best {open_best} s), closed loop [{}] mm (best {closed_best} s) shape={horizon_ok}",
            fmt_list(&by_size),
            fmt_list(&by_weight),
            fmt_list(&by_horizon_open),
            fmt_list(&by_horizon_closed)
        ),
    )
}

fn csv_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism_and_formats(fx: &Fixture) -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let mut cfg = RunConfig::smoke();
        cfg.io.output_dir = tmp.path().join(name);
        Pipeline::open(cfg.clone(), false).unwrap().full().unwrap();
        runs.push((csv_files(&cfg.io.output_dir), cfg));
    }
    let identical = runs[0].0 == runs[1].0 && !runs[0].0.is_empty();
    let csv_count = runs[0].0.len();

    let mut formats = Vec::new();
    let data = &fx.held_out;
    formats.push(("trajectory", TrajectoryDataset::from_bytes(&data.to_bytes().unwrap()).unwrap() == *data));
    let motion = fx.motion(HELD_OUT_MOTION);
    formats.push(("motion", motion_from_bytes(&motion_to_bytes(&motion).unwrap()).unwrap() == *motion));
    let agent = &fx.bank[HELD_OUT_MOTION];
    save_agent(agent, tmp.path(), "agent").unwrap();
    formats.push(("policy checkpoint", load_agent(tmp.path(), "agent").unwrap() == *agent));
    let ckpt = Checkpoint {
        net: agent.critic.clone(),
        extra: agent.value_norm.to_vec(),
        optimizer: None,
    };
    formats.push(("checkpoint", Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap() == ckpt));
    let cfg = &runs[0].1;
    formats.push(("config", RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap() == *cfg));
    let manifest = RunManifest::load(&cfg.io.output_dir).unwrap().unwrap();
    manifest.save(tmp.path()).unwrap();
    formats.push(("manifest", RunManifest::load(tmp.path()).unwrap().unwrap() == manifest));
    let formats_ok = formats.iter().all(|f| f.1);

    let mut masked = DeltaActionConfig::default();
    masked.mask = Some(vec![0]);
    masked.ppo.total_steps = 20_000;
    let model = train_delta_action(fx.train.clone(), &fx.sim, &fx.sim, &masked, 0).unwrap().model;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut nonzero = 0usize;
    let mut checked = 0usize;
    for ep in &fx.train.episodes {
        for t in 0..ep.n_steps() {
            nonzero += (model.mean_delta(ep.q(t), ep.qd(t), &ep.actions[t]).unwrap()[1] != 0.0) as usize;
            checked += 1;
        }
    }
    for _ in 0..10_000 {
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        nonzero += (model.mean_delta(&v[..2], &v[2..4], &v[4..]).unwrap()[1] != 0.0) as usize;
        checked += 1;
    }
    let magnitude = delta_magnitude_report(&model, &fx.train).unwrap();
    let mask_ok = nonzero == 0 && magnitude[1] == 0.0 && magnitude[0] > 0.0;

    (
        identical && formats_ok && mask_ok,
        format!(
            "two smoke runs: {csv_count} CSV files, bit-identical={identical}; round trips {}; masked joint nonzero in {nonzero} of {checked} evaluations, mean |delta a| {:?}",
            formats.iter().map(|(n, ok)| format!("{n}={ok}")).collect::<Vec<_>>().join(" "),
            magnitude
        ),
    )
}

#[test]
fn acceptance() {
    let mut outcomes = Vec::new();
    run(&mut outcomes, 1, "physics oracle", 1, physics_oracle);
    run(&mut outcomes, 2, "gradient oracle", 30, gradient_oracle);

    let start = Instant::now();
    let fx = Fixture::build();
    println!(
        "fixture: {} pretrained policies, {} training and {} held-out motor-weak episodes ({:.1} s)",
        fx.bank.len(),
        fx.train.len(),
        fx.held_out.len(),
        start.elapsed().as_secs_f64()
    );

    let mut sh = Shared {
        deltas: Vec::new(),
        asap_open: Vec::new(),
        none_open: 0.0,
        asap_closed: Vec::new(),
    };
    run(&mut outcomes, 3, "identity-gap null result", 600, || identity_null(&fx));
    run(&mut outcomes, 4, "SysID exact recovery", 300, || sysid_recovery(&fx));
    run(&mut outcomes, 5, "open-loop improvement", 1800, || open_loop_improvement(&fx, &mut sh));
    run(&mut outcomes, 6, "closed-loop improvement", 2700, || closed_loop_improvement(&fx, &mut sh));
    run(&mut outcomes, 7, "baseline ordering", 5400, || baseline_ordering(&fx, &sh));
    run(&mut outcomes, 8, "delta-dynamics cascade", 1200, || delta_dynamics_cascade(&fx, &sh));
    run(&mut outcomes, 9, "ablation shapes", 7200, || ablation_shapes(&fx, &sh));
    run(&mut outcomes, 10, "determinism and formats", 600, || determinism_and_formats(&fx));

    let failed: Vec<String> = outcomes.iter().filter(|o| !o.pass).map(|o| format!("{}. {}", o.id, o.name)).collect();
    println!("{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
