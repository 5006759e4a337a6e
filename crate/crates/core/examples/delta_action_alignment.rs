//! The full delta-action loop on one motion: pretrain a tracker in the
//! nominal simulator, record it in the motor-weak plant, learn a delta
//! action model, check open-loop replay, fine-tune in the delta-augmented
//! simulator and deploy the fine-tuned policy in the motor-weak plant
//! without the delta model.
//!
//! Usage: `cargo run --release --example delta_action_alignment`

use std::sync::Arc;

use dlalign::align::{
    collect_rollouts, delta_magnitude_report, finetune_policy, train_delta_action, CollectConfig,
    CorrectedController, CorrectionMethod, DeltaActionConfig, FinetuneConfig,
};
use dlalign::dynamics::{apply_gap, DynamicsParams, GapSpec};
use dlalign::evalkit::{closed_loop_run, open_loop_eval, Controller};
use dlalign::ppo::PpoConfig;
use dlalign::reference::MotionSet;
use dlalign::tracking::{pretrain, Plant, PolicyBank, TrackingConfig};

fn main() -> dlalign::Result<()> {
    let sim = DynamicsParams::nominal();
    let real = apply_gap(&sim, &GapSpec::motor_weak(&sim))?;
    let motion = Arc::new(MotionSet::default_set(0, &sim)?.get("easy_00").expect("easy_00").clone());
    let tracking = TrackingConfig::default();

    let ppo = PpoConfig {
        total_steps: 300_000,
        ..PpoConfig::default()
    };
    let policy = pretrain(motion.clone(), &sim, &tracking, &ppo, 0)?.agent;
    let bank = PolicyBank::from([(motion.name.clone(), policy.clone())]);

    let collect = |episodes, seed| {
        let cfg = CollectConfig {
            n_episodes: episodes,
            ..Default::default()
        };
        collect_rollouts(&bank, &[motion.clone()], &real, &sim, &tracking, &cfg, seed)
    };
    let train = Arc::new(collect(60, 1)?);
    let held_out = collect(10, 2)?;
    println!("recorded {} episodes, {} transitions", train.len(), train.total_steps());

    let delta = Arc::new(train_delta_action(train.clone(), &sim, &sim, &DeltaActionConfig::default(), 0)?.model);
    let magnitude = delta_magnitude_report(&delta, &train)?;
    let joints: Vec<String> = magnitude.iter().map(|m| format!("{m:.4}")).collect();
    println!("mean |delta a| per joint: [{}] rad", joints.join(", "));
    let horizons = [0.25, 0.5, 1.0];
    let none = open_loop_eval(&held_out, &sim, &Plant::Sim, &sim, &horizons, 0.25, "none")?;
    let asap = open_loop_eval(&held_out, &sim, &Plant::DeltaAction(delta.clone()), &sim, &horizons, 0.25, "asap")?;
    for (a, b) in none.iter().zip(&asap) {
        println!(
            "open loop {:.2} s: E_g_mpjpe {:6.2} mm without correction, {:6.2} mm with the delta model",
            a.horizon_s, a.e_g_mpjpe, b.e_g_mpjpe
        );
    }

    let tuned = finetune_policy(&policy, motion.clone(), &sim, &tracking, delta.clone(), &FinetuneConfig::default(), 0)?.agent;
    let fixed_point = CorrectedController {
        policy: &policy,
        delta: &delta,
        method: CorrectionMethod::FixedPoint { iterations: 10 },
    };
    let controllers: [(&str, &dyn Controller); 3] =
        [("pretrained", &policy), ("fine-tuned", &tuned), ("fixed-point", &fixed_point)];
    for (label, c) in controllers {
        let run = closed_loop_run(c, motion.clone(), &real, Plant::Sim, &sim, &tracking, 0)?;
        println!(
            "closed loop in motor-weak plant, {label:>11}: E_g_mpjpe {:6.2} mm, success {}",
            run.metrics.e_g_mpjpe, run.metrics.success
        );
    }
    Ok(())
}
