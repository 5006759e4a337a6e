//! Trains a phase-conditioned tracking policy for one motion with PPO and
//! deploys it closed-loop in the nominal and the motor-weak plant.
//!
//! Usage: `cargo run --release --example pretrain_tracker [env_steps]`

use std::sync::Arc;

use dlalign::dynamics::{apply_gap, DynamicsParams, GapSpec};
use dlalign::evalkit::closed_loop_run;
use dlalign::formats::save_agent;
use dlalign::ppo::PpoConfig;
use dlalign::reference::MotionSet;
use dlalign::tracking::{pretrain, Plant, TrackingConfig};

fn main() -> dlalign::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200_000);
    let sim = DynamicsParams::nominal();
    let real = apply_gap(&sim, &GapSpec::motor_weak(&sim))?;
    let motion = Arc::new(MotionSet::default_set(0, &sim)?.get("easy_00").expect("easy_00").clone());
    let tracking = TrackingConfig::default();
    let ppo = PpoConfig {
        total_steps: steps,
        ..PpoConfig::default()
    };
    let result = pretrain(motion.clone(), &sim, &tracking, &ppo, 0)?;
    println!("{:>7} {:>9} {:>9} {:>9}", "steps", "reward", "ep len", "threshold");
    for row in result.curves.iter().step_by((result.curves.len() / 8).max(1)) {
        let threshold = row.curriculum_threshold.map_or("-".to_string(), |t| format!("{t:.2}"));
        println!(
            "{:>7} {:>9.3} {:>9.1} {:>9}",
            row.env_steps, row.mean_reward, row.mean_ep_len, threshold
        );
    }
    for (label, params) in [("nominal", &sim), ("motor-weak", &real)] {
        let run = closed_loop_run(&result.agent, motion.clone(), params, Plant::Sim, &sim, &tracking, 0)?;
        println!(
            "{label:>10}: E_g_mpjpe {:.1} mm, success {}",
            run.metrics.e_g_mpjpe, run.metrics.success
        );
    }
    let dir = std::env::temp_dir();
    save_agent(&result.agent, &dir, "easy_00")?;
    println!("saved policy under {}", dir.display());
    Ok(())
}
