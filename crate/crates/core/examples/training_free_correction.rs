//! Trains a small delta action model on motor-weak excitation data and
//! inverts it at recorded states with fixed-point iteration and gradient
//! descent, the two deployment-time corrections that need no fine-tuning.

use std::sync::Arc;

use dlalign::align::{
    excitation_rollouts, fixed_point_correct, gradient_correct, train_delta_action, DeltaActionConfig,
};
use dlalign::dynamics::{apply_gap, DynamicsParams, GapSpec};

fn main() -> dlalign::Result<()> {
    let sim = DynamicsParams::nominal();
    let real = apply_gap(&sim, &GapSpec::motor_weak(&sim))?;
    let data = Arc::new(excitation_rollouts(&real, 40, 300, 0)?);
    let mut cfg = DeltaActionConfig::default();
    cfg.ppo.total_steps = 150_000;
    let model = train_delta_action(data.clone(), &sim, &sim, &cfg, 0)?.model;
    let ep = &data.episodes[0];
    for t in [50, 150, 250] {
        let (q, qd, target) = (ep.q(t), ep.qd(t), &ep.actions[t]);
        let fp = fixed_point_correct(target, &model, q, qd, 10)?;
        let gd = gradient_correct(target, &model, q, qd, 20, 0.25)?;
        let residuals: Vec<String> = fp.residuals.iter().map(|r| format!("{r:.1e}")).collect();
        println!("step {t}: target {:?}", fmt(target));
        println!("  fixed point {:?} residuals [{}]{}", fmt(&fp.y), residuals.join(", "), if fp.diverged { " diverged" } else { "" });
        println!("  gradient    {:?} loss {:.2e}", fmt(&gd.y), gd.loss);
    }
    Ok(())
}

fn fmt(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:+.4}")).collect()
}
