//! Fits a learned state residual on motor-weak excitation data and compares
//! open-loop replay of the plain and the augmented simulator.

use std::sync::Arc;

use dlalign::align::{excitation_rollouts, train_delta_dynamics, DeltaDynamicsConfig};
use dlalign::dynamics::{apply_gap, DynamicsParams, GapSpec};
use dlalign::evalkit::open_loop_eval;
use dlalign::tracking::Plant;

fn main() -> dlalign::Result<()> {
    let sim = DynamicsParams::nominal();
    let real = apply_gap(&sim, &GapSpec::motor_weak(&sim))?;
    let train = excitation_rollouts(&real, 40, 300, 0)?;
    let held_out = excitation_rollouts(&real, 10, 300, 1)?;
    let cfg = DeltaDynamicsConfig {
        iterations: 1500,
        ..Default::default()
    };
    let (model, report) = train_delta_dynamics(&train, &sim, &cfg, 0)?;
    println!(
        "one-step mse: simulator {:.3e}, augmented {:.3e} ({:.1}% of the simulator's, converged: {})",
        report.raw_mse,
        report.k1_mse,
        100.0 * report.k1_mse / report.raw_mse,
        report.fit_converged
    );
    let horizons = [0.1, 0.25, 0.5, 1.0];
    let plain = open_loop_eval(&held_out, &sim, &Plant::Sim, &sim, &horizons, 0.25, "none")?;
    let aug = open_loop_eval(&held_out, &sim, &Plant::DeltaDynamics(Arc::new(model)), &sim, &horizons, 0.25, "delta_dynamics")?;
    for (p, a) in plain.iter().zip(&aug) {
        println!(
            "horizon {:.2} s: E_g_mpjpe {:6.2} mm -> {:6.2} mm, E_mpjpe {:6.2} mm -> {:6.2} mm",
            p.horizon_s, p.e_g_mpjpe, a.e_g_mpjpe, p.e_mpjpe, a.e_mpjpe
        );
    }
    Ok(())
}
