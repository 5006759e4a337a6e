//! Open-loop replay report: recorded motor-weak actions replayed in the
//! nominal simulator and in the SysID-calibrated one, written as CSV.

use dlalign::align::{excitation_rollouts, sysid_grid_search, SysIdGrid};
use dlalign::dynamics::{apply_gap, DynamicsParams, GapSpec};
use dlalign::evalkit::{open_loop_eval, write_report, DEFAULT_HORIZONS, DEFAULT_STRIDE_S};
use dlalign::tracking::Plant;

fn main() -> dlalign::Result<()> {
    let sim = DynamicsParams::nominal();
    let real = apply_gap(&sim, &GapSpec::motor_weak(&sim))?;
    let data = excitation_rollouts(&real, 20, 300, 3)?;
    let identified = sysid_grid_search(&data, &sim, &SysIdGrid::default(), 1.0)?;
    println!("SysID picked {:?}", identified.best);
    let calibrated = identified.best.params(&sim)?;
    let mut rows = open_loop_eval(&data, &sim, &Plant::Sim, &sim, &DEFAULT_HORIZONS, DEFAULT_STRIDE_S, "none")?;
    rows.extend(open_loop_eval(
        &data,
        &calibrated,
        &Plant::Sim,
        &sim,
        &DEFAULT_HORIZONS,
        DEFAULT_STRIDE_S,
        "sysid",
    )?);
    rows.extend(open_loop_eval(&data, &real, &Plant::Sim, &sim, &DEFAULT_HORIZONS, DEFAULT_STRIDE_S, "true_params")?);
    for r in &rows {
        println!(
            "{:<12} {:.2} s  windows {:>3}  E_g_mpjpe {:6.2}  E_mpjpe {:6.2}  E_acc {:.3}  E_vel {:.3}",
            r.method, r.horizon_s, r.windows, r.e_g_mpjpe, r.e_mpjpe, r.e_acc, r.e_vel
        );
    }
    let path = std::env::temp_dir().join("dlalign_open_loop.csv");
    write_report(&path, &rows, 1.0 / sim.control_dt())?;
    println!("wrote {}", path.display());
    Ok(())
}
