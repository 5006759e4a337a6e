//! Records excitation rollouts in a plant whose parameters sit on the SysID
//! grid, then recovers them by exhaustive replay search.

use dlalign::align::{excitation_rollouts, sysid_grid_search, GridPoint, SysIdGrid};
use dlalign::dynamics::DynamicsParams;

fn main() -> dlalign::Result<()> {
    let sim = DynamicsParams::nominal();
    let truth = GridPoint {
        mass_ratio: 1.05,
        com_shift: 0.02,
        kp_ratio: 0.95,
        kd_ratio: 1.0,
    };
    let data = excitation_rollouts(&truth.params(&sim)?, 4, 300, 0)?;
    let result = sysid_grid_search(&data, &sim, &SysIdGrid::default(), 1.0)?;
    let mut ranked = result.errors.clone();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    for (point, err) in ranked.iter().take(5) {
        println!("{point:?} replay mse {err:.3e}");
    }
    println!("true point {truth:?}\nrecovered  {:?}", result.best);
    assert_eq!(result.best, truth);
    Ok(())
}
