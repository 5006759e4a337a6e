//! Builds the default synthetic motion set, checks torque feasibility of
//! every clip and round-trips one through the binary motion format.

use dlalign::dynamics::DynamicsParams;
use dlalign::formats::{load_motion, save_motion};
use dlalign::reference::{feasibility_clean, MotionSet, Split};

fn main() -> dlalign::Result<()> {
    let params = DynamicsParams::nominal();
    let set = MotionSet::default_set(0, &params)?;
    for split in [Split::Train, Split::HeldOut] {
        for m in set.iter_split(split) {
            let report = feasibility_clean(m, &params)?;
            let ratio = report
                .peak_torque
                .iter()
                .zip(&params.torque_limit)
                .map(|(t, l)| t / l)
                .fold(0.0, f64::max);
            println!(
                "{:<10} {:<8} {:>5.2} s, {} frames, peak torque {:>4.0}% of limit, feasible={}",
                m.name,
                format!("{split:?}"),
                m.duration(),
                m.n_frames(),
                100.0 * ratio,
                report.accepted
            );
        }
    }
    let path = std::env::temp_dir().join("dlalign_easy_00.mot");
    let m = set.get("easy_00").expect("default set has easy_00");
    save_motion(m, &path)?;
    assert_eq!(&load_motion(&path)?, m);
    println!("round-tripped easy_00 through {}", path.display());
    Ok(())
}
