//! Steps the nominal two-link chain: a passive swing that conserves energy,
//! then a PD setpoint tracked in the nominal and the motor-weak plant.

use dlalign::dynamics::{
    advance, apply_gap, control_step, energy, forward_kinematics, DynamicsParams, GapSpec, SimState,
};

fn main() -> dlalign::Result<()> {
    let nominal = DynamicsParams::nominal();

    let mut passive = nominal.clone();
    passive.motor_strength = vec![0.0; passive.n_links];
    passive.joint_damping = vec![0.0; passive.n_links];
    passive.control_delay_steps = 0;
    let mut s = SimState::at_rest(vec![std::f64::consts::FRAC_PI_2, 0.0], &passive);
    let e0 = energy(&s, &passive);
    let mut worst: f64 = 0.0;
    for _ in 0..(2.0 / passive.dt) as usize {
        advance(&mut s, &[0.0, 0.0], &passive)?;
        worst = worst.max(((energy(&s, &passive) - e0) / e0).abs());
    }
    println!("passive swing, 2 s: max relative energy drift {:.2e}", worst);

    let weak = apply_gap(&nominal, &GapSpec::motor_weak(&nominal))?;
    let target = [0.8, -0.5];
    for (label, params) in [("nominal", &nominal), ("motor-weak", &weak)] {
        let mut s = SimState::at_rest(vec![0.0, 0.0], params);
        for _ in 0..100 {
            control_step(&mut s, &target, params)?;
        }
        let tip = forward_kinematics(&s.q, params).end_effector();
        println!(
            "{label:>10}: q after 1 s = [{:.3}, {:.3}] (setpoint [{}, {}]), tip = ({:.3}, {:.3}) m",
            s.q[0], s.q[1], target[0], target[1], tip[0], tip[1]
        );
    }
    Ok(())
}
