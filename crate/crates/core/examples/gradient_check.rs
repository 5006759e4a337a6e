//! Compares analytic MLP gradients against central finite differences for
//! random networks of both activations.

use dlalign::neural::{Activation, Mlp, MlpSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dlalign::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for activation in [Activation::Tanh, Activation::Relu] {
        let spec = MlpSpec::new(vec![5, 16, 16, 3], activation)?;
        let net = Mlp::init(spec.clone(), 1.0, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (param_grad, input_grad) = net.backward(&x, &g)?;
        let loss = |net: &Mlp, x: &[f64]| -> dlalign::Result<f64> {
            Ok(net.forward(x)?.iter().zip(&g).map(|(y, g)| y * g).sum())
        };
        let h = 1e-6;
        let params = net.params.clone();
        let mut worst: f64 = 0.0;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let up = loss(&Mlp::from_params(spec.clone(), p.clone())?, &x)?;
            p[i] -= 2.0 * h;
            let down = loss(&Mlp::from_params(spec.clone(), p)?, &x)?;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - param_grad[i]).abs() / fd.abs().max(param_grad[i].abs()).max(1e-8));
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let up = loss(&net, &xp)?;
            xp[i] -= 2.0 * h;
            let fd = (up - loss(&net, &xp)?) / (2.0 * h);
            worst = worst.max((fd - input_grad[i]).abs() / fd.abs().max(input_grad[i].abs()).max(1e-8));
        }
        println!("{activation:?}: {} parameters, max relative error {worst:.2e}", params.len());
    }
    Ok(())
}
