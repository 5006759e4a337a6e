//! Learned residual dynamics `s' = f_sim(s, a) + f_Δ(s, a)` fitted to
//! recorded transitions with K-step autoregressive rollouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::TrajectoryDataset;
use super::delta_action::delta_input;
use crate::dynamics::{control_step, DynamicsParams, SimState};
use crate::error::{Error, Result};
use crate::neural::{Adam, Mlp, MlpSpec, Tape};
use crate::tracking::DynamicsResidual;

/// Network output `y` maps to the residual `y ⊙ scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaDynamicsModel {
    pub net: Mlp,
    pub scale: Vec<f64>,
}

impl DeltaDynamicsModel {
    pub fn n(&self) -> usize {
        self.scale.len() / 2
    }

    pub fn predict(&self, q: &[f64], qd: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(3 * self.n());
        delta_input(q, qd, a, &mut x);
        let mut y = self.net.forward(&x)?;
        for (v, s) in y.iter_mut().zip(&self.scale) {
            *v *= s;
        }
        Ok(y)
    }
}

impl DynamicsResidual for DeltaDynamicsModel {
    fn residual(&self, state: &SimState, action: &[f64]) -> Result<Vec<f64>> {
        self.predict(&state.q, &state.qd, action)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeltaDynamicsConfig {
    pub hidden: Vec<usize>,
    pub iterations: usize,
    /// Windows per gradient step.
    pub batch: usize,
    pub lr: f64,
    /// Rollout length grows linearly from `k_start` to `k_end` over training.
    pub k_start: usize,
    pub k_end: usize,
    /// Lower bound on the per-dimension output scale.
    pub scale_floor: f64,
    /// The fit counts as converged when the one-step MSE is below this
    /// fraction of the plain simulator's.
    pub fit_threshold: f64,
}

impl Default for DeltaDynamicsConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            iterations: 3000,
            batch: 64,
            lr: 1e-3,
            k_start: 1,
            k_end: 10,
            scale_floor: 1e-3,
            fit_threshold: 0.1,
        }
    }
}

impl DeltaDynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("delta dynamics: {m}")));
        if self.k_start == 0 || self.k_end < self.k_start {
            return bad("need 1 <= k_start <= k_end");
        }
        if self.batch == 0 || self.hidden.iter().any(|&h| h == 0) {
            return bad("batch and hidden sizes must be positive");
        }
        if !(self.lr >= 0.0) || !(self.scale_floor > 0.0) {
            return bad("lr must be non-negative and scale_floor positive");
        }
        if !(self.fit_threshold > 0.0) {
            return bad("fit_threshold must be positive");
        }
        Ok(())
    }

    /// Rollout length at iteration `i`.
    pub fn k_at(&self, i: usize) -> usize {
        if self.iterations <= 1 {
            return self.k_end;
        }
        let x = i as f64 / (self.iterations - 1) as f64;
        (self.k_start as f64 + x * (self.k_end - self.k_start) as f64).round() as usize
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DeltaDynamicsReport {
    /// One-step mean squared state error of the augmented simulator.
    pub k1_mse: f64,
    /// Same for the plain simulator.
    pub raw_mse: f64,
    /// `k1_mse < fit_threshold * raw_mse`.
    pub fit_converged: bool,
    /// Mean normalized loss of each iteration.
    pub losses: Vec<f64>,
}

/// One-step `[q, qd]` residuals of `sim` against every recorded transition.
fn raw_residuals(data: &TrajectoryDataset, sim: &DynamicsParams) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.total_steps());
    for ep in &data.episodes {
        for t in 0..ep.n_steps() {
            let mut s = ep.state_at(t, data.dt, sim);
            control_step(&mut s, &ep.actions[t], sim)?;
            out.push(ep.states[t + 1].iter().zip(s.flat()).map(|(r, p)| r - p).collect());
        }
    }
    Ok(out)
}

/// Mean squared one-step error per state dimension, with the model's
/// residual added when given.
pub fn one_step_mse(
    model: Option<&DeltaDynamicsModel>,
    data: &TrajectoryDataset,
    sim: &DynamicsParams,
) -> Result<f64> {
    let n = data.n_links;
    let (mut sum, mut count) = (0.0, 0usize);
    for ep in &data.episodes {
        for t in 0..ep.n_steps() {
            let mut s = ep.state_at(t, data.dt, sim);
            let r = match model {
                Some(m) => m.predict(&s.q, &s.qd, &ep.actions[t])?,
                None => vec![0.0; 2 * n],
            };
            control_step(&mut s, &ep.actions[t], sim)?;
            for (i, p) in s.flat().iter().enumerate() {
                sum += (ep.states[t + 1][i] - p - r[i]).powi(2);
            }
            count += 2 * n;
        }
    }
    Ok(sum / count.max(1) as f64)
}

/// Fits `f_Δ` by rolling the augmented simulator `K` steps from recorded
/// states and regressing each step's residual onto the recording. The
/// simulator is treated as a constant map, so gradients flow through `f_Δ`
/// at each step only.
pub fn train_delta_dynamics(
    data: &TrajectoryDataset,
    sim: &DynamicsParams,
    cfg: &DeltaDynamicsConfig,
    seed: u64,
) -> Result<(DeltaDynamicsModel, DeltaDynamicsReport)> {
    cfg.validate()?;
    data.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("delta dynamics needs data".into()));
    }
    let n = data.n_links;
    let raw = raw_residuals(data, sim)?;
    let scale: Vec<f64> = (0..2 * n)
        .map(|i| {
            let ms = raw.iter().map(|r| r[i] * r[i]).sum::<f64>() / raw.len() as f64;
            ms.sqrt().max(cfg.scale_floor)
        })
        .collect();
    let raw_mse = raw.iter().flatten().map(|v| v * v).sum::<f64>() / (raw.len() * 2 * n) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Mlp::init(MlpSpec::tanh(3 * n, &cfg.hidden, 2 * n), 0.01, &mut rng);
    let mut model = DeltaDynamicsModel { net, scale };
    let mut adam = Adam::new(model.net.params.len());
    let starts: Vec<(usize, usize)> = data
        .episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.n_steps()).map(move |t| (e, t)))
        .collect();
    let mut tape = Tape::default();
    let mut grad = vec![0.0; model.net.params.len()];
    let mut x = Vec::with_capacity(3 * n);
    let mut out_grad = vec![0.0; 2 * n];
    let mut losses = Vec::with_capacity(cfg.iterations);
    for i in 0..cfg.iterations {
        let k = cfg.k_at(i);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (mut loss, mut terms) = (0.0, 0usize);
        for _ in 0..cfg.batch {
            let (e, t0) = starts[rng.gen_range(0..starts.len())];
            let ep = &data.episodes[e];
            let steps = k.min(ep.n_steps() - t0);
            let mut s = ep.state_at(t0, data.dt, sim);
            for j in 0..steps {
                let a = &ep.actions[t0 + j];
                delta_input(&s.q, &s.qd, a, &mut x);
                let y = model.net.forward_tape(&x, &mut tape)?.to_vec();
                control_step(&mut s, a, sim)?;
                let target = &ep.states[t0 + j + 1];
                for d in 0..2 * n {
                    let pred = if d < n { s.q[d] } else { s.qd[d - n] };
                    let z = y[d] - (target[d] - pred) / model.scale[d];
                    loss += z * z / (2 * n) as f64;
                    out_grad[d] = 2.0 * z / (2 * n) as f64;
                }
                model.net.backward_tape(&mut tape, &out_grad, &mut grad, None)?;
                terms += 1;
                for d in 0..n {
                    s.q[d] += y[d] * model.scale[d];
                    s.qd[d] += y[n + d] * model.scale[n + d];
                }
                if !s.is_finite() {
                    return Err(Error::Numeric("delta dynamics rollout diverged".into()));
                }
            }
        }
        let inv = 1.0 / terms.max(1) as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        adam.step(&mut model.net.params, &grad, cfg.lr)?;
        losses.push(loss * inv);
    }
    let k1_mse = one_step_mse(Some(&model), data, sim)?;
    Ok((
        model,
        DeltaDynamicsReport {
            k1_mse,
            raw_mse,
            fit_converged: k1_mse < cfg.fit_threshold * raw_mse,
            losses,
        },
    ))
}
