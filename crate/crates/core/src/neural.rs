//! Feedforward networks with hand-written reverse-mode gradients, Adam, and
//! diagonal Gaussian policies.
//!
//! Parameters of an [`Mlp`] live in one flat `Vec<f64>`; layer `l` occupies
//! `W_l` (row-major, `n_out x n_in`) followed by `b_l`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn gain(self) -> f64 {
        match self {
            Activation::Tanh => 1.0,
            Activation::Relu => std::f64::consts::SQRT_2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `input -> hidden... -> output` with tanh hidden units.
    pub fn tanh(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self {
            layer_sizes: sizes,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!(
                "bad layer sizes {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

/// Layer activations recorded by a forward pass, input included.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map_or(&[], Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Self {
        let n = spec.param_count();
        Self {
            spec,
            params: vec![0.0; n],
        }
    }

    /// Scaled-uniform init with variance `gain² / n_in` on hidden layers and
    /// `output_gain² / n_in` on the output layer; biases zero.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, output_gain: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(spec);
        let layers = net.spec.n_layers();
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (net.spec.layer_sizes[l], net.spec.layer_sizes[l + 1]);
            let gain = if l + 1 == layers {
                output_gain
            } else {
                net.spec.activation.gain()
            };
            let bound = gain * (3.0 / n_in as f64).sqrt();
            for w in &mut net.params[off..off + n_in * n_out] {
                *w = rng.gen_range(-bound..=bound);
            }
            off += (n_in + 1) * n_out;
        }
        net
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::dim("mlp params", spec.param_count(), params.len()));
        }
        ensure_finite(&params, "mlp params")?;
        Ok(Self { spec, params })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::default();
        self.forward_tape(input, &mut tape)?;
        Ok(tape.acts.pop().unwrap_or_default())
    }

    /// Forward pass keeping activations for [`Mlp::backward_tape`].
    pub fn forward_tape<'t>(&self, input: &[f64], tape: &'t mut Tape) -> Result<&'t [f64]> {
        if input.len() != self.input_dim() {
            return Err(Error::dim("mlp input", self.input_dim(), input.len()));
        }
        let sizes = &self.spec.layer_sizes;
        let layers = self.spec.n_layers();
        tape.acts.resize_with(layers + 1, Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(input);
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let (w, rest) = self.params[off..].split_at(n_in * n_out);
            let b = &rest[..n_out];
            let (prev, next) = tape.acts.split_at_mut(l + 1);
            let x = &prev[l];
            let y = &mut next[0];
            y.clear();
            let hidden = l + 1 < layers;
            for o in 0..n_out {
                let mut s = b[o] + dot(&w[o * n_in..(o + 1) * n_in], x);
                if hidden {
                    s = match self.spec.activation {
                        Activation::Tanh => fast_tanh(s),
                        Activation::Relu => s.max(0.0),
                    };
                }
                y.push(s);
            }
            off += (n_in + 1) * n_out;
        }
        Ok(tape.output())
    }

    /// Accumulates parameter gradients into `param_grad` and optionally writes
    /// the input gradient, given `dL/d(output)`.
    pub fn backward_tape(
        &self,
        tape: &mut Tape,
        output_grad: &[f64],
        param_grad: &mut [f64],
        input_grad: Option<&mut Vec<f64>>,
    ) -> Result<()> {
        if output_grad.len() != self.output_dim() {
            return Err(Error::dim("mlp output grad", self.output_dim(), output_grad.len()));
        }
        if param_grad.len() != self.params.len() {
            return Err(Error::dim("mlp param grad", self.params.len(), param_grad.len()));
        }
        let sizes = &self.spec.layer_sizes;
        let layers = self.spec.n_layers();
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += (sizes[l] + 1) * sizes[l + 1];
        }

        let Tape {
            acts,
            delta,
            delta_next,
        } = tape;
        delta.clear();
        delta.extend_from_slice(output_grad);
        for l in (0..layers).rev() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let o = offsets[l];
            let x = &acts[l];
            {
                let (gw, gb) = param_grad[o..o + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
                for j in 0..n_out {
                    let d = delta[j];
                    gb[j] += d;
                    if d != 0.0 {
                        for (g, xi) in gw[j * n_in..(j + 1) * n_in].iter_mut().zip(x) {
                            *g += d * xi;
                        }
                    }
                }
            }
            if l == 0 && input_grad.is_none() {
                break;
            }
            let w = &self.params[o..o + n_in * n_out];
            delta_next.clear();
            delta_next.resize(n_in, 0.0);
            for j in 0..n_out {
                let d = delta[j];
                if d != 0.0 {
                    for (dn, wi) in delta_next.iter_mut().zip(&w[j * n_in..(j + 1) * n_in]) {
                        *dn += d * wi;
                    }
                }
            }
            if l > 0 {
                // x is the post-activation output of hidden layer l - 1.
                match self.spec.activation {
                    Activation::Tanh => {
                        for (dn, a) in delta_next.iter_mut().zip(x) {
                            *dn *= 1.0 - a * a;
                        }
                    }
                    Activation::Relu => {
                        for (dn, a) in delta_next.iter_mut().zip(x) {
                            if *a <= 0.0 {
                                *dn = 0.0;
                            }
                        }
                    }
                }
            }
            std::mem::swap(delta, delta_next);
        }
        if let Some(ig) = input_grad {
            ig.clear();
            ig.extend_from_slice(delta);
        }
        Ok(())
    }

    /// Returns `(dL/dθ, dL/dx)` for `L = output_grad · f(x)`.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::default();
        self.forward_tape(input, &mut tape)?;
        let mut pg = vec![0.0; self.params.len()];
        let mut ig = Vec::new();
        self.backward_tape(&mut tape, output_grad, &mut pg, Some(&mut ig))?;
        Ok((pg, ig))
    }
}

/// Activations of a batched forward pass, stored feature-major
/// (`value[feature * batch + sample]`).
#[derive(Clone, Debug, Default)]
pub struct BatchTape {
    batch: usize,
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl BatchTape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Network outputs, feature-major.
    pub fn output(&self) -> &[f64] {
        self.acts.last().map_or(&[], Vec::as_slice)
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

impl Mlp {
    /// Forward pass over `batch` sample-major inputs.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize, tape: &mut BatchTape) -> Result<()> {
        let n_in0 = self.input_dim();
        if inputs.len() != n_in0 * batch {
            return Err(Error::dim("mlp batch input", n_in0 * batch, inputs.len()));
        }
        let sizes = &self.spec.layer_sizes;
        let layers = self.spec.n_layers();
        tape.batch = batch;
        tape.acts.resize_with(layers + 1, Vec::new);
        let x0 = &mut tape.acts[0];
        x0.clear();
        x0.resize(n_in0 * batch, 0.0);
        for (s, row) in inputs.chunks_exact(n_in0).enumerate() {
            for (i, v) in row.iter().enumerate() {
                x0[i * batch + s] = *v;
            }
        }
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + (n_in + 1) * n_out];
            let (prev, next) = tape.acts.split_at_mut(l + 1);
            let x = &prev[l];
            let y = &mut next[0];
            y.clear();
            y.resize(n_out * batch, 0.0);
            for o in 0..n_out {
                let yo = &mut y[o * batch..(o + 1) * batch];
                yo.iter_mut().for_each(|v| *v = b[o]);
                for i in 0..n_in {
                    axpy(w[o * n_in + i], &x[i * batch..(i + 1) * batch], yo);
                }
            }
            if l + 1 < layers {
                match self.spec.activation {
                    Activation::Tanh => y.iter_mut().for_each(|v| *v = fast_tanh(*v)),
                    Activation::Relu => y.iter_mut().for_each(|v| *v = v.max(0.0)),
                }
            }
            off += (n_in + 1) * n_out;
        }
        Ok(())
    }

    /// Accumulates parameter gradients for a feature-major `output_grad`.
    pub fn backward_batch(
        &self,
        tape: &mut BatchTape,
        output_grad: &[f64],
        param_grad: &mut [f64],
    ) -> Result<()> {
        let batch = tape.batch;
        if output_grad.len() != self.output_dim() * batch {
            return Err(Error::dim("mlp batch output grad", self.output_dim() * batch, output_grad.len()));
        }
        if param_grad.len() != self.params.len() {
            return Err(Error::dim("mlp param grad", self.params.len(), param_grad.len()));
        }
        let sizes = &self.spec.layer_sizes;
        let layers = self.spec.n_layers();
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += (sizes[l] + 1) * sizes[l + 1];
        }
        let BatchTape {
            acts,
            delta,
            delta_next,
            ..
        } = tape;
        delta.clear();
        delta.extend_from_slice(output_grad);
        for l in (0..layers).rev() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let o_off = offsets[l];
            let x = &acts[l];
            let w = &self.params[o_off..o_off + n_in * n_out];
            {
                let (gw, gb) = param_grad[o_off..o_off + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    let d = &delta[o * batch..(o + 1) * batch];
                    gb[o] += d.iter().sum::<f64>();
                    for i in 0..n_in {
                        gw[o * n_in + i] += dot(d, &x[i * batch..(i + 1) * batch]);
                    }
                }
            }
            if l == 0 {
                break;
            }
            delta_next.clear();
            delta_next.resize(n_in * batch, 0.0);
            for o in 0..n_out {
                let d = &delta[o * batch..(o + 1) * batch];
                for i in 0..n_in {
                    axpy(w[o * n_in + i], d, &mut delta_next[i * batch..(i + 1) * batch]);
                }
            }
            match self.spec.activation {
                Activation::Tanh => {
                    for (dn, a) in delta_next.iter_mut().zip(x) {
                        *dn *= 1.0 - a * a;
                    }
                }
                Activation::Relu => {
                    for (dn, a) in delta_next.iter_mut().zip(x) {
                        if *a <= 0.0 {
                            *dn = 0.0;
                        }
                    }
                }
            }
            std::mem::swap(delta, delta_next);
        }
        Ok(())
    }
}

/// `tanh` through one `exp`; absolute error stays near machine epsilon.
#[inline]
fn fast_tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

/// Dot product with four fixed-order partial sums so it vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        adam_step(params, grads, self, lr)
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut Adam, lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::dim("adam", params.len(), grads.len()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(state.t.min(i32::MAX as u64) as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Diagonal Gaussian policy with state-independent log standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
}

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

impl GaussianPolicy {
    pub fn new(mean: Mlp, init_log_std: f64) -> Self {
        let d = mean.output_dim();
        let mut p = Self {
            mean,
            log_std: vec![init_log_std; d],
        };
        p.clamp_log_std();
        p
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn clamp_log_std(&mut self) {
        for s in &mut self.log_std {
            *s = s.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.mean.forward(obs)
    }

    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let mu = self.mean_action(obs)?;
        let action: Vec<f64> = mu
            .iter()
            .zip(&self.log_std)
            .map(|(m, s)| {
                let z: f64 = rng.sample(StandardNormal);
                m + s.exp() * z
            })
            .collect();
        let lp = self.log_prob_given_mean(&mu, &action);
        Ok((action, lp))
    }

    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        let mu = self.mean_action(obs)?;
        if action.len() != mu.len() {
            return Err(Error::dim("action", mu.len(), action.len()));
        }
        Ok(self.log_prob_given_mean(&mu, action))
    }

    pub fn log_prob_given_mean(&self, mean: &[f64], action: &[f64]) -> f64 {
        mean.iter()
            .zip(action)
            .zip(&self.log_std)
            .map(|((m, a), s)| {
                let z = (a - m) / s.exp();
                -0.5 * z * z - s - HALF_LOG_2PI
            })
            .sum()
    }

    /// `Σ (log_std + ½ log(2πe))`.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|s| s + 0.5 + HALF_LOG_2PI).sum()
    }

    /// Mean network parameters followed by `log_std`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.mean.params.clone();
        v.extend_from_slice(&self.log_std);
        v
    }

    pub fn param_count(&self) -> usize {
        self.mean.params.len() + self.log_std.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(MlpSpec::tanh(3, &[5, 4], 2));
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let spec = MlpSpec::new(vec![3, 3], Activation::Tanh).unwrap();
        let mut params = vec![0.0; spec.param_count()];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let net = Mlp::from_params(spec, params).unwrap();
        let x = [0.5, -1.5, 2.0];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_is_pure() {
        let net = Mlp::init(MlpSpec::tanh(4, &[8], 3), 1.0, &mut rng(1));
        let x = [0.1, 0.2, -0.3, 0.9];
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = Mlp::zeros(MlpSpec::tanh(3, &[4], 2));
        assert!(net.forward(&[1.0]).is_err());
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn linear_layer_weight_grads_are_inputs() {
        let spec = MlpSpec::new(vec![3, 1], Activation::Relu).unwrap();
        let net = Mlp::init(spec, 1.0, &mut rng(2));
        let x = [0.3, -0.7, 1.1];
        let (pg, _) = net.backward(&x, &[1.0]).unwrap();
        assert_eq!(&pg[..3], &x);
        assert_eq!(pg[3], 1.0);
    }

    #[test]
    fn tanh_input_grad_at_origin_is_weight_product() {
        let spec = MlpSpec::tanh(2, &[3], 2);
        let mut net = Mlp::init(spec, 1.0, &mut rng(3));
        // zero biases so the hidden pre-activation is exactly 0 at the origin
        let (w1_len, w2_off) = (6, 9);
        for b in &mut net.params[w1_len..w2_off] {
            *b = 0.0;
        }
        let w1 = &net.params[..6];
        let w2 = &net.params[9..15];
        let g_out = [0.4, -1.3];
        let (_, ig) = net.backward(&[0.0, 0.0], &g_out).unwrap();
        for i in 0..2 {
            let mut expected = 0.0;
            for h in 0..3 {
                for o in 0..2 {
                    expected += g_out[o] * w2[o * 3 + h] * w1[h * 2 + i];
                }
            }
            assert!((ig[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_zero_grad_and_zero_lr_leave_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = Adam::new(2);
        st.m = vec![0.5, 0.5];
        st.v = vec![0.1, 0.1];
        let before = p.clone();
        adam_step(&mut p, &[0.3, -0.2], &mut Adam::new(2), 0.0).unwrap();
        assert_eq!(p, before);
        st.m = vec![0.0, 0.0];
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        assert!(st.v[0] < 0.1);
    }

    #[test]
    fn adam_constant_grad_step_approaches_lr() {
        let mut p = vec![0.0; 3];
        let mut st = Adam::new(3);
        let lr = 1e-3;
        let mut last = p.clone();
        for _ in 0..2000 {
            adam_step(&mut p, &[0.5, -2.0, 1e-3], &mut st, lr).unwrap();
            let step: Vec<f64> = p.iter().zip(&last).map(|(a, b)| (a - b).abs()).collect();
            last = p.clone();
            if st.t == 2000 {
                for s in step {
                    assert!((s - lr).abs() < 1e-5 * lr + 1e-9, "{s}");
                }
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![0.0];
        assert!(adam_step(&mut p, &[f64::NAN], &mut Adam::new(1), 0.1).is_err());
    }

    #[test]
    fn log_prob_at_mean_closed_form() {
        let net = Mlp::init(MlpSpec::tanh(2, &[4], 3), 1.0, &mut rng(4));
        let mut pol = GaussianPolicy::new(net, -0.5);
        pol.log_std = vec![-0.5, 0.2, -1.0];
        let obs = [0.3, 0.1];
        let mu = pol.mean_action(&obs).unwrap();
        let expected = -pol.log_std.iter().sum::<f64>() - 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((pol.log_prob(&obs, &mu).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn entropy_is_observation_free_closed_form() {
        let net = Mlp::init(MlpSpec::tanh(2, &[4], 2), 1.0, &mut rng(5));
        let pol = GaussianPolicy::new(net, -1.0);
        let e = 2.0 * (-1.0 + 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln());
        assert!((pol.entropy() - e).abs() < 1e-12);
    }

    #[test]
    fn min_log_std_samples_hug_the_mean() {
        let net = Mlp::init(MlpSpec::tanh(2, &[4], 1), 1.0, &mut rng(6));
        let pol = GaussianPolicy::new(net, -10.0);
        assert_eq!(pol.log_std[0], LOG_STD_MIN);
        let obs = [0.2, 0.4];
        let mu = pol.mean_action(&obs).unwrap()[0];
        let mut r = rng(7);
        let n = 100_000;
        let inside = (0..n)
            .filter(|_| (pol.sample(&obs, &mut r).unwrap().0[0] - mu).abs() <= 0.05)
            .count();
        assert!(inside as f64 / n as f64 >= 0.999);
    }

    /// Central finite differences of `L = g · f(x)`.
    fn fd_check(net: &Mlp, x: &[f64], g: &[f64]) -> f64 {
        let h = 1e-6;
        let loss = |n: &Mlp, x: &[f64]| -> f64 {
            n.forward(x).unwrap().iter().zip(g).map(|(a, b)| a * b).sum()
        };
        let (pg, ig) = net.backward(x, g).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / (a.abs().max(b.abs())).max(1e-3);
        let mut worst: f64 = 0.0;
        let mut probe = net.clone();
        for i in 0..net.params.len() {
            let orig = probe.params[i];
            probe.params[i] = orig + h;
            let lp = loss(&probe, x);
            probe.params[i] = orig - h;
            let lm = loss(&probe, x);
            probe.params[i] = orig;
            worst = worst.max(rel((lp - lm) / (2.0 * h), pg[i]));
        }
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let lp = loss(net, &xp);
            xp[i] = x[i] - h;
            let lm = loss(net, &xp);
            xp[i] = x[i];
            worst = worst.max(rel((lp - lm) / (2.0 * h), ig[i]));
        }
        worst
    }

    #[test]
    fn fast_tanh_matches_libm() {
        for i in -4000..=4000 {
            let x = i as f64 * 0.01;
            assert!((fast_tanh(x) - x.tanh()).abs() < 4e-16, "{x}");
        }
        assert_eq!(fast_tanh(f64::INFINITY), 1.0);
        assert_eq!(fast_tanh(f64::NEG_INFINITY), -1.0);
    }

    #[test]
    fn batched_pass_matches_per_sample() {
        for act in [Activation::Tanh, Activation::Relu] {
            let mut r = rng(12);
            let net = Mlp::init(MlpSpec::new(vec![5, 7, 6, 3], act).unwrap(), 1.0, &mut r);
            let b = 9;
            let xs: Vec<f64> = (0..5 * b).map(|_| r.gen_range(-1.0..1.0)).collect();
            let gs: Vec<f64> = (0..3 * b).map(|_| r.gen_range(-1.0..1.0)).collect();
            let mut tape = BatchTape::default();
            net.forward_batch(&xs, b, &mut tape).unwrap();
            let mut g_fm = vec![0.0; 3 * b];
            let mut pg_single = vec![0.0; net.params.len()];
            for s in 0..b {
                let y = net.forward(&xs[s * 5..(s + 1) * 5]).unwrap();
                for o in 0..3 {
                    assert!((tape.output()[o * b + s] - y[o]).abs() < 1e-14);
                    g_fm[o * b + s] = gs[s * 3 + o];
                }
                let (pg, _) = net.backward(&xs[s * 5..(s + 1) * 5], &gs[s * 3..(s + 1) * 3]).unwrap();
                pg_single.iter_mut().zip(&pg).for_each(|(a, b)| *a += b);
            }
            let mut pg_batch = vec![0.0; net.params.len()];
            net.backward_batch(&mut tape, &g_fm, &mut pg_batch).unwrap();
            for (a, b) in pg_batch.iter().zip(&pg_single) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn gradients_match_finite_differences(
            seed in 0u64..10_000,
            depth in 1usize..=3,
            relu in any::<bool>(),
        ) {
            let mut r = rng(seed);
            let mut sizes = vec![r.gen_range(1..6)];
            for _ in 0..depth {
                sizes.push(r.gen_range(1..8));
            }
            sizes.push(r.gen_range(1..4));
            let act = if relu { Activation::Relu } else { Activation::Tanh };
            let mut net = Mlp::init(MlpSpec::new(sizes.clone(), act).unwrap(), 1.0, &mut r);
            for b in net.params.iter_mut() {
                *b += r.gen_range(-0.1..0.1);
            }
            let x: Vec<f64> = (0..sizes[0]).map(|_| r.gen_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| r.gen_range(-1.0..1.0)).collect();
            prop_assert!(fd_check(&net, &x, &g) < 1e-4);
        }

        #[test]
        fn flat_round_trip_is_bit_exact(seed in 0u64..1000) {
            let net = Mlp::init(MlpSpec::tanh(3, &[6, 6], 2), 1.0, &mut rng(seed));
            let back = Mlp::from_params(net.spec.clone(), net.params.clone()).unwrap();
            let x = [0.25, -0.5, 0.75];
            prop_assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());
        }
    }
}
