//! Training-free deployment corrections: choose the command `y` so that
//! `y + Δ(s, y)` matches the base policy's action `π̂(s)`.

use serde::{Deserialize, Serialize};

use super::delta_action::DeltaActionModel;
use crate::dynamics::SimState;
use crate::error::{Error, Result};
use crate::evalkit::Controller;
use crate::ppo::Agent;

/// A correction map with a vector-Jacobian product in its action argument.
pub trait DeltaFunction: Sync {
    fn eval(&self, q: &[f64], qd: &[f64], y: &[f64]) -> Result<Vec<f64>>;
    /// `∂(g · Δ(s, y)) / ∂y`.
    fn vjp(&self, q: &[f64], qd: &[f64], y: &[f64], g: &[f64]) -> Result<Vec<f64>>;
}

impl DeltaFunction for DeltaActionModel {
    fn eval(&self, q: &[f64], qd: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.mean_delta(q, qd, y)
    }

    fn vjp(&self, q: &[f64], qd: &[f64], y: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        Ok(self.delta_vjp(q, qd, y, g)?.1)
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointReport {
    pub y: Vec<f64>,
    /// `‖y_{k+1} − y_k‖` per iteration.
    pub residuals: Vec<f64>,
    pub diverged: bool,
}

/// Iterates `y_{k+1} = π̂(s) − Δ(s, y_k)` from `y_0 = π̂(s)` for `iterations`
/// steps. Three consecutive residual increases flag divergence; the iterate
/// with the smallest residual is then returned.
pub fn fixed_point_correct(
    target: &[f64],
    delta: &dyn DeltaFunction,
    q: &[f64],
    qd: &[f64],
    iterations: usize,
) -> Result<FixedPointReport> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("fixed-point correction needs K >= 1".into()));
    }
    let mut y = target.to_vec();
    let mut best = (f64::INFINITY, y.clone());
    let mut residuals = Vec::with_capacity(iterations);
    let mut rising = 0;
    for _ in 0..iterations {
        let d = delta.eval(q, qd, &y)?;
        let next: Vec<f64> = target.iter().zip(&d).map(|(t, d)| t - d).collect();
        let r = norm(next.iter().zip(&y).map(|(a, b)| a - b));
        if r < best.0 {
            best = (r, y.clone());
        }
        rising = match residuals.last() {
            Some(&prev) if r > prev => rising + 1,
            _ => 0,
        };
        residuals.push(r);
        y = next;
        if rising >= 3 || !r.is_finite() {
            return Ok(FixedPointReport {
                y: best.1,
                residuals,
                diverged: true,
            });
        }
    }
    Ok(FixedPointReport {
        y,
        residuals,
        diverged: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub y: Vec<f64>,
    pub loss: f64,
}

/// Gradient descent on `‖y + Δ(s, y) − π̂(s)‖²` from `y = π̂(s)`.
pub fn gradient_correct(
    target: &[f64],
    delta: &dyn DeltaFunction,
    q: &[f64],
    qd: &[f64],
    steps: usize,
    lr: f64,
) -> Result<GradientReport> {
    if steps == 0 {
        return Err(Error::InvalidArgument("gradient correction needs steps >= 1".into()));
    }
    let mut y = target.to_vec();
    let residual = |y: &[f64]| -> Result<Vec<f64>> {
        let d = delta.eval(q, qd, y)?;
        Ok(y.iter().zip(&d).zip(target).map(|((y, d), t)| y + d - t).collect())
    };
    let mut r = residual(&y)?;
    for _ in 0..steps {
        if r.iter().all(|v| *v == 0.0) {
            break;
        }
        let g: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        let jt = delta.vjp(q, qd, &y, &g)?;
        for ((y, g), j) in y.iter_mut().zip(&g).zip(&jt) {
            *y -= lr * (g + j);
        }
        r = residual(&y)?;
    }
    let loss = r.iter().map(|v| v * v).sum();
    Ok(GradientReport { y, loss })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CorrectionMethod {
    FixedPoint { iterations: usize },
    Gradient { steps: usize, lr: f64 },
}

impl Default for CorrectionMethod {
    fn default() -> Self {
        CorrectionMethod::FixedPoint { iterations: 10 }
    }
}

/// Base policy whose actions are corrected through a frozen delta model
/// before being sent to the plant.
#[derive(Clone, Copy, Debug)]
pub struct CorrectedController<'a> {
    pub policy: &'a Agent,
    pub delta: &'a DeltaActionModel,
    pub method: CorrectionMethod,
}

impl Controller for CorrectedController<'_> {
    fn act(&self, obs: &[f64], state: &SimState) -> Result<Vec<f64>> {
        let target = self.policy.act_deterministic(obs)?;
        match self.method {
            CorrectionMethod::FixedPoint { iterations } => {
                Ok(fixed_point_correct(&target, self.delta, &state.q, &state.qd, iterations)?.y)
            }
            CorrectionMethod::Gradient { steps, lr } => {
                Ok(gradient_correct(&target, self.delta, &state.q, &state.qd, steps, lr)?.y)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Constant(Vec<f64>);
    impl DeltaFunction for Constant {
        fn eval(&self, _: &[f64], _: &[f64], _: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
        fn vjp(&self, _: &[f64], _: &[f64], y: &[f64], _: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.0; y.len()])
        }
    }

    struct Linear(f64);
    impl DeltaFunction for Linear {
        fn eval(&self, _: &[f64], _: &[f64], y: &[f64]) -> Result<Vec<f64>> {
            Ok(y.iter().map(|v| self.0 * v).collect())
        }
        fn vjp(&self, _: &[f64], _: &[f64], _: &[f64], g: &[f64]) -> Result<Vec<f64>> {
            Ok(g.iter().map(|v| self.0 * v).collect())
        }
    }

    const S: [f64; 2] = [0.0, 0.0];

    #[test]
    fn constant_delta_converges_in_one_iteration() {
        let r = fixed_point_correct(&[0.5, -0.2], &Constant(vec![0.1, 0.3]), &S, &S, 5).unwrap();
        assert!(!r.diverged);
        assert_eq!(r.y, vec![0.4, -0.5]);
        assert!(r.residuals[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_contraction_flags_divergence() {
        let r = fixed_point_correct(&[0.5, -0.2], &Linear(-2.0), &S, &S, 50).unwrap();
        assert!(r.diverged);
        assert!(r.residuals.len() < 50);
        assert_eq!(r.y, vec![0.5, -0.2]);
    }

    #[test]
    fn zero_delta_gradient_is_exact() {
        let r = gradient_correct(&[0.5, -0.2], &Constant(vec![0.0, 0.0]), &S, &S, 10, 0.1).unwrap();
        assert_eq!(r.y, vec![0.5, -0.2]);
        assert_eq!(r.loss, 0.0);
    }

    proptest! {
        #[test]
        fn fixed_point_matches_geometric_series(alpha in -0.8f64..0.8, t in -1.0f64..1.0) {
            let r = fixed_point_correct(&[t], &Linear(alpha), &S, &S, 200).unwrap();
            prop_assert!(!r.diverged);
            prop_assert!((r.y[0] - t / (1.0 + alpha)).abs() < 1e-9);
            // Residuals contract until they reach round-off.
            prop_assert!(r.residuals.windows(2).all(|w| w[1] <= w[0] || w[0] < 1e-14));
        }

        #[test]
        fn gradient_matches_quadratic_minimum(alpha in -0.5f64..0.9, t in -1.0f64..1.0) {
            let r = gradient_correct(&[t], &Linear(alpha), &S, &S, 400, 0.1).unwrap();
            prop_assert!((r.y[0] - t / (1.0 + alpha)).abs() < 1e-8);
            prop_assert!(r.loss < 1e-15);
        }
    }
}
