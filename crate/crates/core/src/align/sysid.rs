//! Exhaustive grid search over simulator parameters by replaying recorded
//! actions from recorded states.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::dataset::TrajectoryDataset;
use crate::dynamics::{apply_gap, control_step, DynamicsParams, GapSpec};
use crate::error::{Error, Result};
use crate::ppo::worker_count;

/// Uniform scalings applied to every link and joint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub mass_ratio: f64,
    pub com_shift: f64,
    pub kp_ratio: f64,
    pub kd_ratio: f64,
}

impl GridPoint {
    pub const NOMINAL: GridPoint = GridPoint {
        mass_ratio: 1.0,
        com_shift: 0.0,
        kp_ratio: 1.0,
        kd_ratio: 1.0,
    };

    pub fn to_gap(&self, n: usize) -> GapSpec {
        GapSpec {
            mass_ratio: self.mass_ratio,
            com_shift: self.com_shift,
            kp_ratio: vec![self.kp_ratio; n],
            kd_ratio: vec![self.kd_ratio; n],
            ..GapSpec::identity(n)
        }
    }

    pub fn params(&self, sim: &DynamicsParams) -> Result<DynamicsParams> {
        apply_gap(sim, &self.to_gap(sim.n_links))
    }

    pub fn distance_to_nominal(&self) -> f64 {
        ((self.mass_ratio - 1.0).powi(2)
            + self.com_shift.powi(2)
            + (self.kp_ratio - 1.0).powi(2)
            + (self.kd_ratio - 1.0).powi(2))
        .sqrt()
    }

    fn as_array(&self) -> [f64; 4] {
        [self.mass_ratio, self.com_shift, self.kp_ratio, self.kd_ratio]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SysIdGrid {
    pub mass_ratio: Vec<f64>,
    pub com_shift: Vec<f64>,
    pub kp_ratio: Vec<f64>,
    pub kd_ratio: Vec<f64>,
}

impl Default for SysIdGrid {
    fn default() -> Self {
        Self {
            mass_ratio: vec![0.95, 1.0, 1.05],
            com_shift: vec![-0.02, 0.0, 0.02],
            kp_ratio: vec![0.95, 1.0, 1.05],
            kd_ratio: vec![0.95, 1.0, 1.05],
        }
    }
}

impl SysIdGrid {
    /// All combinations, lexicographic in (mass, com, kp, kd).
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &mass_ratio in &self.mass_ratio {
            for &com_shift in &self.com_shift {
                for &kp_ratio in &self.kp_ratio {
                    for &kd_ratio in &self.kd_ratio {
                        out.push(GridPoint {
                            mass_ratio,
                            com_shift,
                            kp_ratio,
                            kd_ratio,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SysIdResult {
    pub best: GridPoint,
    pub best_error: f64,
    /// Replay error of every grid point in grid order.
    pub errors: Vec<(GridPoint, f64)>,
}

/// Mean squared `[q, qd]` deviation when replaying consecutive windows of
/// `horizon` steps (or whole episodes if shorter) with `params`.
/// Divergent replays score infinity.
pub fn replay_error(data: &TrajectoryDataset, params: &DynamicsParams, horizon: usize) -> Result<f64> {
    let horizon = horizon.max(1);
    let (mut sum, mut count) = (0.0, 0usize);
    for ep in &data.episodes {
        let mut t0 = 0;
        while t0 < ep.n_steps() {
            let len = horizon.min(ep.n_steps() - t0);
            if len < horizon && t0 > 0 {
                break;
            }
            let mut s = ep.state_at(t0, data.dt, params);
            for k in 0..len {
                match control_step(&mut s, &ep.actions[t0 + k], params) {
                    Ok(_) if s.is_finite() => {}
                    Ok(_) | Err(Error::NonFinite(_)) | Err(Error::Numeric(_)) => return Ok(f64::INFINITY),
                    Err(e) => return Err(e),
                }
                for (a, b) in s.flat().iter().zip(&ep.states[t0 + k + 1]) {
                    sum += (a - b).powi(2);
                }
                count += 2 * data.n_links;
            }
            t0 += len;
        }
    }
    Ok(sum / count.max(1) as f64)
}

fn ranking(a: &(GridPoint, f64), b: &(GridPoint, f64)) -> Ordering {
    a.1.total_cmp(&b.1)
        .then(a.0.distance_to_nominal().total_cmp(&b.0.distance_to_nominal()))
        .then_with(|| {
            a.0.as_array()
                .iter()
                .zip(b.0.as_array())
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Evaluates every grid point (in parallel across workers) and returns the
/// minimum-error point; ties go to the point nearest nominal, then the
/// lexicographically smallest.
pub fn sysid_grid_search(
    data: &TrajectoryDataset,
    sim: &DynamicsParams,
    grid: &SysIdGrid,
    horizon_s: f64,
) -> Result<SysIdResult> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty SysID grid".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("SysID needs data".into()));
    }
    let horizon = (horizon_s / data.dt).round().max(1.0) as usize;
    let params = points.iter().map(|p| p.params(sim)).collect::<Result<Vec<_>>>()?;
    let workers = worker_count().min(points.len()).max(1);
    let chunk = points.len().div_ceil(workers);
    let errors: Vec<f64> = std::thread::scope(|scope| {
        let handles: Vec<_> = params
            .chunks(chunk)
            .map(|ps| scope.spawn(move || ps.iter().map(|p| replay_error(data, p, horizon)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sysid worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let errors: Vec<(GridPoint, f64)> = points.into_iter().zip(errors).collect();
    let (best, best_error) = *errors.iter().min_by(|a, b| ranking(a, b)).unwrap();
    Ok(SysIdResult {
        best,
        best_error,
        errors,
    })
}
