//! Fixed-step RK4 over an observation grid, generic over the scalar type.

use serde::{Deserialize, Serialize};

use crate::ad::Real;

use super::TaskError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeGrid {
    pub t0: f64,
    pub t1: f64,
    /// Total RK4 steps over [t0, t1], spread over the observation intervals.
    pub n_internal_steps: usize,
    pub obs_times: Vec<f64>,
}

impl OdeGrid {
    pub fn validate(&self) -> Result<(), TaskError> {
        if !(self.t1 > self.t0) || self.n_internal_steps == 0 {
            return Err(TaskError::Config("ODE grid needs t1 > t0 and at least one step".into()));
        }
        if self.obs_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TaskError::Config("observation times must be strictly increasing".into()));
        }
        if self.obs_times.iter().any(|&t| t < self.t0 || t > self.t1) {
            return Err(TaskError::Config("observation times must lie in [t0, t1]".into()));
        }
        Ok(())
    }

    /// Interval end points t0 < k1 < … ≤ t1 and the RK4 step count for each.
    fn intervals(&self) -> Vec<(f64, f64, usize)> {
        let mut knots: Vec<f64> = self.obs_times.iter().copied().filter(|&t| t > self.t0).collect();
        if knots.last().is_none_or(|&t| t < self.t1) {
            knots.push(self.t1);
        }
        let span = self.t1 - self.t0;
        let mut prev = self.t0;
        knots
            .into_iter()
            .map(|k| {
                let n = ((self.n_internal_steps as f64 * (k - prev) / span).round() as usize).max(1);
                let iv = (prev, k, n);
                prev = k;
                iv
            })
            .collect()
    }
}

pub fn rk4_step<T: Real, const D: usize>(f: &impl Fn(f64, &[T; D]) -> [T; D], t: f64, y: &[T; D], h: f64) -> [T; D] {
    let add = |a: &[T; D], b: &[T; D], s: f64| -> [T; D] { std::array::from_fn(|i| a[i] + b[i] * s) };
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &add(y, &k1, 0.5 * h));
    let k3 = f(t + 0.5 * h, &add(y, &k2, 0.5 * h));
    let k4 = f(t + h, &add(y, &k3, h));
    std::array::from_fn(|i| y[i] + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (h / 6.0))
}

/// Integrates over the grid and returns the state at every observation time.
/// `inspect` sees every internal state (for conservation checks).
pub fn solve<T: Real, const D: usize>(
    grid: &OdeGrid,
    y0: [T; D],
    f: impl Fn(f64, &[T; D]) -> [T; D],
    mut inspect: impl FnMut(f64, &[T; D]),
) -> Result<Vec<[T; D]>, TaskError> {
    grid.validate()?;
    let mut out = Vec::with_capacity(grid.obs_times.len());
    let mut y = y0;
    let mut obs = grid.obs_times.iter().peekable();
    while obs.peek().is_some_and(|&&t| t <= grid.t0) {
        obs.next();
        out.push(y);
    }
    for (a, b, n) in grid.intervals() {
        let h = (b - a) / n as f64;
        for s in 0..n {
            let t = a + s as f64 * h;
            y = rk4_step(&f, t, &y, h);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(TaskError::Simulation(format!("non-finite ODE state at t = {:.3}", t + h)));
            }
            inspect(t + h, &y);
        }
        if obs.peek().is_some_and(|&&t| (t - b).abs() < 1e-12) {
            obs.next();
            out.push(y);
        }
    }
    Ok(out)
}
