//! Euler sampling and change-of-variables likelihood.

use crate::ad::{Graph, Tensor};

use super::model::{Parameterization, VelocityModel};
use super::source::Source;
use super::FlowError;

/// A batched velocity field with exact divergence.
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn velocity(&self, t: f64, theta: &Tensor) -> Result<Tensor, FlowError>;
    /// Velocity plus tr(∂v/∂θ) for every row.
    fn velocity_divergence(&self, t: f64, theta: &Tensor) -> Result<(Tensor, Vec<f64>), FlowError>;
}

/// Left endpoints of the uniform grid on [0, 1].
pub fn euler_times(n_steps: usize) -> Vec<f64> {
    (0..n_steps).map(|k| k as f64 / n_steps as f64).collect()
}

/// Forward Euler on dθ/dt = v(t, θ) from t = 0 to 1. The callback sees the
/// step index, the time and the current state.
pub fn integrate<F>(mut velocity: F, theta0: Tensor, n_steps: usize) -> Result<Tensor, FlowError>
where
    F: FnMut(usize, f64, &Tensor) -> Result<Tensor, FlowError>,
{
    if n_steps == 0 {
        return Err(FlowError::Config("at least one Euler step is required".into()));
    }
    let dt = 1.0 / n_steps as f32;
    let mut theta = theta0;
    for (k, t) in euler_times(n_steps).into_iter().enumerate() {
        let v = velocity(k, t, &theta)?;
        if v.shape() != theta.shape() {
            return Err(FlowError::Shape(format!("velocity {:?} for state {:?}", v.shape(), theta.shape())));
        }
        for (x, dv) in theta.data_mut().iter_mut().zip(v.data()) {
            *x += dt * dv;
        }
        if !theta.is_finite() {
            return Err(FlowError::NonFinite { step: k });
        }
    }
    Ok(theta)
}

pub fn integrate_field(field: &dyn VelocityField, theta0: Tensor, n_steps: usize) -> Result<Tensor, FlowError> {
    integrate(|_, t, th| field.velocity(t, th), theta0, n_steps)
}

/// log p1(θ1) = log p0(θ0) − ∫ div v dt, with θ0 found by Euler steps
/// backwards from t = 1. Returns one value per row of `theta1`.
pub fn log_density(field: &dyn VelocityField, source: &dyn Source, theta1: &Tensor, n_steps: usize) -> Result<Vec<f64>, FlowError> {
    if n_steps == 0 {
        return Err(FlowError::Config("at least one Euler step is required".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let mut theta = theta1.clone();
    let mut div_integral = vec![0.0f64; theta.rows()];
    for k in (1..=n_steps).rev() {
        let t = k as f64 * dt;
        let (v, div) = field.velocity_divergence(t, &theta)?;
        if div.iter().any(|d| !d.is_finite()) {
            return Err(FlowError::NonFinite { step: k });
        }
        for (acc, d) in div_integral.iter_mut().zip(&div) {
            *acc += d * dt;
        }
        for (x, dv) in theta.data_mut().iter_mut().zip(v.data()) {
            *x -= (dt as f32) * dv;
        }
    }
    Ok((0..theta.rows())
        .map(|r| {
            let row: Vec<f64> = theta.row(r).iter().map(|&v| v as f64).collect();
            source.log_prob(&row) - div_integral[r]
        })
        .collect())
}

/// A model bound to one observation. Self-conditioned models see a zero slot.
pub struct Conditioned<'a> {
    pub model: &'a VelocityModel,
    features: Tensor,
}

impl<'a> Conditioned<'a> {
    pub fn new(model: &'a VelocityModel, x_o: &[f32]) -> Result<Self, FlowError> {
        let x = Tensor::matrix(1, x_o.len(), x_o.to_vec())?;
        Ok(Self { model, features: model.features(&x)? })
    }

    pub fn features(&self, rows: usize) -> Tensor {
        self.features.repeat_rows(rows)
    }

    fn slot(&self, rows: usize) -> Option<Tensor> {
        self.model.self_conditioning().then(|| Tensor::zeros(&[rows, self.model.dim_theta()]))
    }
}

impl VelocityField for Conditioned<'_> {
    fn dim(&self) -> usize {
        self.model.dim_theta()
    }

    fn velocity(&self, t: f64, theta: &Tensor) -> Result<Tensor, FlowError> {
        let n = theta.rows();
        self.model.velocity(t, theta, &self.features(n), self.slot(n).as_ref())
    }

    fn velocity_divergence(&self, t: f64, theta: &Tensor) -> Result<(Tensor, Vec<f64>), FlowError> {
        // Rows are independent, so seeding e_i on every row at once yields
        // ∂v_i/∂θ_i per row from a single reverse sweep.
        let (n, d) = (theta.rows(), theta.row_len());
        let t = match self.model.config().parameterization {
            Parameterization::XPrediction => t.min(1.0 - 1e-4),
            Parameterization::Velocity => t,
        };
        let mut g = Graph::new();
        let th = g.input(theta.clone());
        let f = g.constant(self.features(n));
        let s = self.slot(n).map(|s| g.constant(s));
        let v = self.model.record_velocity(&mut g, &vec![t as f32; n], th, f, s, false)?;
        let mut div = vec![0.0f64; n];
        for i in 0..d {
            let mut seed = Tensor::zeros(&[n, d]);
            for r in 0..n {
                seed.row_mut(r)[i] = 1.0;
            }
            let grads = g.backward_retain(v, seed)?;
            let gi = grads.input(th).ok_or_else(|| FlowError::Shape("state gradient missing".into()))?;
            for (r, acc) in div.iter_mut().enumerate() {
                *acc += gi.row(r)[i] as f64;
            }
        }
        Ok((g.value(v).clone(), div))
    }
}
