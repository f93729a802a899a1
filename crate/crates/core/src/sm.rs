//! Direct score-matching training of the shallow energy.
//!
//! The empirical loss is `L = mean_i [½|∇f(x_i)|² - β⁻¹ Δf(x_i)]` with
//! Riemannian derivatives. Its first variation with respect to the signed
//! neuron measure is `V(θ) = mean_i [∇φ(x_i, θ)·∇f(x_i) - β⁻¹ Δφ(x_i, θ)]`;
//! constant factors of the continuous-time flow are absorbed in the step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::normalize_weights;
use crate::error::{Error, Result};
use crate::model::{field_k, DataSet, FeatureEnsemble};
use crate::points::Points;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmConfig {
    pub s: f64,
    #[serde(rename = "T")]
    pub iterations: u64,
    pub beta: f64,
    #[serde(default = "yes")]
    pub transport_features: bool,
    #[serde(default = "yes")]
    pub cap_total_variation: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl SmConfig {
    pub fn new(s: f64, iterations: u64, beta: f64) -> Self {
        SmConfig { s, iterations, beta, transport_features: true, cap_total_variation: true, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::InvalidConfig(format!("s must be positive, got {}", self.s)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Riemannian energy gradients at the data points.
fn data_gradients(ens: &FeatureEnsemble, data: &Points) -> Points {
    let dim = data.dim();
    let mut g = vec![0.0; data.as_slice().len()];
    g.par_chunks_mut(dim).zip(data.as_slice().par_chunks(dim)).for_each(|(o, x)| {
        ens.riemannian_grad_energy_x(x, o);
    });
    Points::new(dim, g).expect("shape")
}

/// Laplace–Beltrami operator of the energy at `x`.
pub fn energy_laplacian(ens: &FeatureEnsemble, x: &[f64]) -> f64 {
    (0..ens.len()).map(|j| ens.coefficient(j) * ens.model.laplacian_x(x, ens.thetas.row(j))).sum()
}

pub fn sm_loss(ens: &FeatureEnsemble, data: &DataSet, beta: f64) -> f64 {
    let inv_beta = 1.0 / beta;
    let dim = data.dim();
    let terms: Vec<f64> = data
        .as_slice()
        .par_chunks(dim)
        .map(|x| {
            let mut g = vec![0.0; dim];
            ens.riemannian_grad_energy_x(x, &mut g);
            let lap = if inv_beta > 0.0 { energy_laplacian(ens, x) } else { 0.0 };
            0.5 * g.iter().map(|v| v * v).sum::<f64>() - inv_beta * lap
        })
        .collect();
    terms.iter().sum::<f64>() / data.len() as f64
}

/// `V(θ)` and `∇_θ V(θ)` given precomputed data gradients.
fn variation_at(ens: &FeatureEnsemble, data: &Points, grads: &Points, inv_beta: f64, theta: &[f64], out: &mut [f64]) -> f64 {
    out.iter_mut().for_each(|o| *o = 0.0);
    let model = &ens.model;
    let scale = 1.0 / data.len() as f64;
    let mut v = 0.0;
    for (x, g) in data.rows().zip(grads.rows()) {
        v += model.grad_x_dot(x, theta, g);
        model.add_grad_theta_grad_x_dot(x, theta, g, scale, out);
        if inv_beta > 0.0 {
            v -= inv_beta * model.laplacian_x(x, theta);
            model.add_grad_theta_laplacian(x, theta, -inv_beta * scale, out);
        }
    }
    v * scale
}

/// First variation of [`sm_loss`] at `θ` and its θ-gradient.
pub fn sm_first_variation(ens: &FeatureEnsemble, data: &DataSet, beta: f64, theta: &[f64]) -> (f64, Vec<f64>) {
    let grads = data_gradients(ens, data);
    let mut out = vec![0.0; theta.len()];
    let v = variation_at(ens, data, &grads, 1.0 / beta, theta, &mut out);
    (v, out)
}

/// First variation and θ-gradient at every neuron.
pub fn sm_fields_at_neurons(ens: &FeatureEnsemble, data: &DataSet, beta: f64) -> (Vec<f64>, Points) {
    let grads = data_gradients(ens, data);
    let inv_beta = 1.0 / beta;
    let dim = ens.thetas.dim();
    let mut values = vec![0.0; ens.len()];
    let mut out = vec![0.0; ens.len() * dim];
    values.par_iter_mut().zip(out.par_chunks_mut(dim)).enumerate().for_each(|(j, (v, o))| {
        *v = variation_at(ens, data, &grads, inv_beta, ens.thetas.row(j), o);
    });
    (values, Points::new(dim, out).expect("shape"))
}

/// Wasserstein–Fisher–Rao descent step on the loss:
/// `θ_j -= s σ_j ∇V(θ_j)`, `log w_j -= s (σ_j V(θ_j) - K)`, then the TV projection.
pub fn sm_step(ens: &mut FeatureEnsemble, data: &DataSet, cfg: &SmConfig, iteration: u64) -> Result<()> {
    let (values, grads) = sm_fields_at_neurons(ens, data, cfg.beta);
    if values.iter().chain(grads.as_slice()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "score-matching field", iteration });
    }
    let k = field_k(ens, &values);
    let tm = ens.model.theta_manifold();
    for j in 0..ens.len() {
        let sign = ens.sign(j);
        let w = ens.weights[j] * (-cfg.s * (sign * values[j] - k)).exp();
        if !w.is_finite() {
            return Err(Error::WeightOverflow { iteration });
        }
        ens.weights[j] = w;
        if cfg.transport_features {
            let theta = ens.thetas.row_mut(j);
            for (t, g) in theta.iter_mut().zip(grads.row(j)) {
                *t -= cfg.s * sign * g;
            }
            tm.retract(theta)?;
        }
    }
    if cfg.cap_total_variation {
        normalize_weights(ens);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmState {
    pub ensemble: FeatureEnsemble,
    pub iteration: u64,
}

#[derive(Debug, Clone)]
pub struct SmTrainer {
    pub cfg: SmConfig,
    pub data: DataSet,
    pub state: SmState,
}

impl SmTrainer {
    pub fn new(cfg: SmConfig, data: DataSet, ensemble: FeatureEnsemble) -> Result<Self> {
        cfg.validate()?;
        if !ensemble.model.map.is_smooth() {
            return Err(Error::InvalidConfig(
                "score matching needs a twice differentiable feature (e.g. softplus)".into(),
            ));
        }
        if ensemble.model.x_dim() != data.dim() {
            return Err(Error::Degenerate("model and data disagree on dimension".into()));
        }
        Ok(SmTrainer { cfg, data, state: SmState { ensemble, iteration: 0 } })
    }

    pub fn step(&mut self) -> Result<()> {
        sm_step(&mut self.state.ensemble, &self.data, &self.cfg, self.state.iteration)?;
        self.state.iteration += 1;
        Ok(())
    }

    pub fn train<F: FnMut(&SmState) -> Result<()>>(&mut self, mut observe: F) -> Result<()> {
        observe(&self.state)?;
        while self.state.iteration < self.cfg.iterations {
            self.step()?;
            observe(&self.state)?;
        }
        Ok(())
    }
}
