//! Noisy MMD particle flows with random-feature kernels.
//!
//! Particles follow `dX = -c ∇W(X) dt + sqrt(2/β) dB` where the witness is
//! `W(x) = ∫ k(x, ·) d(ν_N - ν_n)` and `c` is `1 / MMD` (sqrt variant) or `2`
//! (squared variant).

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, norm, Manifold};
use crate::model::{DataSet, FeatureModel};
use crate::points::Points;
use crate::sampler::{euler_maruyama, item_rng};

/// Below this the sqrt variant drops its interaction drift.
pub const MMD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    /// `E_θ[ReLU<θ,x> ReLU<θ,y>]` for θ uniform on the unit sphere of
    /// `R^ambient`, in closed form.
    ArcCosine1 { ambient: usize },
    /// `(1/M) Σ_j φ(x, θ_j) φ(y, θ_j)` over fixed features.
    MonteCarlo { model: FeatureModel, thetas: Points },
}

impl Kernel {
    /// `M` features drawn uniformly from the parameter space of `model`.
    pub fn monte_carlo<R: Rng + ?Sized>(model: FeatureModel, m: usize, rng: &mut R) -> Self {
        let tm = model.theta_manifold();
        let mut thetas = Points::zeros(m, model.theta_dim());
        for r in thetas.rows_mut() {
            tm.sample_base(rng, r);
        }
        Kernel::MonteCarlo { model, thetas }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Kernel::ArcCosine1 { ambient } => {
                let (nx, ny) = (norm(x), norm(y));
                if nx == 0.0 || ny == 0.0 {
                    return 0.0;
                }
                let c = (dot(x, y) / (nx * ny)).clamp(-1.0, 1.0);
                let t = c.acos();
                nx * ny * (t.sin() + (PI - t) * c) / (2.0 * PI * *ambient as f64)
            }
            Kernel::MonteCarlo { model, thetas } => {
                thetas.rows().map(|t| model.phi(x, t) * model.phi(y, t)).sum::<f64>() / thetas.len() as f64
            }
        }
    }

    /// Adds `scale * ∇_x k(x, y)` to `out` and returns `k(x, y)`.
    pub fn eval_and_add_grad_x(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) -> f64 {
        match self {
            Kernel::ArcCosine1 { ambient } => {
                let (nx, ny) = (norm(x), norm(y));
                if nx == 0.0 || ny == 0.0 {
                    return 0.0;
                }
                let z = 2.0 * PI * *ambient as f64;
                let c = (dot(x, y) / (nx * ny)).clamp(-1.0, 1.0);
                let t = c.acos();
                let j = t.sin() + (PI - t) * c;
                // ∇_x = [ny J x/nx + (π - t)(y - c ny x/nx)] / z
                let a = scale * (ny * j / nx - (PI - t) * c * ny / nx) / z;
                let b = scale * (PI - t) / z;
                for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
                    *o += a * xi + b * yi;
                }
                nx * ny * j / z
            }
            Kernel::MonteCarlo { model, thetas } => {
                let mf = thetas.len() as f64;
                let mut k = 0.0;
                for t in thetas.rows() {
                    let py = model.phi(y, t);
                    k += model.phi(x, t) * py;
                    if py != 0.0 {
                        model.add_grad_x(x, t, scale * py / mf, out);
                    }
                }
                k / mf
            }
        }
    }

    pub fn manifold_dim(&self) -> usize {
        match self {
            Kernel::ArcCosine1 { ambient } => *ambient,
            Kernel::MonteCarlo { model, .. } => model.x_dim(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdVariant {
    /// Drift `∇W / MMD` with inverse temperature β.
    Sqrt,
    /// Drift `2 ∇W` with inverse temperature β̃.
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmdConfig {
    pub variant: MmdVariant,
    /// β for the sqrt variant, β̃ for the squared variant.
    #[serde(alias = "beta_tilde")]
    pub beta: f64,
    pub s: f64,
    #[serde(rename = "T")]
    pub iterations: u64,
    #[serde(default)]
    pub seed: u64,
}

impl MmdConfig {
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

/// `(1/|a||b|) Σ_i Σ_j k(a_i, b_j)`.
pub fn mean_kernel(kernel: &Kernel, a: &Points, b: &Points) -> f64 {
    let rows: Vec<f64> = a.as_slice().par_chunks(a.dim()).map(|x| b.rows().map(|y| kernel.eval(x, y)).sum::<f64>()).collect();
    rows.iter().sum::<f64>() / (a.len() as f64 * b.len() as f64)
}

/// Biased (V-statistic) squared MMD between particles and data.
pub fn mmd2(particles: &Points, data: &Points, kernel: &Kernel) -> f64 {
    mean_kernel(kernel, particles, particles) + mean_kernel(kernel, data, data) - 2.0 * mean_kernel(kernel, particles, data)
}

/// Witness `W(x) = mean_j k(x, X_j) - mean_i k(x, x_i)`.
pub fn witness(x: &[f64], particles: &Points, data: &Points, kernel: &Kernel) -> f64 {
    let a: f64 = particles.rows().map(|y| kernel.eval(x, y)).sum::<f64>() / particles.len() as f64;
    let b: f64 = data.rows().map(|y| kernel.eval(x, y)).sum::<f64>() / data.len() as f64;
    a - b
}

/// Ambient gradient of the witness at `x`.
pub fn mmd_drift(x: &[f64], particles: &Points, data: &Points, kernel: &Kernel) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    witness_and_grad(x, particles, data, kernel, &mut out);
    out
}

/// Witness value at `x`; its gradient is written to `out`.
pub fn witness_and_grad(x: &[f64], particles: &Points, data: &Points, kernel: &Kernel, out: &mut [f64]) -> f64 {
    out.iter_mut().for_each(|o| *o = 0.0);
    let a = 1.0 / particles.len() as f64;
    let b = 1.0 / data.len() as f64;
    let mut w = 0.0;
    for y in particles.rows() {
        w += a * kernel.eval_and_add_grad_x(x, y, a, out);
    }
    for y in data.rows() {
        w -= b * kernel.eval_and_add_grad_x(x, y, -b, out);
    }
    w
}

/// Witness values and gradients at every particle; the mean of the values
/// is `mean_kernel(P, P) - mean_kernel(P, D)`.
fn witness_at_particles(particles: &Points, data: &Points, kernel: &Kernel) -> (Vec<f64>, Points) {
    let dim = particles.dim();
    let mut grads = vec![0.0; particles.as_slice().len()];
    let mut values = vec![0.0; particles.len()];
    values
        .par_iter_mut()
        .zip(grads.par_chunks_mut(dim))
        .zip(particles.as_slice().par_chunks(dim))
        .for_each(|((v, g), x)| *v = witness_and_grad(x, particles, data, kernel, g));
    (values, Points::new(dim, grads).expect("shape"))
}

/// Particle flow state with the cached data self-interaction.
#[derive(Debug, Clone)]
pub struct MmdFlow {
    pub cfg: MmdConfig,
    pub kernel: Kernel,
    pub manifold: Manifold,
    pub data: DataSet,
    data_self: f64,
}

/// Diagnostics of one flow step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdStepInfo {
    /// Squared MMD before the step.
    pub mmd2: f64,
    /// The sqrt variant met `MMD <= 1e-9` and skipped its interaction drift.
    pub degenerate: bool,
}

impl MmdFlow {
    pub fn new(cfg: MmdConfig, kernel: Kernel, manifold: Manifold, data: DataSet) -> Result<Self> {
        cfg.validate()?;
        if kernel.manifold_dim() != data.dim() || manifold.ambient_dim() != data.dim() {
            return Err(Error::Degenerate("kernel, manifold and data disagree on dimension".into()));
        }
        let data_self = mean_kernel(&kernel, &data, &data);
        Ok(MmdFlow { cfg, kernel, manifold, data, data_self })
    }

    pub fn mmd2(&self, particles: &Points) -> f64 {
        mean_kernel(&self.kernel, particles, particles) + self.data_self
            - 2.0 * mean_kernel(&self.kernel, particles, &self.data)
    }

    /// One Euler–Maruyama step of all particles; particle `i` draws noise
    /// from stream `i` of `seed`.
    pub fn step(&self, particles: &mut Points, seed: u64) -> Result<MmdStepInfo> {
        let (values, mut grads) = witness_at_particles(particles, &self.data, &self.kernel);
        // Σ_i W(X_i)/N = <P,P> - <P,D>, and <P,D> = (<P,P> + <D,D> - MMD²)/2
        let pp_minus_pd: f64 = values.iter().sum::<f64>() / particles.len() as f64;
        let pd = mean_kernel(&self.kernel, particles, &self.data);
        let m2 = (pp_minus_pd + pd) + self.data_self - 2.0 * pd;
        let (scale, degenerate) = match self.cfg.variant {
            MmdVariant::Squared => (2.0, false),
            MmdVariant::Sqrt => {
                let m = m2.max(0.0).sqrt();
                if m <= MMD_FLOOR {
                    (0.0, true)
                } else {
                    (1.0 / m, false)
                }
            }
        };
        grads.as_mut_slice().iter_mut().for_each(|g| *g *= scale);
        let dim = particles.dim();
        let inv_beta = 1.0 / self.cfg.beta;
        let manifold = self.manifold;
        let step = self.cfg.s;
        particles
            .as_mut_slice()
            .par_chunks_mut(dim)
            .zip(grads.as_mut_slice().par_chunks_mut(dim))
            .enumerate()
            .try_for_each(|(i, (x, g))| {
                let mut rng = item_rng(seed, i as u64);
                euler_maruyama(&manifold, x, g, step, inv_beta, false, &mut rng)
            })?;
        if particles.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "mmd particles", iteration: 0 });
        }
        Ok(MmdStepInfo { mmd2: m2, degenerate })
    }

    /// Energy readout `β W(x) / MMD` (sqrt) or `2 β̃ W(x)` (squared).
    pub fn energy_estimate(&self, particles: &Points, x: &[f64]) -> Result<f64> {
        energy_estimate(particles, &self.data, &self.kernel, &self.cfg, x)
    }
}

/// Energy readout of the flow at `x`.
pub fn energy_estimate(particles: &Points, data: &Points, kernel: &Kernel, cfg: &MmdConfig, x: &[f64]) -> Result<f64> {
    let w = witness(x, particles, data, kernel);
    match cfg.variant {
        MmdVariant::Squared => Ok(2.0 * cfg.beta * w),
        MmdVariant::Sqrt => {
            let m = mmd2(particles, data, kernel).max(0.0).sqrt();
            if m <= MMD_FLOOR {
                return Err(Error::Degenerate(format!("MMD {m:e} is below the floor {MMD_FLOOR:e}")));
            }
            Ok(cfg.beta * w / m)
        }
    }
}
