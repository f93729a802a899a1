//! Projected unadjusted Langevin dynamics and teacher data generation.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Manifold;
use crate::model::{DataSet, Energy};
use crate::points::Points;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangevinConfig {
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in: u64,
    #[serde(default = "default_thin")]
    pub thin: u64,
    #[serde(default = "default_chains")]
    pub chains: usize,
    /// Inverse temperature of the sampled Gibbs law.
    pub beta: f64,
}

fn default_step() -> f64 {
    0.005
}
fn default_burn_in() -> u64 {
    50_000
}
fn default_thin() -> u64 {
    50
}
fn default_chains() -> usize {
    64
}

impl LangevinConfig {
    pub fn new(beta: f64) -> Self {
        LangevinConfig {
            step: default_step(),
            burn_in: default_burn_in(),
            thin: default_thin(),
            chains: default_chains(),
            beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidConfig(format!("langevin step must be positive, got {}", self.step)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be positive, got {}", self.beta)));
        }
        if self.thin == 0 || self.chains == 0 {
            return Err(Error::InvalidConfig("thin and chains must be at least 1".into()));
        }
        Ok(())
    }
}

/// One Euler–Maruyama move given a precomputed energy gradient:
/// `x <- retract(x - h grad + (h/β) ∇log τ(x) + sqrt(2h/β) ζ)`.
///
/// `inv_beta = 0` gives a deterministic gradient step. With `tangent_drift`
/// the gradient is projected onto the tangent space before the step.
pub fn euler_maruyama<R: Rng + ?Sized>(
    manifold: &Manifold,
    x: &mut [f64],
    grad: &mut [f64],
    step: f64,
    inv_beta: f64,
    tangent_drift: bool,
    rng: &mut R,
) -> Result<()> {
    let mut z = [0.0f64; 16];
    let mut heap;
    let z: &mut [f64] = if x.len() <= 16 {
        &mut z[..x.len()]
    } else {
        heap = vec![0.0; x.len()];
        &mut heap
    };
    if inv_beta > 0.0 {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
    }
    euler_maruyama_with_noise(manifold, x, grad, step, inv_beta, tangent_drift, z)
}

/// [`euler_maruyama`] with caller-supplied standard normal draws `z`.
pub fn euler_maruyama_with_noise(
    manifold: &Manifold,
    x: &mut [f64],
    grad: &mut [f64],
    step: f64,
    inv_beta: f64,
    tangent_drift: bool,
    z: &[f64],
) -> Result<()> {
    if tangent_drift {
        manifold.to_tangent(x, grad);
    }
    grad.iter_mut().for_each(|g| *g *= -step);
    manifold.add_base_drift(x, step * inv_beta, grad);
    let sd = (2.0 * inv_beta * step).sqrt();
    for ((xi, d), zi) in x.iter_mut().zip(grad.iter()).zip(z) {
        *xi += d + sd * zi;
    }
    manifold.retract(x)
}

/// One projected Langevin step targeting `exp(-β f)` times the base measure.
pub fn langevin_step<E: Energy + ?Sized, R: Rng + ?Sized>(
    x: &mut [f64],
    energy: &E,
    beta: f64,
    step: f64,
    rng: &mut R,
    manifold: &Manifold,
) -> Result<()> {
    let mut g = vec![0.0; x.len()];
    energy.grad(x, &mut g);
    euler_maruyama(manifold, x, &mut g, step, 1.0 / beta, false, rng)
}

/// Per-item generator: stream `index` of a ChaCha8 keyed by `seed`.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `n` approximate draws from `exp(-β f)` using independent chains.
///
/// Sample `k` comes from chain `k % chains`, so the output is deterministic
/// in `seed` regardless of the worker count.
pub fn generate_dataset<E: Energy + ?Sized>(
    energy: &E,
    manifold: &Manifold,
    n: usize,
    cfg: &LangevinConfig,
    seed: u64,
) -> Result<DataSet> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Degenerate("cannot generate an empty data set".into()));
    }
    let dim = manifold.ambient_dim();
    let chains = cfg.chains.min(n);
    let per_chain = n.div_ceil(chains);
    let runs: Vec<Result<Vec<f64>>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = item_rng(seed, c as u64);
            let mut x = vec![0.0; dim];
            manifold.sample_base(&mut rng, &mut x);
            let mut out = Vec::with_capacity(per_chain * dim);
            let mut steps: u64 = 0;
            let check = |x: &[f64], steps: u64| {
                if x.iter().all(|v| v.is_finite()) && energy.value(x).is_finite() {
                    Ok(())
                } else {
                    Err(Error::NonFinite { what: "langevin chain", iteration: steps })
                }
            };
            for _ in 0..cfg.burn_in {
                langevin_step(&mut x, energy, cfg.beta, cfg.step, &mut rng, manifold)?;
                steps += 1;
            }
            check(&x, steps)?;
            for _ in 0..per_chain {
                for _ in 0..cfg.thin {
                    langevin_step(&mut x, energy, cfg.beta, cfg.step, &mut rng, manifold)?;
                    steps += 1;
                }
                check(&x, steps)?;
                out.extend_from_slice(&x);
            }
            Ok(out)
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut coords = Vec::with_capacity(n * dim);
    for k in 0..n {
        let (c, j) = (k % chains, k / chains);
        coords.extend_from_slice(&runs[c][j * dim..(j + 1) * dim]);
    }
    DataSet::new(Points::new(dim, coords)?)
}

/// Writes points as CSV with header `x0,x1,...` and 17 significant digits.
pub fn write_points_csv<W: Write>(points: &Points, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record((0..points.dim()).map(|i| format!("x{i}")))?;
    for row in points.rows() {
        w.write_record(row.iter().map(|v| format!("{v:.16e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points_csv<R: Read>(input: R) -> Result<Points> {
    let mut r = csv::Reader::from_reader(input);
    let dim = r.headers()?.len();
    let mut coords = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != dim {
            return Err(Error::Degenerate(format!("row with {} fields, expected {dim}", rec.len())));
        }
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| Error::Degenerate(format!("bad number {field:?}: {e}")))?;
            coords.push(v);
        }
    }
    Points::new(dim, coords)
}
