//! Simultaneous descent–ascent on Langevin particles and weighted neurons,
//! with optional particle restarts from the data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Manifold;
use crate::model::{fields_at_neurons, DataSet, FeatureEnsemble, FeatureModel, ParticleSet, WeightInit};
use crate::points::Points;
use crate::sampler::{euler_maruyama, euler_maruyama_with_noise, item_rng};

/// How the ratio `α` splits the base step `s` between particles and neurons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// The fast process moves with `s`, the slow one with `min(α, 1) s`.
    #[default]
    SlowMin,
    /// Particles move with `s / max(α, 1)`, neurons with `α s / max(α, 1)`.
    Ratio,
}

/// How restarted particles pick their data point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestartMode {
    /// Each restarted particle draws a data index uniformly.
    #[default]
    Independent,
    /// Restarted particles walk a fresh random permutation of the data, so
    /// with `p_R = 1` and `N = n` the particles become the data multiset.
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualConfig {
    pub alpha: f64,
    pub s: f64,
    #[serde(rename = "T")]
    pub iterations: u64,
    pub beta: f64,
    /// Per-step restart probability.
    #[serde(default)]
    pub p_r: f64,
    /// Restart rate; when set, `p_R = min(1, α′ s)` replaces `p_r`.
    #[serde(default)]
    pub alpha_prime: Option<f64>,
    #[serde(default)]
    pub weight_init: WeightInit,
    #[serde(default)]
    pub schedule: StepSchedule,
    #[serde(default)]
    pub restart_mode: RestartMode,
    #[serde(default = "yes")]
    pub transport_features: bool,
    #[serde(default = "yes")]
    pub cap_total_variation: bool,
    #[serde(default)]
    pub tangent_drift: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl DualConfig {
    pub fn new(alpha: f64, s: f64, iterations: u64, beta: f64) -> Self {
        DualConfig {
            alpha,
            s,
            iterations,
            beta,
            p_r: 0.0,
            alpha_prime: None,
            weight_init: WeightInit::default(),
            schedule: StepSchedule::default(),
            restart_mode: RestartMode::default(),
            transport_features: true,
            cap_total_variation: true,
            tangent_drift: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::InvalidConfig(format!("s must be positive, got {}", self.s)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be positive, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.p_r) {
            return Err(Error::InvalidConfig(format!("p_r must lie in [0, 1], got {}", self.p_r)));
        }
        if let Some(a) = self.alpha_prime {
            if !(a >= 0.0) {
                return Err(Error::InvalidConfig(format!("alpha_prime must be nonnegative, got {a}")));
            }
        }
        Ok(())
    }

    pub fn restart_probability(&self) -> f64 {
        match self.alpha_prime {
            Some(a) => (a * self.s).min(1.0),
            None => self.p_r,
        }
    }

    /// `(particle step, neuron step)`.
    pub fn step_sizes(&self) -> (f64, f64) {
        match self.schedule {
            StepSchedule::SlowMin => {
                if self.alpha >= 1.0 {
                    (self.s, self.s)
                } else {
                    (self.s, self.alpha * self.s)
                }
            }
            StepSchedule::Ratio => {
                let k = self.alpha.max(1.0);
                (self.s / k, self.alpha * self.s / k)
            }
        }
    }

    pub fn inv_beta(&self) -> f64 {
        1.0 / self.beta
    }

    /// Physical time after `iteration` steps, `iteration · s`.
    pub fn time(&self, iteration: u64) -> f64 {
        iteration as f64 * self.s
    }

    pub fn rescaled_time(&self, iteration: u64) -> f64 {
        self.time(iteration) * self.alpha.max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub ensemble: FeatureEnsemble,
    pub particles: ParticleSet,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl TrainerState {
    /// Random neurons and particles drawn uniformly (with replacement) from the data.
    pub fn init(model: FeatureModel, m: usize, n_particles: usize, data: &DataSet, cfg: &DualConfig) -> Result<Self> {
        if n_particles == 0 {
            return Err(Error::Degenerate("need at least one particle".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let ensemble = FeatureEnsemble::random(model, m, cfg.weight_init, &mut rng)?;
        let mut particles = Points::zeros(n_particles, data.dim());
        for p in particles.rows_mut() {
            let k = rng.random_range(0..data.len());
            p.copy_from_slice(data.row(k));
        }
        Ok(TrainerState { ensemble, particles: ParticleSet(particles), iteration: 0, rng })
    }

    pub fn new(ensemble: FeatureEnsemble, particles: ParticleSet, seed: u64) -> Self {
        TrainerState { ensemble, particles, iteration: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

/// Replaces each particle by a data point with probability `p_r`; returns the
/// number of replacements.
pub fn restart_particles<R: Rng + ?Sized>(
    particles: &mut Points,
    data: &DataSet,
    p_r: f64,
    mode: RestartMode,
    rng: &mut R,
) -> usize {
    if p_r <= 0.0 {
        return 0;
    }
    let mut order: Vec<usize> = Vec::new();
    if mode == RestartMode::Stratified {
        order = (0..data.len()).collect();
        order.shuffle(rng);
    }
    let mut count = 0;
    for i in 0..particles.len() {
        if p_r >= 1.0 || rng.random::<f64>() < p_r {
            let k = match mode {
                RestartMode::Independent => rng.random_range(0..data.len()),
                RestartMode::Stratified => order[count % order.len()],
            };
            particles.row_mut(i).copy_from_slice(data.row(k));
            count += 1;
        }
    }
    count
}

/// Euler–Maruyama move of every particle under the current energy; particle
/// `i` draws its noise from stream `i` of `seed`.
pub fn particle_update(
    ens: &FeatureEnsemble,
    particles: &mut Points,
    step: f64,
    inv_beta: f64,
    tangent_drift: bool,
    seed: u64,
) -> Result<()> {
    let manifold = ens.model.manifold;
    let mut grads = ens.grad_energy_points(particles);
    let dim = particles.dim();
    particles
        .as_mut_slice()
        .par_chunks_mut(dim)
        .zip(grads.as_mut_slice().par_chunks_mut(dim))
        .enumerate()
        .try_for_each(|(i, (x, g))| {
            let mut rng = item_rng(seed, i as u64);
            euler_maruyama(&manifold, x, g, step, inv_beta, tangent_drift, &mut rng)
        })?;
    check_finite(particles.as_slice(), "particles")
}

/// [`particle_update`] with caller-supplied standard normal draws, one row per particle.
pub fn particle_update_with_noise(
    ens: &FeatureEnsemble,
    particles: &mut Points,
    step: f64,
    inv_beta: f64,
    tangent_drift: bool,
    noise: &Points,
) -> Result<()> {
    if noise.len() != particles.len() || noise.dim() != particles.dim() {
        return Err(Error::Degenerate("noise shape does not match particles".into()));
    }
    let manifold = ens.model.manifold;
    let mut grads = ens.grad_energy_points(particles);
    let dim = particles.dim();
    particles
        .as_mut_slice()
        .par_chunks_mut(dim)
        .zip(grads.as_mut_slice().par_chunks_mut(dim))
        .zip(noise.as_slice().par_chunks(dim))
        .try_for_each(|((x, g), z)| euler_maruyama_with_noise(&manifold, x, g, step, inv_beta, tangent_drift, z))?;
    check_finite(particles.as_slice(), "particles")
}

/// Ascent step of the neurons on the field `F` evaluated on `particles`:
/// `θ_j += h σ_j ∇F(θ_j)` (then projected) and `w_j *= exp(h σ_j F(θ_j))`.
/// Returns the field values used.
pub fn feature_update(
    ens: &mut FeatureEnsemble,
    particles: &Points,
    data: &DataSet,
    step: f64,
    transport: bool,
    iteration: u64,
) -> Result<Vec<f64>> {
    let (values, grads) = fields_at_neurons(ens, particles, data);
    check_finite(&values, "feature field")?;
    let theta_manifold = ens.model.theta_manifold();
    for j in 0..ens.len() {
        let sign = ens.sign(j);
        let w = ens.weights[j] * (step * sign * values[j]).exp();
        if !w.is_finite() {
            return Err(Error::WeightOverflow { iteration });
        }
        ens.weights[j] = w;
        if transport {
            let theta = ens.thetas.row_mut(j);
            for (t, g) in theta.iter_mut().zip(grads.row(j)) {
                *t += step * sign * g;
            }
            theta_manifold.retract(theta)?;
        }
    }
    Ok(values)
}

/// Divides the weights by `max(mean w, 1)`.
pub fn normalize_weights(ens: &mut FeatureEnsemble) {
    let mean = ens.mean_weight();
    if mean > 1.0 {
        ens.weights.iter_mut().for_each(|w| *w /= mean);
    }
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what, iteration: 0 })
    }
}

fn tag_iteration(e: Error, iteration: u64) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, iteration },
        other => other,
    }
}

/// Algorithm state plus the data it trains on.
#[derive(Debug, Clone)]
pub struct DualTrainer {
    pub cfg: DualConfig,
    pub data: DataSet,
    pub state: TrainerState,
}

impl DualTrainer {
    pub fn new(cfg: DualConfig, data: DataSet, state: TrainerState) -> Result<Self> {
        cfg.validate()?;
        if state.particles.dim() != data.dim() || state.ensemble.model.x_dim() != data.dim() {
            return Err(Error::Degenerate("particles, data and model disagree on dimension".into()));
        }
        Ok(DualTrainer { cfg, data, state })
    }

    pub fn manifold(&self) -> Manifold {
        self.state.ensemble.model.manifold
    }

    /// Restart, particle move, neuron move, weight projection.
    pub fn step(&mut self) -> Result<()> {
        let cfg = &self.cfg;
        let st = &mut self.state;
        let it = st.iteration;
        let (hx, htheta) = cfg.step_sizes();
        let p_r = cfg.restart_probability();
        restart_particles(&mut st.particles, &self.data, p_r, cfg.restart_mode, &mut st.rng);
        let seed: u64 = st.rng.random();
        particle_update(&st.ensemble, &mut st.particles, hx, cfg.inv_beta(), cfg.tangent_drift, seed)
            .map_err(|e| tag_iteration(e, it))?;
        feature_update(&mut st.ensemble, &st.particles, &self.data, htheta, cfg.transport_features, it)
            .map_err(|e| tag_iteration(e, it))?;
        if cfg.cap_total_variation {
            normalize_weights(&mut st.ensemble);
        }
        st.iteration += 1;
        Ok(())
    }

    /// Runs until `cfg.T` iterations, calling `observe` on the initial state
    /// and after every step.
    pub fn train<F: FnMut(&TrainerState) -> Result<()>>(&mut self, mut observe: F) -> Result<()> {
        observe(&self.state)?;
        while self.state.iteration < self.cfg.iterations {
            self.step()?;
            observe(&self.state)?;
        }
        Ok(())
    }
}

/// Free-function form of [`DualTrainer::train`].
pub fn train<F: FnMut(&TrainerState) -> Result<()>>(
    data: DataSet,
    cfg: DualConfig,
    state: TrainerState,
    observe: F,
) -> Result<TrainerState> {
    let mut t = DualTrainer::new(cfg, data, state)?;
    t.train(observe)?;
    Ok(t.state)
}
