//! Feature maps, shallow energies and the training fields that couple
//! particles and neurons.
//!
//! A student energy is the signed average
//! `f(x) = (1/m) Σ_j σ_j w_j φ(x, θ_j)`; the neuron field is the feature
//! response difference `F(θ) = mean_i φ(X_i, θ) - mean_i φ(x_i, θ)` between
//! generated particles and data.

use std::f64::consts::PI;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, norm, Manifold};
use crate::points::Points;

/// Scalar nonlinearity of a ridge feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum Activation {
    #[default]
    Relu,
    /// `log(1 + exp(k z)) / k`, a smooth ramp converging to ReLU as `k` grows.
    Softplus { sharpness: f64 },
}


impl Activation {
    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            Activation::Relu => z.max(0.0),
            Activation::Softplus { sharpness: k } => {
                let t = k * z;
                if t > 0.0 {
                    z + (-t).exp().ln_1p() / k
                } else {
                    t.exp().ln_1p() / k
                }
            }
        }
    }

    /// Value and first three derivatives. ReLU uses the zero subgradient at the kink.
    pub fn derivatives(&self, z: f64) -> [f64; 4] {
        match *self {
            Activation::Relu => {
                if z > 0.0 {
                    [z, 1.0, 0.0, 0.0]
                } else {
                    [0.0, 0.0, 0.0, 0.0]
                }
            }
            Activation::Softplus { sharpness: k } => {
                let s = logistic(k * z);
                let q = s * (1.0 - s);
                [self.eval(z), s, k * q, k * k * q * (1.0 - 2.0 * s)]
            }
        }
    }

    pub fn is_smooth(&self) -> bool {
        matches!(self, Activation::Softplus { .. })
    }
}

fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// `σ(<θ, x>)` on spheres, `σ(<(x, 1), θ>)` in Euclidean space; divided
    /// by `|θ|` when `normalized`.
    Ridge {
        #[serde(default)]
        activation: Activation,
        #[serde(default)]
        normalized: bool,
    },
    /// Periodic Gaussian bump on the torus,
    /// `1 + 2 Σ_{k=1..modes} exp(-width² k² / 2) cos(2πk(x - θ))`.
    PeriodicGaussian { width: f64, modes: usize },
}

impl FeatureMap {
    pub fn relu() -> Self {
        FeatureMap::Ridge { activation: Activation::Relu, normalized: false }
    }

    pub fn softplus(sharpness: f64) -> Self {
        FeatureMap::Ridge { activation: Activation::Softplus { sharpness }, normalized: false }
    }

    /// Periodic Gaussian truncated where the next mode weight drops below 1e-14.
    pub fn periodic_gaussian(width: f64) -> Self {
        FeatureMap::PeriodicGaussian { width, modes: periodic_modes(width) }
    }

    /// True when second x-derivatives exist classically.
    pub fn is_smooth(&self) -> bool {
        match self {
            FeatureMap::Ridge { activation, .. } => activation.is_smooth(),
            FeatureMap::PeriodicGaussian { .. } => true,
        }
    }
}

/// Smallest `K` with `exp(-width² K² / 2) < 1e-14`.
pub fn periodic_modes(width: f64) -> usize {
    let k = (2.0 * 1e14f64.ln()).sqrt() / width;
    let mut modes = k.ceil() as usize;
    while (-0.5 * width * width * (modes as f64).powi(2)).exp() >= 1e-14 {
        modes += 1;
    }
    modes
}

/// Feature map bound to the manifolds it acts on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub manifold: Manifold,
    pub map: FeatureMap,
}

struct Ridge<'a> {
    u: f64,
    /// ambient gradient of the pre-activation in x
    dx: &'a [f64],
    scale: f64,
}

impl FeatureModel {
    pub fn new(manifold: Manifold, map: FeatureMap) -> Result<Self> {
        let model = FeatureModel { manifold, map };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.manifold, self.map) {
            (Manifold::Torus, FeatureMap::PeriodicGaussian { width, modes }) => {
                if !(width > 0.0) || modes == 0 {
                    return Err(Error::InvalidConfig("periodic Gaussian needs width > 0 and modes > 0".into()));
                }
                Ok(())
            }
            (Manifold::Torus, FeatureMap::Ridge { .. }) => {
                Err(Error::InvalidConfig("ridge features are not defined on the torus".into()))
            }
            (_, FeatureMap::PeriodicGaussian { .. }) => {
                Err(Error::InvalidConfig("periodic Gaussian features need the torus".into()))
            }
            (Manifold::Sphere { ambient }, _) if ambient < 2 => {
                Err(Error::InvalidConfig("sphere needs ambient dimension >= 2".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn x_dim(&self) -> usize {
        self.manifold.ambient_dim()
    }

    pub fn theta_dim(&self) -> usize {
        match self.manifold {
            Manifold::Sphere { ambient } => ambient,
            Manifold::Torus => 1,
            Manifold::Euclidean { dim } => dim + 1,
        }
    }

    /// Parameter space: unit sphere except on the torus.
    pub fn theta_manifold(&self) -> Manifold {
        match self.manifold {
            Manifold::Torus => Manifold::Torus,
            _ => Manifold::Sphere { ambient: self.theta_dim() },
        }
    }

    fn ridge<'a>(&self, x: &[f64], theta: &'a [f64], normalized: bool) -> Ridge<'a> {
        let (u, dx) = match self.manifold {
            Manifold::Euclidean { dim } => (dot(x, &theta[..dim]) + theta[dim], &theta[..dim]),
            _ => (dot(x, theta), theta),
        };
        let scale = if normalized { 1.0 / norm(theta) } else { 1.0 };
        Ridge { u, dx, scale }
    }

    /// Adds `s * ∇_θ u` to `out`.
    fn add_pre_activation_theta_grad(&self, x: &[f64], s: f64, out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o += s * xi;
        }
        if let Manifold::Euclidean { dim } = self.manifold {
            out[dim] += s;
        }
    }

    pub fn phi(&self, x: &[f64], theta: &[f64]) -> f64 {
        match self.map {
            FeatureMap::Ridge { activation, normalized } => {
                let r = self.ridge(x, theta, normalized);
                r.scale * activation.eval(r.u)
            }
            FeatureMap::PeriodicGaussian { width, modes } => pg_derivs(x[0] - theta[0], width, modes)[0],
        }
    }

    /// Adds `s * ∇_x φ(x, θ)` (ambient gradient) to `out`.
    pub fn add_grad_x(&self, x: &[f64], theta: &[f64], s: f64, out: &mut [f64]) {
        match self.map {
            FeatureMap::Ridge { activation, normalized } => {
                let r = self.ridge(x, theta, normalized);
                let d1 = activation.derivatives(r.u)[1];
                if d1 != 0.0 {
                    let c = s * r.scale * d1;
                    for (o, t) in out.iter_mut().zip(r.dx) {
                        *o += c * t;
                    }
                }
            }
            FeatureMap::PeriodicGaussian { width, modes } => {
                out[0] += s * pg_derivs(x[0] - theta[0], width, modes)[1];
            }
        }
    }

    /// Adds `s * ∇_θ φ(x, θ)` to `out` and returns `φ(x, θ)`.
    pub fn phi_and_add_grad_theta(&self, x: &[f64], theta: &[f64], s: f64, out: &mut [f64]) -> f64 {
        match self.map {
            FeatureMap::Ridge { activation, normalized } => {
                let r = self.ridge(x, theta, normalized);
                let [v, d1, _, _] = activation.derivatives(r.u);
                if d1 != 0.0 {
                    self.add_pre_activation_theta_grad(x, s * r.scale * d1, out);
                }
                if normalized && v != 0.0 {
                    let c = s * v * r.scale.powi(3);
                    for (o, t) in out.iter_mut().zip(theta) {
                        *o -= c * t;
                    }
                }
                r.scale * v
            }
            FeatureMap::PeriodicGaussian { width, modes } => {
                let d = pg_derivs(x[0] - theta[0], width, modes);
                out[0] -= s * d[1];
                d[0]
            }
        }
    }

    /// Riemannian x-gradient (tangent part on the sphere).
    pub fn riemannian_grad_x(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        self.add_grad_x(x, theta, 1.0, out);
        self.manifold.to_tangent(x, out);
    }

    /// Riemannian gradient norm squared and Laplacian of the pre-activation,
    /// with their θ-gradients added by the callers below.
    fn ridge_second_order(&self, x: &[f64], theta: &[f64], r: &Ridge<'_>) -> (f64, f64) {
        match self.manifold {
            Manifold::Sphere { ambient } => {
                let d = (ambient - 1) as f64;
                (dot(theta, theta) - r.u * r.u, -d * r.u)
            }
            _ => (dot(r.dx, r.dx), {
                let _ = x;
                0.0
            }),
        }
    }

    /// `<∇_x φ(x, θ), g>` with the Riemannian gradient; `g` is tangent at `x`.
    pub fn grad_x_dot(&self, x: &[f64], theta: &[f64], g: &[f64]) -> f64 {
        match self.map {
            FeatureMap::Ridge { activation, normalized } => {
                let r = self.ridge(x, theta, normalized);
                let a = self.grad_u_dot(x, &r, g);
                r.scale * activation.derivatives(r.u)[1] * a
            }
            FeatureMap::PeriodicGaussian { width, modes } => pg_derivs(x[0] - theta[0], width, modes)[1] * g[0],
        }
    }

    fn grad_u_dot(&self, x: &[f64], r: &Ridge<'_>, g: &[f64]) -> f64 {
        match self.manifold {
            Manifold::Sphere { .. } => dot(r.dx, g) - r.u * dot(x, g),
            _ => dot(r.dx, g),
        }
    }

    /// Adds `s * ∇_θ <∇_x φ(x, θ), g>` to `out` (g held fixed).
    pub fn add_grad_theta_grad_x_dot(&self, x: &[f64], theta: &[f64], g: &[f64], s: f64, out: &mut [f64]) {
        match self.map {
            FeatureMap::Ridge { activation, normalized } => {
                let r = self.ridge(x, theta, normalized);
                let [_, d1, d2, _] = activation.derivatives(r.u);
                let a = self.grad_u_dot(x, &r, g);
                // c σ'' A ∇_θ u
                self.add_pre_activation_theta_grad(x, s * r.scale * d2 * a, out);
                // c σ' ∇_θ A
                let c1 = s * r.scale * d1;
                if c1 != 0.0 {
                    match self.manifold {
                        Manifold::Sphere { .. } => {
                            let xg = dot(x, g);
                            for ((o, gi), xi) in out.iter_mut().zip(g).zip(x) {
                                *o += c1 * (gi - xg * xi);
                            }
                        }
                        _ => {
                            for (o, gi) in out.iter_mut().zip(g) {
                                *o += c1 * gi;
                            }
                        }
                    }
                }
                if normalized {
                    let c = s * d1 * a * r.scale.powi(3);
                    for (o, t) in out.iter_mut().zip(theta) {
                        *o -= c * t;
                    }
                }
            }
            FeatureMap::PeriodicGaussian { width, modes } => {
                out[0] -= s * pg_derivs(x[0] - theta[0], width, modes)[2] * g[0];
            }
        }
    }

    /// Laplace–Beltrami operator in x of `φ(·, θ)`.
    pub fn laplacian_x(&self, x: &[f64], theta: &[f64]) -> f64 {
        match self.map {
            FeatureMap::Ridge { activation, normalized } => {
                let r = self.ridge(x, theta, normalized);
                let [_, d1, d2, _] = activation.derivatives(r.u);
                let (g2, lap_u) = self.ridge_second_order(x, theta, &r);
                r.scale * (d2 * g2 + d1 * lap_u)
            }
            FeatureMap::PeriodicGaussian { width, modes } => pg_derivs(x[0] - theta[0], width, modes)[2],
        }
    }

    /// Adds `s * ∇_θ Δ_x φ(x, θ)` to `out`.
    pub fn add_grad_theta_laplacian(&self, x: &[f64], theta: &[f64], s: f64, out: &mut [f64]) {
        match self.map {
            FeatureMap::Ridge { activation, normalized } => {
                let r = self.ridge(x, theta, normalized);
                let [_, d1, d2, d3] = activation.derivatives(r.u);
                let (g2, lap_u) = self.ridge_second_order(x, theta, &r);
                let c = s * r.scale;
                self.add_pre_activation_theta_grad(x, c * (d3 * g2 + d2 * lap_u), out);
                match self.manifold {
                    Manifold::Sphere { ambient } => {
                        let d = (ambient - 1) as f64;
                        for ((o, t), xi) in out.iter_mut().zip(theta).zip(x) {
                            *o += c * (d2 * (2.0 * t - 2.0 * r.u * xi) - d1 * d * xi);
                        }
                    }
                    Manifold::Euclidean { dim } => {
                        for (o, t) in out[..dim].iter_mut().zip(&theta[..dim]) {
                            *o += c * d2 * 2.0 * t;
                        }
                    }
                    Manifold::Torus => unreachable!("validated"),
                }
                if normalized {
                    let v = d2 * g2 + d1 * lap_u;
                    let c = s * v * r.scale.powi(3);
                    for (o, t) in out.iter_mut().zip(theta) {
                        *o -= c * t;
                    }
                }
            }
            FeatureMap::PeriodicGaussian { width, modes } => {
                out[0] -= s * pg_derivs(x[0] - theta[0], width, modes)[3];
            }
        }
    }
}

/// Periodic Gaussian and its first three derivatives in `r = x - θ`.
pub(crate) fn pg_derivs(r: f64, width: f64, modes: usize) -> [f64; 4] {
    let (s1, c1) = (2.0 * PI * r).sin_cos();
    let (mut s, mut c) = (0.0f64, 1.0f64);
    let mut out = [1.0, 0.0, 0.0, 0.0];
    for k in 1..=modes {
        // rotate (cos, sin) by 2πr
        let (cn, sn) = (c * c1 - s * s1, s * c1 + c * s1);
        c = cn;
        s = sn;
        let kf = k as f64;
        let a = 2.0 * (-0.5 * width * width * kf * kf).exp();
        let w = 2.0 * PI * kf;
        out[0] += a * c;
        out[1] -= a * w * s;
        out[2] -= a * w * w * c;
        out[3] += a * w * w * w * s;
    }
    out
}

/// Anything with a value and an ambient gradient on the sample space.
pub trait Energy: Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64], out: &mut [f64]);
}

impl<E: Energy + ?Sized> Energy for &E {
    fn value(&self, x: &[f64]) -> f64 {
        (**self).value(x)
    }
    fn grad(&self, x: &[f64], out: &mut [f64]) {
        (**self).grad(x, out)
    }
}

/// `factor * inner`.
pub struct Scaled<E>(pub f64, pub E);

impl<E: Energy> Energy for Scaled<E> {
    fn value(&self, x: &[f64]) -> f64 {
        self.0 * self.1.value(x)
    }
    fn grad(&self, x: &[f64], out: &mut [f64]) {
        self.1.grad(x, out);
        out.iter_mut().for_each(|o| *o *= self.0);
    }
}

/// Energy given by closures; handy for tests and custom targets.
pub struct FnEnergy<V, G>(pub V, pub G);

impl<V, G> Energy for FnEnergy<V, G>
where
    V: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64], &mut [f64]) + Sync,
{
    fn value(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
    fn grad(&self, x: &[f64], out: &mut [f64]) {
        (self.1)(x, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// i.i.d. uniform on `[0, 1)`.
    #[default]
    Uniform,
    Ones,
}

/// Empirical signed measure `(1/m) Σ σ_j w_j δ_{θ_j}` over neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEnsemble {
    pub model: FeatureModel,
    pub thetas: Points,
    pub weights: Vec<f64>,
    pub signs: Vec<i8>,
}

impl FeatureEnsemble {
    pub fn new(model: FeatureModel, thetas: Points, weights: Vec<f64>, signs: Vec<i8>) -> Result<Self> {
        model.validate()?;
        if thetas.dim() != model.theta_dim() || thetas.len() != weights.len() || weights.len() != signs.len() {
            return Err(Error::Degenerate("ensemble arrays have inconsistent shapes".into()));
        }
        if thetas.is_empty() {
            return Err(Error::Degenerate("ensemble needs at least one neuron".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Degenerate("weights must be nonnegative".into()));
        }
        if signs.iter().any(|s| *s != 1 && *s != -1) {
            return Err(Error::Degenerate("signs must be ±1".into()));
        }
        Ok(FeatureEnsemble { model, thetas, weights, signs })
    }

    /// Features uniform on Θ, signs uniform on {±1}.
    pub fn random<R: Rng + ?Sized>(model: FeatureModel, m: usize, init: WeightInit, rng: &mut R) -> Result<Self> {
        let tm = model.theta_manifold();
        let mut thetas = Points::zeros(m, model.theta_dim());
        for row in thetas.rows_mut() {
            tm.sample_base(rng, row);
        }
        let weights = (0..m)
            .map(|_| match init {
                WeightInit::Uniform => rng.random::<f64>(),
                WeightInit::Ones => 1.0,
            })
            .collect();
        let signs = (0..m).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        FeatureEnsemble::new(model, thetas, weights, signs)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sign(&self, j: usize) -> f64 {
        self.signs[j] as f64
    }

    /// `σ_j w_j / m`.
    pub fn coefficient(&self, j: usize) -> f64 {
        self.sign(j) * self.weights[j] / self.len() as f64
    }

    /// `(1/m) Σ w_j`, the total variation of the signed measure.
    pub fn mean_weight(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.len() as f64
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        (0..self.len()).map(|j| self.coefficient(j) * self.model.phi(x, self.thetas.row(j))).sum()
    }

    /// Ambient x-gradient of the energy.
    pub fn grad_energy_x(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for j in 0..self.len() {
            let c = self.coefficient(j);
            if c != 0.0 {
                self.model.add_grad_x(x, self.thetas.row(j), c, out);
            }
        }
    }

    /// Tangent-projected x-gradient (same as ambient off the sphere).
    pub fn riemannian_grad_energy_x(&self, x: &[f64], out: &mut [f64]) {
        self.grad_energy_x(x, out);
        self.model.manifold.to_tangent(x, out);
    }

    /// Ambient energy gradients at every point, in point order.
    pub fn grad_energy_points(&self, points: &Points) -> Points {
        let dim = points.dim();
        let coords = match self.model.map {
            FeatureMap::PeriodicGaussian { width, modes } => {
                let spectrum = pg_spectrum(self, width, modes);
                points.as_slice().par_iter().map(|&x| spectrum.derivative(x)).collect()
            }
            FeatureMap::Ridge { .. } => {
                let mut out = vec![0.0; points.as_slice().len()];
                out.par_chunks_mut(dim).zip(points.as_slice().par_chunks(dim)).for_each(|(o, x)| {
                    self.grad_energy_x(x, o);
                });
                out
            }
        };
        Points::new(dim, coords).expect("same shape as input")
    }
}

impl Energy for FeatureEnsemble {
    fn value(&self, x: &[f64]) -> f64 {
        self.energy(x)
    }
    fn grad(&self, x: &[f64], out: &mut [f64]) {
        self.grad_energy_x(x, out)
    }
}

/// Trigonometric coefficients of a torus energy built from periodic Gaussians.
struct TorusSpectrum {
    /// `(2 a_k Re T_k, 2 a_k Im T_k)` for k = 1..K, with `T_k = Σ c_j e^{-2πikθ_j}`
    coeffs: Vec<(f64, f64)>,
}

impl TorusSpectrum {
    fn derivative(&self, x: f64) -> f64 {
        let (s1, c1) = (2.0 * PI * x).sin_cos();
        let (mut s, mut c) = (0.0f64, 1.0f64);
        let mut acc = 0.0;
        for (k, &(re, im)) in self.coeffs.iter().enumerate() {
            let (cn, sn) = (c * c1 - s * s1, s * c1 + c * s1);
            c = cn;
            s = sn;
            // d/dx Re(e^{2πikx} T_k) = -2πk Im(e^{2πikx} T_k)
            let w = 2.0 * PI * (k + 1) as f64;
            acc -= w * (s * re + c * im);
        }
        acc
    }
}

fn pg_spectrum(ens: &FeatureEnsemble, width: f64, modes: usize) -> TorusSpectrum {
    let mut coeffs = vec![(0.0, 0.0); modes];
    for j in 0..ens.len() {
        let c = ens.coefficient(j);
        if c == 0.0 {
            continue;
        }
        let (s1, c1) = (-2.0 * PI * ens.thetas.row(j)[0]).sin_cos();
        let (mut s, mut co) = (0.0f64, 1.0f64);
        for acc in coeffs.iter_mut() {
            let (cn, sn) = (co * c1 - s * s1, s * c1 + co * s1);
            co = cn;
            s = sn;
            acc.0 += c * co;
            acc.1 += c * s;
        }
    }
    for (k, acc) in coeffs.iter_mut().enumerate() {
        let kf = (k + 1) as f64;
        let a = 2.0 * (-0.5 * width * width * kf * kf).exp();
        acc.0 *= a;
        acc.1 *= a;
    }
    TorusSpectrum { coeffs }
}

/// Planted energy `f*(x) = (1/J) Σ w*_j σ(<θ*_j, x>)` on a sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherModel {
    pub thetas: Points,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub activation: Activation,
}

impl TeacherModel {
    pub fn new(thetas: Points, weights: Vec<f64>, activation: Activation) -> Result<Self> {
        if thetas.len() != weights.len() || thetas.is_empty() {
            return Err(Error::Degenerate("teacher needs one weight per neuron".into()));
        }
        if thetas.rows().any(|t| (norm(t) - 1.0).abs() > 1e-10) {
            return Err(Error::Degenerate("teacher neurons must be unit vectors".into()));
        }
        Ok(TeacherModel { thetas, weights, activation })
    }

    /// Two neurons in the `(e1, e2)` plane separated by `angle` radians,
    /// both with output weight `weight`, on `S^d`.
    pub fn two_neurons(intrinsic_dim: usize, angle: f64, weight: f64, activation: Activation) -> Result<Self> {
        let ambient = intrinsic_dim + 1;
        if ambient < 2 {
            return Err(Error::InvalidConfig("teacher needs d >= 1".into()));
        }
        let mut a = vec![0.0; ambient];
        a[0] = 1.0;
        let mut b = vec![0.0; ambient];
        b[0] = angle.cos();
        b[1] = angle.sin();
        TeacherModel::new(Points::from_rows(&[a, b])?, vec![weight, weight], activation)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.thetas.dim()
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        let j = self.len() as f64;
        self.thetas.rows().zip(&self.weights).map(|(t, w)| w * self.activation.eval(dot(t, x))).sum::<f64>() / j
    }

    pub fn grad_energy(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let j = self.len() as f64;
        for (t, w) in self.thetas.rows().zip(&self.weights) {
            let d1 = self.activation.derivatives(dot(t, x))[1];
            for (o, ti) in out.iter_mut().zip(t) {
                *o += w * d1 * ti / j;
            }
        }
    }
}

impl Energy for TeacherModel {
    fn value(&self, x: &[f64]) -> f64 {
        self.energy(x)
    }
    fn grad(&self, x: &[f64], out: &mut [f64]) {
        self.grad_energy(x, out)
    }
}

/// Generated samples `X_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet(pub Points);

/// Training samples `x_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSet(Points);

impl DataSet {
    pub fn new(points: Points) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Degenerate("data set is empty".into()));
        }
        Ok(DataSet(points))
    }

    pub fn points(&self) -> &Points {
        &self.0
    }

    pub fn into_points(self) -> Points {
        self.0
    }
}

impl Deref for DataSet {
    type Target = Points;
    fn deref(&self) -> &Points {
        &self.0
    }
}

impl Deref for ParticleSet {
    type Target = Points;
    fn deref(&self) -> &Points {
        &self.0
    }
}

impl DerefMut for ParticleSet {
    fn deref_mut(&mut self) -> &mut Points {
        &mut self.0
    }
}

/// Neuron field `F(θ) = mean_i φ(X_i, θ) - mean_i φ(x_i, θ)`.
pub fn field_f(model: &FeatureModel, particles: &Points, data: &Points, theta: &[f64]) -> f64 {
    let mut scratch = vec![0.0; theta.len()];
    field_f_and_grad(model, particles, data, theta, &mut scratch)
}

/// θ-gradient of [`field_f`].
pub fn field_grad_f(model: &FeatureModel, particles: &Points, data: &Points, theta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; theta.len()];
    field_f_and_grad(model, particles, data, theta, &mut out);
    out
}

fn field_f_and_grad(model: &FeatureModel, particles: &Points, data: &Points, theta: &[f64], grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let a = 1.0 / particles.len() as f64;
    let b = 1.0 / data.len() as f64;
    let mut pos = 0.0;
    for x in particles.rows() {
        pos += model.phi_and_add_grad_theta(x, theta, a, grad);
    }
    let mut neg = 0.0;
    for x in data.rows() {
        neg += model.phi_and_add_grad_theta(x, theta, -b, grad);
    }
    a * pos - b * neg
}

/// Field values and θ-gradients at every neuron of the ensemble.
pub fn fields_at_neurons(ens: &FeatureEnsemble, particles: &Points, data: &Points) -> (Vec<f64>, Points) {
    let model = &ens.model;
    let dim = model.theta_dim();
    let m = ens.len();
    match model.map {
        FeatureMap::PeriodicGaussian { width, modes } => {
            let diff: Vec<(f64, f64)> = torus_moments(particles, modes)
                .into_iter()
                .zip(torus_moments(data, modes))
                .map(|(p, d)| (p.0 - d.0, p.1 - d.1))
                .collect();
            let mut values = vec![0.0; m];
            let mut grads = vec![0.0; m];
            values.par_iter_mut().zip(grads.par_iter_mut()).enumerate().for_each(|(j, (v, g))| {
                let theta = ens.thetas.row(j)[0];
                let (s1, c1) = (-2.0 * PI * theta).sin_cos();
                let (mut s, mut c) = (0.0f64, 1.0f64);
                for (k, &(re, im)) in diff.iter().enumerate() {
                    let (cn, sn) = (c * c1 - s * s1, s * c1 + c * s1);
                    c = cn;
                    s = sn;
                    let kf = (k + 1) as f64;
                    let a = 2.0 * (-0.5 * width * width * kf * kf).exp();
                    // Re(e^{-2πikθ} D_k) and its θ-derivative 2πk Im(e^{-2πikθ} D_k)
                    *v += a * (c * re - s * im);
                    *g += a * 2.0 * PI * kf * (c * im + s * re);
                }
            });
            (values, Points::new(1, grads).expect("one column"))
        }
        FeatureMap::Ridge { .. } => {
            let mut values = vec![0.0; m];
            let mut grads = vec![0.0; m * dim];
            values.par_iter_mut().zip(grads.par_chunks_mut(dim)).enumerate().for_each(|(j, (v, g))| {
                *v = field_f_and_grad(model, particles, data, ens.thetas.row(j), g);
            });
            (values, Points::new(dim, grads).expect("shape"))
        }
    }
}

/// `(1/|P|) Σ e^{2πikp}` for k = 1..K.
fn torus_moments(points: &Points, modes: usize) -> Vec<(f64, f64)> {
    let n = points.len() as f64;
    let partial: Vec<Vec<(f64, f64)>> = points
        .as_slice()
        .par_chunks(4096)
        .map(|chunk| {
            let mut acc = vec![(0.0, 0.0); modes];
            for &p in chunk {
                let (s1, c1) = (2.0 * PI * p).sin_cos();
                let (mut s, mut c) = (0.0f64, 1.0f64);
                for a in acc.iter_mut() {
                    let (cn, sn) = (c * c1 - s * s1, s * c1 + c * s1);
                    c = cn;
                    s = sn;
                    a.0 += c;
                    a.1 += s;
                }
            }
            acc
        })
        .collect();
    let mut total = vec![(0.0, 0.0); modes];
    for acc in partial {
        for (t, a) in total.iter_mut().zip(acc) {
            t.0 += a.0;
            t.1 += a.1;
        }
    }
    total.into_iter().map(|(c, s)| (c / n, s / n)).collect()
}

/// TV-cap multiplier `1{Σ w ≥ m} (1/m) Σ σ_j w_j F(θ_j)`.
pub fn field_k(ens: &FeatureEnsemble, field_values: &[f64]) -> f64 {
    let m = ens.len() as f64;
    if ens.weights.iter().sum::<f64>() < m {
        return 0.0;
    }
    (0..ens.len()).map(|j| ens.coefficient(j) * field_values[j]).sum()
}
