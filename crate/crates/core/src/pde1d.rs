//! Gridded mean-field dynamics on the unit torus.
//!
//! The neuron density `γ⁻` only reweights (`∂_t γ⁻ = -α γ⁻ F`), and the
//! particle density solves the Fokker–Planck equation
//! `∂_t ν = ∂_x(ν ∂_x f) + β⁻¹ ∂_xx ν - α′(ν - ν_p)` with `f = -φ * γ⁻` and
//! `F = φ * (ν - ν_p)`. Convolutions, derivatives and the heat semigroup are
//! handled in Fourier space.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::quadrature_kl;
use crate::model::{periodic_modes, pg_derivs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeConfig {
    #[serde(default = "d_grid")]
    pub grid: usize,
    /// Mode cutoff of φ; derived from `delta` when absent.
    #[serde(default)]
    pub modes: Option<usize>,
    #[serde(default = "d_delta")]
    pub delta: f64,
    /// Base time step; the run uses `dt / max(α, 1)`.
    #[serde(default = "d_dt")]
    pub dt: f64,
    pub alpha: f64,
    #[serde(default)]
    pub alpha_prime: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_p")]
    pub p: f64,
    #[serde(default = "d_a")]
    pub a1: f64,
    #[serde(default = "d_a")]
    pub a2: f64,
    #[serde(default = "d_t1")]
    pub theta1: f64,
    #[serde(default = "d_t2")]
    pub theta2: f64,
    /// Total physical time.
    #[serde(rename = "T")]
    pub total_time: f64,
    #[serde(default = "d_gamma0")]
    pub gamma0: f64,
}

fn d_grid() -> usize {
    256
}
fn d_delta() -> f64 {
    0.2
}
fn d_dt() -> f64 {
    1e-3
}
fn d_beta() -> f64 {
    1.0
}
fn d_p() -> f64 {
    0.6
}
fn d_a() -> f64 {
    8.0
}
fn d_t1() -> f64 {
    0.25
}
fn d_t2() -> f64 {
    0.75
}
fn d_gamma0() -> f64 {
    1e-3
}

impl PdeConfig {
    pub fn new(alpha: f64, total_time: f64) -> Self {
        PdeConfig {
            grid: d_grid(),
            modes: None,
            delta: d_delta(),
            dt: d_dt(),
            alpha,
            alpha_prime: 0.0,
            beta: d_beta(),
            p: d_p(),
            a1: d_a(),
            a2: d_a(),
            theta1: d_t1(),
            theta2: d_t2(),
            total_time,
            gamma0: d_gamma0(),
        }
    }

    pub fn modes(&self) -> usize {
        self.modes.unwrap_or_else(|| periodic_modes(self.delta))
    }

    /// Step actually taken, `dt / max(α, 1)`.
    pub fn step(&self) -> f64 {
        self.dt / self.alpha.max(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !self.grid.is_power_of_two() || self.grid < 4 {
            return bad(format!("grid must be a power of two >= 4, got {}", self.grid));
        }
        if self.grid < 2 * self.modes() + 2 {
            return bad(format!("grid {} aliases {} feature modes", self.grid, self.modes()));
        }
        if !(self.delta > 0.0) || !(self.dt > 0.0) || !(self.beta > 0.0) || !(self.alpha > 0.0) {
            return bad("delta, dt, beta and alpha must be positive".into());
        }
        if !(self.alpha_prime >= 0.0) || !(self.total_time >= 0.0) || !(self.gamma0 >= 0.0) {
            return bad("alpha_prime, T and gamma0 must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("p must lie in [0, 1], got {}", self.p));
        }
        Ok(())
    }

    /// Target neuron density `g(θ)`.
    pub fn g(&self, theta: f64) -> f64 {
        let bump = |a: f64, c: f64| (a * (2.0 * PI * (theta - c)).cos() - a).exp();
        -(self.p * bump(self.a1, self.theta1) + (1.0 - self.p) * bump(self.a2, self.theta2)).ln()
    }
}

/// `1 + 2 Σ_{k=1..K} exp(-δ²k²/2) cos(2πk(x - θ))`.
pub fn phi_torus(x: f64, theta: f64, delta: f64, modes: usize) -> f64 {
    pg_derivs(x - theta, delta, modes)[0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusFields {
    pub gamma_minus: Vec<f64>,
    pub nu: Vec<f64>,
    pub nu_p: Vec<f64>,
    pub e_p: Vec<f64>,
}

/// One logged point of a PDE run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeRecord {
    pub step: u64,
    pub time: f64,
    pub rescaled_time: f64,
    pub kl_ebm: f64,
    pub kl_nu: f64,
    pub sm: f64,
    pub gamma_mass: f64,
}

pub const PDE_HEADER: [&str; 7] = ["iter", "time", "rescaled_time", "kl_ebm", "kl_nu", "sm", "tv_norm"];

pub struct Spectral {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Spectral {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Spectral { n, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) }
    }

    /// Signed wavenumber of FFT bin `i`; the Nyquist bin maps to `n/2`.
    pub fn wavenumber(&self, i: usize) -> i64 {
        if i <= self.n / 2 {
            i as i64
        } else {
            i as i64 - self.n as i64
        }
    }

    /// Fourier coefficients `(1/n) Σ v_j e^{-2πikj/n}`.
    pub fn forward(&self, v: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.fwd.process(&mut buf);
        let s = 1.0 / self.n as f64;
        buf.iter_mut().for_each(|c| *c *= s);
        buf
    }

    pub fn inverse(&self, mut c: Vec<Complex<f64>>) -> Vec<f64> {
        self.inv.process(&mut c);
        c.iter().map(|z| z.re).collect()
    }

    pub fn derivative_hat(&self, c: &mut [Complex<f64>]) {
        for (i, z) in c.iter_mut().enumerate() {
            let k = self.wavenumber(i);
            *z = if 2 * k.unsigned_abs() as usize == self.n { Complex::new(0.0, 0.0) } else { *z * Complex::new(0.0, 2.0 * PI * k as f64) };
        }
    }

    pub fn derivative(&self, v: &[f64]) -> Vec<f64> {
        let mut c = self.forward(v);
        self.derivative_hat(&mut c);
        self.inverse(c)
    }
}

/// Pseudo-spectral integrator for the coupled torus dynamics.
pub struct TorusSolver {
    pub cfg: PdeConfig,
    pub fields: TorusFields,
    pub steps: u64,
    pub time: f64,
    spectral: Spectral,
    phi_hat: Vec<f64>,
}

impl TorusSolver {
    pub fn new(cfg: PdeConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.grid;
        let spectral = Spectral::new(n);
        let modes = cfg.modes() as i64;
        let phi_hat = (0..n)
            .map(|i| {
                let k = spectral.wavenumber(i);
                if k.abs() <= modes {
                    (-0.5 * cfg.delta * cfg.delta * (k * k) as f64).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let mut s = TorusSolver {
            fields: TorusFields { gamma_minus: vec![], nu: vec![], nu_p: vec![], e_p: vec![] },
            cfg,
            steps: 0,
            time: 0.0,
            spectral,
            phi_hat,
        };
        s.fields = s.build_target();
        Ok(s)
    }

    pub fn grid_points(&self) -> Vec<f64> {
        (0..self.cfg.grid).map(|i| i as f64 / self.cfg.grid as f64).collect()
    }

    /// `∫ φ(x - θ) h(θ) dθ` on the grid.
    pub fn convolve_phi(&self, h: &[f64]) -> Vec<f64> {
        let mut c = self.spectral.forward(h);
        c.iter_mut().zip(&self.phi_hat).for_each(|(z, p)| *z *= p);
        self.spectral.inverse(c)
    }

    /// `ν_p ∝ exp(-β E_p)`, `E_p = φ * g`, with `ν_0 = ν_p` and `γ⁻_0 = gamma0`.
    pub fn build_target(&self) -> TorusFields {
        let g: Vec<f64> = self.grid_points().iter().map(|&t| self.cfg.g(t)).collect();
        let e_p = self.convolve_phi(&g);
        let nu_p = gibbs(&e_p, self.cfg.beta);
        TorusFields { gamma_minus: vec![self.cfg.gamma0; self.cfg.grid], nu: nu_p.clone(), nu_p, e_p }
    }

    /// `F = φ * (ν - ν_p)`.
    pub fn field_f(&self) -> Vec<f64> {
        let d: Vec<f64> = self.fields.nu.iter().zip(&self.fields.nu_p).map(|(a, b)| a - b).collect();
        self.convolve_phi(&d)
    }

    /// `f = -φ * γ⁻`.
    pub fn energy(&self) -> Vec<f64> {
        self.convolve_phi(&self.fields.gamma_minus).into_iter().map(|v| -v).collect()
    }

    /// `γ⁻ <- γ⁻ exp(-α F dt)`.
    pub fn gamma_step(&mut self, field: &[f64], dt: f64) -> Result<()> {
        let a = self.cfg.alpha;
        for (g, f) in self.fields.gamma_minus.iter_mut().zip(field) {
            *g *= (-a * f * dt).exp();
            if !g.is_finite() {
                return Err(Error::WeightOverflow { iteration: self.steps });
            }
        }
        Ok(())
    }

    /// Transport term `∂_x(ν ∂_x f)` in Fourier space, 2/3 de-aliased.
    fn transport_hat(&self, nu_hat: &[Complex<f64>], df: &[f64]) -> Vec<Complex<f64>> {
        let nu = self.spectral.inverse(nu_hat.to_vec());
        let flux: Vec<f64> = nu.iter().zip(df).map(|(a, b)| a * b).collect();
        let mut c = self.spectral.forward(&flux);
        let cut = self.cfg.grid as i64 / 3;
        for (i, z) in c.iter_mut().enumerate() {
            if self.spectral.wavenumber(i).abs() > cut {
                *z = Complex::new(0.0, 0.0);
            }
        }
        self.spectral.derivative_hat(&mut c);
        c
    }

    /// One exponential-integrator step of the particle density under a frozen energy.
    pub fn nu_step(&mut self, energy: &[f64], dt: f64) -> Result<()> {
        let inv_beta = 1.0 / self.cfg.beta;
        let df = self.spectral.derivative(energy);
        let nu_hat = self.spectral.forward(&self.fields.nu);
        let lin: Vec<f64> = (0..self.cfg.grid)
            .map(|i| {
                let k = 2.0 * PI * self.spectral.wavenumber(i) as f64;
                -inv_beta * k * k * dt
            })
            .collect();
        let n0 = self.transport_hat(&nu_hat, &df);
        let a: Vec<Complex<f64>> = (0..self.cfg.grid)
            .map(|i| nu_hat[i] * lin[i].exp() + n0[i] * (phi1(lin[i]) * dt))
            .collect();
        let na = self.transport_hat(&a, &df);
        let next: Vec<Complex<f64>> = (0..self.cfg.grid).map(|i| a[i] + (na[i] - n0[i]) * (phi2(lin[i]) * dt)).collect();
        let mut nu = self.spectral.inverse(next);
        let keep = (-self.cfg.alpha_prime * dt).exp();
        for (v, p) in nu.iter_mut().zip(&self.fields.nu_p) {
            *v = keep * *v + (1.0 - keep) * p;
        }
        let min = nu.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min >= -1e-8) {
            return Err(Error::NegativeMass { min, step: self.steps });
        }
        nu.iter_mut().for_each(|v| *v = v.max(0.0));
        let mass = nu.iter().sum::<f64>() / self.cfg.grid as f64;
        nu.iter_mut().for_each(|v| *v /= mass);
        self.fields.nu = nu;
        Ok(())
    }

    /// Strang splitting: half reweighting, full transport–diffusion, half reweighting.
    pub fn step(&mut self) -> Result<()> {
        let dt = self.cfg.step();
        let f = self.field_f();
        self.gamma_step(&f, 0.5 * dt)?;
        let e = self.energy();
        self.nu_step(&e, dt)?;
        let f = self.field_f();
        self.gamma_step(&f, 0.5 * dt)?;
        self.steps += 1;
        self.time = self.steps as f64 * dt;
        Ok(())
    }

    pub fn record(&self) -> Result<PdeRecord> {
        let h = 1.0 / self.cfg.grid as f64;
        let f = self.energy();
        let ebm = gibbs(&f, self.cfg.beta);
        let kl_ebm = quadrature_kl(&self.fields.nu_p, &ebm, h)?;
        let kl_nu = quadrature_kl(&self.fields.nu_p, &self.fields.nu, h)?;
        let diff: Vec<f64> = f.iter().zip(&self.fields.e_p).map(|(a, b)| self.cfg.beta * (a - b)).collect();
        let d = self.spectral.derivative(&diff);
        let sm = d.iter().zip(&self.fields.nu_p).map(|(v, p)| v * v * p).sum::<f64>() * h;
        Ok(PdeRecord {
            step: self.steps,
            time: self.time,
            rescaled_time: self.time * self.cfg.alpha.max(1.0),
            kl_ebm,
            kl_nu,
            sm,
            gamma_mass: self.fields.gamma_minus.iter().sum::<f64>() * h,
        })
    }

    pub fn total_steps(&self) -> u64 {
        (self.cfg.total_time / self.cfg.step()).round() as u64
    }
}

/// Normalized `exp(-β e)` on a uniform grid of `[0, 1)`.
pub fn gibbs(e: &[f64], beta: f64) -> Vec<f64> {
    let lo = e.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut v: Vec<f64> = e.iter().map(|x| (-beta * (x - lo)).exp()).collect();
    let mass = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x /= mass);
    v
}

fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

fn phi2(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 6.0 + z * z / 24.0 + z * z * z / 120.0
    } else {
        (z.exp_m1() - z) / (z * z)
    }
}

/// Runs to `cfg.T`, logging every `log_every` steps and at the end.
pub fn pde_run<F: FnMut(&PdeRecord, &TorusSolver) -> Result<()>>(cfg: PdeConfig, log_every: u64, mut observe: F) -> Result<Vec<PdeRecord>> {
    let mut s = TorusSolver::new(cfg)?;
    let total = s.total_steps();
    let every = log_every.max(1);
    let mut out = Vec::new();
    let r = s.record()?;
    observe(&r, &s)?;
    out.push(r);
    while s.steps < total {
        s.step()?;
        if s.steps % every == 0 || s.steps == total {
            let r = s.record()?;
            observe(&r, &s)?;
            out.push(r);
        }
    }
    Ok(out)
}
