//! Slow reference implementations for tests: naive loops, central
//! differences and dense quadrature on low-dimensional spheres.

use std::f64::consts::PI;
use std::fmt;

use crate::geometry::Manifold;
use crate::mmd::Kernel;
use crate::model::{FeatureEnsemble, FeatureModel};
use crate::points::Points;

/// Outcome of comparing a value against its oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub quantity: String,
    pub value: f64,
    pub oracle: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Passes when `|value - oracle| <= tolerance * max(1, |oracle|)`.
    pub fn compare(quantity: impl Into<String>, value: f64, oracle: f64, tolerance: f64) -> Self {
        let abs_err = (value - oracle).abs();
        let rel_err = abs_err / oracle.abs().max(f64::MIN_POSITIVE);
        let pass = abs_err <= tolerance * oracle.abs().max(1.0);
        OracleReport { quantity: quantity.into(), value, oracle, abs_err, rel_err, tolerance, pass }
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "quantity={} value={:.17e} oracle={:.17e} abs_err={:.3e} rel_err={:.3e} tol={:.1e} pass={}",
            self.quantity, self.value, self.oracle, self.abs_err, self.rel_err, self.tolerance, self.pass
        )
    }
}

/// Central differences, one coordinate at a time.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Directional central difference `(f(x + h v) - f(x - h v)) / 2h`.
pub fn fd_directional<F: Fn(f64) -> f64>(f: F, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Feature field by a data-first double loop.
#[allow(non_snake_case)]
pub fn brute_force_F(model: &FeatureModel, particles: &Points, data: &Points, theta: &[f64]) -> f64 {
    let mut neg = 0.0;
    for i in (0..data.len()).rev() {
        neg += model.phi(data.row(i), theta);
    }
    let mut pos = 0.0;
    for i in (0..particles.len()).rev() {
        pos += model.phi(particles.row(i), theta);
    }
    pos / particles.len() as f64 - neg / data.len() as f64
}

/// `(1/G) Σ_j φ(x_i - θ_j) h_j` by direct summation of the truncated series.
pub fn brute_force_torus_convolution(h: &[f64], delta: f64, modes: usize) -> Vec<f64> {
    let g = h.len();
    (0..g)
        .map(|i| {
            let x = i as f64 / g as f64;
            let mut acc = 0.0;
            for (j, hj) in h.iter().enumerate() {
                let r = x - j as f64 / g as f64;
                let mut phi = 1.0;
                for k in 1..=modes {
                    let kf = k as f64;
                    phi += 2.0 * (-0.5 * delta * delta * kf * kf).exp() * (2.0 * PI * kf * r).cos();
                }
                acc += phi * hj;
            }
            acc / g as f64
        })
        .collect()
}

/// Squared MMD by three separate double loops.
pub fn brute_force_mmd2(particles: &Points, data: &Points, kernel: &Kernel) -> f64 {
    let gram = |a: &Points, b: &Points| {
        let mut total = 0.0;
        for j in 0..b.len() {
            for i in 0..a.len() {
                total += kernel.eval(a.row(i), b.row(j));
            }
        }
        total / (a.len() * b.len()) as f64
    };
    gram(particles, particles) + gram(data, data) - 2.0 * gram(data, particles)
}

/// `cᵀ K c` for the signed measure `(1/N) Σ δ_{X_i} - (1/n) Σ δ_{x_i}`, from an explicit Gram matrix.
pub fn signed_gram_quadratic_form(particles: &Points, data: &Points, kernel: &Kernel) -> f64 {
    let pts: Vec<&[f64]> = particles.rows().chain(data.rows()).collect();
    let c: Vec<f64> = (0..pts.len())
        .map(|i| if i < particles.len() { 1.0 / particles.len() as f64 } else { -1.0 / data.len() as f64 })
        .collect();
    let mut total = 0.0;
    for i in 0..pts.len() {
        let mut row = 0.0;
        for j in 0..pts.len() {
            row += kernel.eval(pts[i], pts[j]) * c[j];
        }
        total += c[i] * row;
    }
    total
}

/// Smallest shift `ε` tried in `{0, 1e-12, ..., 1e-8}` for which `K + ε I` has a
/// Cholesky factorization; `None` if even `1e-8` fails.
pub fn psd_shift(gram: &[Vec<f64>]) -> Option<f64> {
    [0.0, 1e-12, 1e-10, 1e-8].into_iter().find(|&eps| cholesky_ok(gram, eps))
}

fn cholesky_ok(a: &[Vec<f64>], eps: f64) -> bool {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j] + if i == j { eps } else { 0.0 };
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return false;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    true
}

/// Score-matching loss by a data, neuron, neuron triple loop.
pub fn brute_force_sm_loss(ens: &FeatureEnsemble, data: &Points, beta: f64) -> f64 {
    let inv_beta = 1.0 / beta;
    let m = ens.len();
    let dim = data.dim();
    let mut total = 0.0;
    let mut gj = vec![0.0; dim];
    let mut gk = vec![0.0; dim];
    for x in data.rows() {
        let mut quad = 0.0;
        let mut lap = 0.0;
        for j in 0..m {
            let tj = ens.thetas.row(j);
            ens.model.riemannian_grad_x(x, tj, &mut gj);
            for k in 0..m {
                ens.model.riemannian_grad_x(x, ens.thetas.row(k), &mut gk);
                let ip: f64 = gj.iter().zip(&gk).map(|(a, b)| a * b).sum();
                quad += ens.coefficient(j) * ens.coefficient(k) * ip;
            }
            if inv_beta > 0.0 {
                lap += ens.coefficient(j) * ens.model.laplacian_x(x, tj);
            }
        }
        total += 0.5 * quad - inv_beta * lap;
    }
    total / data.len() as f64
}

/// Midpoint grid on `S^d` for `d ∈ {1, 2}` with normalized weights.
///
/// On `S^2` the grid is uniform in height and azimuth (Archimedes), so all
/// cells carry equal area.
pub fn sphere_grid(intrinsic_dim: usize, resolution: usize) -> Vec<[f64; 3]> {
    match intrinsic_dim {
        1 => (0..resolution)
            .map(|i| {
                let a = 2.0 * PI * (i as f64 + 0.5) / resolution as f64;
                [a.cos(), a.sin(), 0.0]
            })
            .collect(),
        2 => {
            let nz = resolution;
            let na = 2 * resolution;
            let mut out = Vec::with_capacity(nz * na);
            for i in 0..nz {
                let z = -1.0 + 2.0 * (i as f64 + 0.5) / nz as f64;
                let r = (1.0 - z * z).sqrt();
                for j in 0..na {
                    let a = 2.0 * PI * (j as f64 + 0.5) / na as f64;
                    out.push([r * a.cos(), r * a.sin(), z]);
                }
            }
            out
        }
        _ => panic!("sphere quadrature supports d = 1 or 2"),
    }
}

fn grid_point(p: &[f64; 3], intrinsic_dim: usize) -> &[f64] {
    &p[..intrinsic_dim + 1]
}

/// `log Z` for `exp(-β f)` against the uniform probability on `S^d`.
pub fn sphere_log_partition<F: Fn(&[f64]) -> f64>(f: F, beta: f64, intrinsic_dim: usize, resolution: usize) -> f64 {
    let grid = sphere_grid(intrinsic_dim, resolution);
    let e: Vec<f64> = grid.iter().map(|p| -beta * f(grid_point(p, intrinsic_dim))).collect();
    log_mean_exp(&e)
}

/// Partition function of `exp(-β f)` on `S^d`, with the relative change
/// from doubling the resolution.
pub fn sphere_quadrature_partition<F: Fn(&[f64]) -> f64>(
    f: F,
    beta: f64,
    intrinsic_dim: usize,
    resolution: usize,
) -> (f64, f64) {
    let coarse = sphere_log_partition(&f, beta, intrinsic_dim, resolution);
    let fine = sphere_log_partition(&f, beta, intrinsic_dim, 2 * resolution);
    (fine.exp(), (fine - coarse).exp_m1().abs())
}

/// `KL(ν_{β1 f1} || ν_{β2 f2})` on `S^d` by midpoint quadrature.
pub fn sphere_quadrature_kl_tempered<F1, F2>(
    f1: F1,
    beta1: f64,
    f2: F2,
    beta2: f64,
    intrinsic_dim: usize,
    resolution: usize,
) -> f64
where
    F1: Fn(&[f64]) -> f64,
    F2: Fn(&[f64]) -> f64,
{
    let grid = sphere_grid(intrinsic_dim, resolution);
    let e1: Vec<f64> = grid.iter().map(|p| -beta1 * f1(grid_point(p, intrinsic_dim))).collect();
    let e2: Vec<f64> = grid.iter().map(|p| -beta2 * f2(grid_point(p, intrinsic_dim))).collect();
    let lz1 = log_mean_exp(&e1);
    let lz2 = log_mean_exp(&e2);
    let mut kl = 0.0;
    for (a, b) in e1.iter().zip(&e2) {
        let p = (a - lz1).exp() / grid.len() as f64;
        kl += p * ((a - lz1) - (b - lz2));
    }
    kl.max(0.0)
}

/// `KL(ν_{β f1} || ν_{β f2})` on `S^d`.
pub fn sphere_quadrature_kl<F1, F2>(f1: F1, f2: F2, beta: f64, intrinsic_dim: usize, resolution: usize) -> f64
where
    F1: Fn(&[f64]) -> f64,
    F2: Fn(&[f64]) -> f64,
{
    sphere_quadrature_kl_tempered(f1, beta, f2, beta, intrinsic_dim, resolution)
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Manifold check used by the oracle tests.
pub fn all_on_manifold(manifold: &Manifold, points: &Points, tol: f64) -> bool {
    points.rows().all(|p| manifold.contains(p, tol))
}
