//! Sample and parameter spaces: unit spheres, the unit torus `[0, 1)` and
//! Euclidean space with a standard Gaussian base measure.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Manifold {
    /// Unit sphere `S^d` embedded in `R^(d+1)`; `ambient` is `d + 1`.
    Sphere { ambient: usize },
    /// One-dimensional torus `[0, 1)`.
    Torus,
    /// `R^d` with the standard Gaussian as base measure.
    Euclidean { dim: usize },
}

impl Manifold {
    pub fn sphere(intrinsic_dim: usize) -> Self {
        Manifold::Sphere { ambient: intrinsic_dim + 1 }
    }

    /// Number of coordinates used to store a point.
    pub fn ambient_dim(&self) -> usize {
        match *self {
            Manifold::Sphere { ambient } => ambient,
            Manifold::Torus => 1,
            Manifold::Euclidean { dim } => dim,
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match *self {
            Manifold::Sphere { ambient } => ambient - 1,
            Manifold::Torus => 1,
            Manifold::Euclidean { dim } => dim,
        }
    }

    pub fn is_sphere(&self) -> bool {
        matches!(self, Manifold::Sphere { .. })
    }

    /// Maps an ambient point back onto the manifold after an update.
    pub fn retract(&self, x: &mut [f64]) -> Result<()> {
        match self {
            Manifold::Sphere { .. } => normalize_in_place(x),
            Manifold::Torus => {
                x[0] = torus_wrap(x[0]);
                Ok(())
            }
            Manifold::Euclidean { .. } => Ok(()),
        }
    }

    /// Removes the normal component of `g` at `x` (sphere only).
    pub fn to_tangent(&self, x: &[f64], g: &mut [f64]) {
        if self.is_sphere() {
            let c = dot(g, x);
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi -= c * xi;
            }
        }
    }

    /// Adds `scale * grad log(dτ/dλ)(x)` to `out`. Only the Gaussian base of
    /// Euclidean space contributes (`-x`); spheres and the torus carry the
    /// uniform measure.
    pub fn add_base_drift(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        if let Manifold::Euclidean { .. } = self {
            for (o, xi) in out.iter_mut().zip(x) {
                *o -= scale * xi;
            }
        }
    }

    /// Draws a point from the base measure.
    pub fn sample_base<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            Manifold::Sphere { ambient } => {
                let v = uniform_sphere(rng, *ambient);
                out.copy_from_slice(&v);
            }
            Manifold::Torus => out[0] = rng.random::<f64>(),
            Manifold::Euclidean { .. } => {
                for o in out.iter_mut() {
                    *o = rng.sample(StandardNormal);
                }
            }
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        match self {
            Manifold::Sphere { ambient } => x.len() == *ambient && (norm(x) - 1.0).abs() <= tol,
            Manifold::Torus => x.len() == 1 && (0.0..1.0).contains(&x[0]),
            Manifold::Euclidean { dim } => x.len() == *dim && x.iter().all(|v| v.is_finite()),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize_in_place(x: &mut [f64]) -> Result<()> {
    let n = norm(x);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate(format!("cannot project vector of norm {n} onto the sphere")));
    }
    x.iter_mut().for_each(|v| *v /= n);
    Ok(())
}

/// `v / |v|`.
pub fn sphere_project(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    normalize_in_place(&mut out)?;
    Ok(out)
}

/// `g - <g, base> base`.
pub fn tangent_project(base: &[f64], g: &[f64]) -> Vec<f64> {
    let c = dot(g, base);
    g.iter().zip(base).map(|(gi, bi)| gi - c * bi).collect()
}

pub fn torus_wrap(x: f64) -> f64 {
    let r = x.rem_euclid(1.0);
    // rem_euclid can round up to exactly 1.0 for tiny negative inputs
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed shortest displacement from `a` to `b` on the torus, in `[-1/2, 1/2)`.
pub fn torus_delta(a: f64, b: f64) -> f64 {
    let d = (b - a).rem_euclid(1.0);
    if d >= 0.5 {
        d - 1.0
    } else {
        d
    }
}

/// Rotation-invariant draw on the unit sphere of `R^ambient`.
pub fn uniform_sphere<R: Rng + ?Sized>(rng: &mut R, ambient: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..ambient).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = sphere_project(&v) {
            return u;
        }
    }
}
