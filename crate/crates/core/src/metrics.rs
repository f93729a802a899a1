//! Convergence monitors against a known teacher and grid-level KL.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Manifold;
use crate::model::{Energy, FeatureEnsemble};
use crate::points::Points;

pub const METRICS_HEADER: [&str; 6] = ["iter", "time", "rescaled_time", "kl", "sm", "tv_norm"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub time: f64,
    pub rescaled_time: f64,
    pub kl: f64,
    pub sm: f64,
    pub tv_norm: f64,
}

/// CSV stream with the fixed metrics header.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        Self::with_header(out, &METRICS_HEADER)
    }

    pub fn with_header(out: W, header: &[&str]) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(header)?;
        Ok(MetricsWriter { inner })
    }

    /// Appends to a stream whose header is already written.
    pub fn append(out: W) -> Self {
        MetricsWriter { inner: csv::WriterBuilder::new().has_headers(false).from_writer(out) }
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        self.write_row(r.iter, &[r.time, r.rescaled_time, r.kl, r.sm, r.tv_norm])
    }

    pub fn write_row(&mut self, iter: u64, values: &[f64]) -> Result<()> {
        let mut rec = vec![iter.to_string()];
        rec.extend(values.iter().map(|v| format!("{v:e}")));
        self.inner.write_record(&rec)?;
        self.inner.flush()?;
        Ok(())
    }
}

fn log_diffs<S: Energy + ?Sized, T: Energy + ?Sized>(
    test: &Points,
    student: &S,
    beta_student: f64,
    teacher: &T,
    beta_teacher: f64,
) -> Vec<f64> {
    // u = log(dν_student/dν_teacher) up to normalization
    test.as_slice()
        .par_chunks(test.dim())
        .map(|x| -beta_student * student.value(x) + beta_teacher * teacher.value(x))
        .collect()
}

/// `KL(ν_{β f*} || ν_{β f_t})` from teacher samples, with its delta-method
/// standard error; the temperatures may differ between the two laws.
pub fn kl_estimate_tempered<S: Energy + ?Sized, T: Energy + ?Sized>(
    test: &Points,
    student: &S,
    beta_student: f64,
    teacher: &T,
    beta_teacher: f64,
) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::Degenerate("KL estimate needs at least one test point".into()));
    }
    let u = log_diffs(test, student, beta_student, teacher, beta_teacher);
    let n = u.len() as f64;
    let top = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|v| (v - top).exp()).collect();
    let mean_e = e.iter().sum::<f64>() / n;
    let kl = top + mean_e.ln() - u.iter().sum::<f64>() / n;
    if !kl.is_finite() {
        return Err(Error::NonFinite { what: "KL estimate", iteration: 0 });
    }
    // influence function of log mean e^u - mean u
    let infl: Vec<f64> = e.iter().zip(&u).map(|(ei, ui)| ei / mean_e - ui).collect();
    let mi = infl.iter().sum::<f64>() / n;
    let var = infl.iter().map(|v| (v - mi).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((kl.max(0.0), (var / n).sqrt()))
}

/// `log mean exp(-β f_t + β f*) + mean β (f_t - f*)` over teacher samples.
pub fn kl_estimate<S: Energy + ?Sized, T: Energy + ?Sized>(test: &Points, student: &S, teacher: &T, beta: f64) -> Result<f64> {
    kl_estimate_tempered(test, student, beta, teacher, beta).map(|r| r.0)
}

/// `mean |∇f_t - ∇f*|²` with tangent-projected gradients on spheres.
pub fn sm_estimate<S: Energy + ?Sized, T: Energy + ?Sized>(test: &Points, student: &S, teacher: &T, manifold: &Manifold) -> f64 {
    let dim = test.dim();
    let terms: Vec<f64> = test
        .as_slice()
        .par_chunks(dim)
        .map(|x| {
            let mut a = vec![0.0; dim];
            let mut b = vec![0.0; dim];
            student.grad(x, &mut a);
            teacher.grad(x, &mut b);
            a.iter_mut().zip(&b).for_each(|(p, q)| *p -= q);
            manifold.to_tangent(x, &mut a);
            a.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    terms.iter().sum::<f64>() / test.len().max(1) as f64
}

/// `β (1/m) Σ w_j`.
pub fn f1_norm(ens: &FeatureEnsemble, beta: f64) -> f64 {
    beta * ens.mean_weight()
}

/// `Σ p log(p / q) · cell` over grid densities; `+∞` when `q` vanishes under `p`.
pub fn quadrature_kl(p: &[f64], q: &[f64], cell: f64) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Degenerate("density grids must have the same nonzero length".into()));
    }
    for (name, g) in [("p", p), ("q", q)] {
        if g.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Degenerate(format!("density grid {name} has negative or NaN entries")));
        }
        let mass = g.iter().sum::<f64>() * cell;
        if (mass - 1.0).abs() > 1e-8 {
            return Err(Error::Degenerate(format!("density grid {name} has mass {mass}")));
        }
    }
    let mut kl = 0.0;
    for (a, b) in p.iter().zip(q) {
        if *a < 1e-15 {
            continue;
        }
        if *b == 0.0 {
            if *a > 1e-12 {
                return Ok(f64::INFINITY);
            }
            continue;
        }
        kl += a * (a / b).ln();
    }
    Ok((kl * cell).max(0.0))
}
