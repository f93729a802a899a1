mod common;

use common::*;
use dualebm::mmd::{energy_estimate, mmd2, Kernel, MmdConfig, MmdVariant};
use dualebm::{FeatureMap, FeatureModel, Manifold};

#[test]
fn closed_form_arccosine_matches_monte_carlo_features() {
    let m = 100_000;
    let mut r = rng(1);
    let manifold = Manifold::sphere(2);
    let mc = Kernel::monte_carlo(FeatureModel::new(manifold, FeatureMap::relu()).unwrap(), m, &mut r);
    let arc = Kernel::ArcCosine1 { ambient: 3 };
    let pts = base_points(&manifold, 200, &mut r);
    // kernel values are at most k(x, x) = 1/6
    let scale = 1.0 / 6.0;
    for i in 0..100 {
        let (x, y) = (pts.row(2 * i), pts.row(2 * i + 1));
        let (a, b) = (arc.eval(x, y), mc.eval(x, y));
        assert!((a - b).abs() <= 2.0 / (m as f64).sqrt() * scale, "pair {i}: {a} vs {b}");
    }
}

#[test]
fn relu_kernel_diagonal_is_a_sixth_on_the_two_sphere() {
    let m = 1_000_000;
    let mut r = rng(2);
    let manifold = Manifold::sphere(2);
    let model = FeatureModel::new(manifold, FeatureMap::relu()).unwrap();
    let Kernel::MonteCarlo { thetas, .. } = Kernel::monte_carlo(model, m, &mut r) else { unreachable!() };
    let x = [0.0, 0.6, 0.8];
    let v: Vec<f64> = thetas.rows().map(|t| model.phi(&x, t).powi(2)).collect();
    let mean = v.iter().sum::<f64>() / m as f64;
    let sd = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (m - 1) as f64 / m as f64).sqrt();
    assert!((mean - 1.0 / 6.0).abs() <= 3.0 * sd, "{mean} ± {sd}");
    assert!((Kernel::ArcCosine1 { ambient: 3 }.eval(&x, &x) - 1.0 / 6.0).abs() < 1e-15);
}

#[test]
fn sqrt_readout_has_rkhs_norm_beta() {
    // with M fixed features the witness is (1/M) Σ c_j φ(·, θ_j) and its
    // squared RKHS norm is (1/M) Σ c_j²
    let mut r = rng(3);
    let manifold = Manifold::sphere(2);
    let model = FeatureModel::new(manifold, FeatureMap::softplus(4.0)).unwrap();
    let kernel = Kernel::monte_carlo(model, 40, &mut r);
    let Kernel::MonteCarlo { thetas, .. } = &kernel else { unreachable!() };
    let particles = base_points(&manifold, 30, &mut r);
    let data = base_points(&manifold, 25, &mut r);
    let mean_phi = |pts: &dualebm::Points, t: &[f64]| pts.rows().map(|x| model.phi(x, t)).sum::<f64>() / pts.len() as f64;
    let c: Vec<f64> = thetas.rows().map(|t| mean_phi(&particles, t) - mean_phi(&data, t)).collect();
    let norm2 = c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64;
    let m2 = mmd2(&particles, &data, &kernel);
    assert!((norm2 - m2).abs() <= 1e-12 * m2.max(1e-300), "{norm2} vs {m2}");
    let beta = 7.0;
    let cfg = MmdConfig { variant: MmdVariant::Sqrt, beta, s: 0.01, iterations: 1, seed: 0 };
    // E = (1/M) Σ e_j φ(·, θ_j) with e_j = β c_j / MMD
    let e: Vec<f64> = c.iter().map(|v| beta * v / m2.sqrt()).collect();
    let rkhs = (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt();
    assert!((rkhs - beta).abs() <= 1e-8 * beta);
    for x in base_points(&manifold, 10, &mut r).rows() {
        let direct = thetas.rows().zip(&e).map(|(t, ej)| ej * model.phi(x, t)).sum::<f64>() / e.len() as f64;
        let got = energy_estimate(&particles, &data, &kernel, &cfg, x).unwrap();
        assert!((got - direct).abs() <= 1e-10 * (1.0 + direct.abs()));
    }
}
