//! Shared instances and criterion checks for the integration and
//! acceptance suites.
#![allow(dead_code, clippy::needless_range_loop)]

use std::fmt;
use std::path::Path;

use dualebm::dual::{
    feature_update, particle_update_with_noise, restart_particles, DualConfig, DualTrainer, RestartMode, TrainerState,
};
use dualebm::geometry::uniform_sphere;
use dualebm::metrics::{f1_norm, kl_estimate_tempered};
use dualebm::mmd::{mmd2, mmd_drift, witness, Kernel};
use dualebm::model::{field_f, fields_at_neurons, Scaled};
use dualebm::oracles::{
    brute_force_F, brute_force_mmd2, brute_force_sm_loss, brute_force_torus_convolution, fd_directional, fd_gradient,
    sphere_grid, sphere_quadrature_kl, OracleReport,
};
use dualebm::pde1d::{pde_run, PdeConfig, TorusSolver};
use dualebm::runner::{run_experiment, ExperimentConfig, RunOptions};
use dualebm::sampler::{generate_dataset, LangevinConfig};
use dualebm::sm::{sm_first_variation, sm_loss, sm_step, SmConfig};
use dualebm::{Activation, DataSet, FeatureEnsemble, FeatureMap, FeatureModel, Manifold, Points, TeacherModel, WeightInit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn base_points(manifold: &Manifold, n: usize, rng: &mut ChaCha8Rng) -> Points {
    let mut p = Points::zeros(n, manifold.ambient_dim());
    for r in p.rows_mut() {
        manifold.sample_base(rng, r);
    }
    p
}

pub fn ensemble(manifold: Manifold, map: FeatureMap, m: usize, rng: &mut ChaCha8Rng) -> FeatureEnsemble {
    FeatureEnsemble::random(FeatureModel::new(manifold, map).unwrap(), m, WeightInit::Uniform, rng).unwrap()
}

/// Manifold/feature pairs exercised by the oracle suites.
pub fn cases() -> Vec<(Manifold, FeatureMap)> {
    vec![
        (Manifold::sphere(2), FeatureMap::relu()),
        (Manifold::sphere(5), FeatureMap::softplus(3.0)),
        (Manifold::sphere(3), FeatureMap::Ridge { activation: Activation::Relu, normalized: true }),
        (Manifold::Euclidean { dim: 3 }, FeatureMap::softplus(2.0)),
        (Manifold::Torus, FeatureMap::periodic_gaussian(0.3)),
    ]
}

pub fn smooth_cases() -> Vec<(Manifold, FeatureMap)> {
    cases().into_iter().filter(|(_, f)| f.is_smooth()).collect()
}

/// Pass/fail outcome of one acceptance criterion.
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }

    /// Worst report of a batch; passes when all do.
    pub fn from_reports(reports: &[OracleReport]) -> Self {
        let failed = reports.iter().filter(|r| !r.pass).count();
        let worst = reports
            .iter()
            .max_by(|a, b| (a.abs_err / (a.tolerance * a.oracle.abs().max(1.0))).total_cmp(&(b.abs_err / (b.tolerance * b.oracle.abs().max(1.0)))));
        let detail = match worst {
            Some(w) => format!("{} comparisons, {failed} failed; worst: {w}", reports.len()),
            None => "no comparisons".into(),
        };
        Verdict::new(failed == 0 && !reports.is_empty(), detail)
    }

    pub fn and(self, other: Verdict) -> Verdict {
        Verdict::new(self.pass && other.pass, format!("{}; {}", self.detail, other.detail))
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", if self.pass { "PASS" } else { "FAIL" }, self.detail)
    }
}

// ---------------------------------------------------------------- invariants

fn on_sphere(points: &Points, tol: f64) -> bool {
    points.rows().all(|p| (p.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= tol)
}

/// Weights stay nonnegative with mean at most one, and points stay on the
/// manifold, after every iteration of a restarted training run.
pub fn training_invariants() -> Verdict {
    let mut worst_mean: f64 = 0.0;
    let mut ok = true;
    for (k, (manifold, map)) in cases().into_iter().enumerate() {
        let mut r = rng(100 + k as u64);
        let data = DataSet::new(base_points(&manifold, 80, &mut r)).unwrap();
        let mut cfg = DualConfig::new(3.0, 0.05, 60, 5.0);
        cfg.p_r = 0.2;
        cfg.seed = k as u64;
        if k % 2 == 0 {
            cfg.weight_init = WeightInit::Ones;
        }
        let model = FeatureModel::new(manifold, map).unwrap();
        let state = TrainerState::init(model, 12, 120, &data, &cfg).unwrap();
        let mut t = DualTrainer::new(cfg, data, state).unwrap();
        let theta_sphere = model.theta_manifold().is_sphere();
        t.train(|s| {
            let w = &s.ensemble.weights;
            ok &= w.iter().all(|v| *v >= 0.0);
            worst_mean = worst_mean.max(s.ensemble.mean_weight());
            ok &= s.ensemble.mean_weight() <= 1.0 + 1e-12;
            if manifold.is_sphere() {
                ok &= on_sphere(&s.particles, 1e-12);
            }
            if theta_sphere {
                ok &= on_sphere(&s.ensemble.thetas, 1e-12);
            }
            if manifold == Manifold::Torus {
                ok &= s.particles.as_slice().iter().all(|v| (0.0..1.0).contains(v));
            }
            Ok(())
        })
        .unwrap();
    }
    Verdict::new(ok, format!("weights >= 0, max mean weight {worst_mean:.15}, points on manifold (1e-12)"))
}

pub fn mmd_invariants() -> Verdict {
    let mut ok = true;
    let mut lowest = f64::INFINITY;
    let mut worst_same: f64 = 0.0;
    for seed in 0..20u64 {
        let mut r = rng(200 + seed);
        let ambient = 3 + (seed % 3) as usize;
        let kernels = [
            Kernel::ArcCosine1 { ambient },
            Kernel::monte_carlo(FeatureModel::new(Manifold::sphere(ambient - 1), FeatureMap::relu()).unwrap(), 64, &mut r),
        ];
        let a = base_points(&Manifold::sphere(ambient - 1), 1 + r.random_range(0..40), &mut r);
        let b = base_points(&Manifold::sphere(ambient - 1), 1 + r.random_range(0..40), &mut r);
        let mut rows = a.to_rows();
        rows.reverse();
        let same = Points::from_rows(&rows).unwrap();
        for k in &kernels {
            let v = mmd2(&a, &b, k);
            lowest = lowest.min(v);
            ok &= v >= -1e-10;
            let z = mmd2(&a, &same, k);
            worst_same = worst_same.max(z.abs());
            ok &= z.abs() <= 1e-10;
        }
    }
    Verdict::new(ok, format!("min mmd2 {lowest:.3e} (>= -1e-10), max |mmd2| on identical multisets {worst_same:.3e}"))
}

pub fn pde_invariants() -> Verdict {
    let mut cfg = PdeConfig::new(1.0, 0.5);
    cfg.alpha_prime = 2.0;
    let mut s = TorusSolver::new(cfg).unwrap();
    let total = s.total_steps();
    let (mut worst_mass, mut lowest, mut gamma_ok) = (0.0f64, f64::INFINITY, true);
    for _ in 0..total {
        s.step().unwrap();
        let mass = s.fields.nu.iter().sum::<f64>() / s.fields.nu.len() as f64;
        worst_mass = worst_mass.max((mass - 1.0).abs());
        lowest = lowest.min(s.fields.nu.iter().cloned().fold(f64::INFINITY, f64::min));
        gamma_ok &= s.fields.gamma_minus.iter().all(|g| *g >= 0.0);
    }
    Verdict::new(
        worst_mass <= 1e-8 && lowest >= -1e-8 && gamma_ok,
        format!("{total} steps, max |mass-1| {worst_mass:.2e}, min nu {lowest:.2e}, gamma >= 0: {gamma_ok}"),
    )
}

pub const SMALL_DUAL: &str = r#"
mode = "train-dual"
seed = 11
log_every = 5

[manifold]
kind = "sphere"
ambient = 3

[teacher]
angle = 2.87
w_star = -10.0
n = 200
n_test = 200

[teacher.langevin]
burn_in = 300
thin = 5
chains = 8

[model]
m = 8
N = 100

[dual]
alpha = 10.0
s = 0.02
T = 20
beta = 20.0
p_r = 0.1
"#;

pub fn run_config(text: &str, out: &Path, opts: RunOptions) -> dualebm::runner::RunSummary {
    let cfg = ExperimentConfig::from_toml_str(text, Path::new("inline.toml")).unwrap();
    run_experiment(&cfg, &RunOptions { out: Some(out.to_path_buf()), ..opts }).unwrap()
}

pub fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let a = run_config(SMALL_DUAL, &dir.path().join("a"), RunOptions::default());
    let b = run_config(SMALL_DUAL, &dir.path().join("b"), RunOptions::default());
    let ma = std::fs::read(a.metrics.unwrap()).unwrap();
    let mb = std::fs::read(b.metrics.unwrap()).unwrap();
    let ca = std::fs::read(dir.path().join("a/checkpoint.json")).unwrap();
    let cb = std::fs::read(dir.path().join("b/checkpoint.json")).unwrap();
    Verdict::new(ma == mb && ca == cb, format!("two seeded runs, metrics {} bytes, identical: {}", ma.len(), ma == mb && ca == cb))
}

pub fn invariant_suite() -> Verdict {
    training_invariants().and(mmd_invariants()).and(pde_invariants()).and(determinism())
}

// ----------------------------------------------------------- oracle parity

pub fn field_f_reports(instances: usize) -> Vec<OracleReport> {
    let mut out = Vec::new();
    let cs = cases();
    for i in 0..instances {
        let (manifold, map) = cs[i % cs.len()];
        let mut r = rng(300 + i as u64);
        let ens = ensemble(manifold, map, 1 + r.random_range(0..12), &mut r);
        let particles = base_points(&manifold, 1 + r.random_range(0..400), &mut r);
        let data = base_points(&manifold, 1 + r.random_range(0..400), &mut r);
        let (values, _) = fields_at_neurons(&ens, &particles, &data);
        for j in 0..ens.len() {
            let th = ens.thetas.row(j);
            let oracle = brute_force_F(&ens.model, &particles, &data, th);
            out.push(OracleReport::compare(format!("field_F[{i},{j}]"), field_f(&ens.model, &particles, &data, th), oracle, 1e-10));
            out.push(OracleReport::compare(format!("field_F fast[{i},{j}]"), values[j], oracle, 1e-10));
        }
    }
    out
}

pub fn mmd2_reports(instances: usize) -> Vec<OracleReport> {
    (0..instances)
        .map(|i| {
            let mut r = rng(400 + i as u64);
            let d = 1 + (i % 4);
            let manifold = Manifold::sphere(d);
            let kernel = if i % 2 == 0 {
                Kernel::ArcCosine1 { ambient: d + 1 }
            } else {
                Kernel::monte_carlo(FeatureModel::new(manifold, FeatureMap::relu()).unwrap(), 50, &mut r)
            };
            let a = base_points(&manifold, 1 + r.random_range(0..150), &mut r);
            let b = base_points(&manifold, 1 + r.random_range(0..150), &mut r);
            OracleReport::compare(format!("mmd2[{i}]"), mmd2(&a, &b, &kernel), brute_force_mmd2(&a, &b, &kernel), 1e-10)
        })
        .collect()
}

pub fn sm_loss_reports(instances: usize) -> Vec<OracleReport> {
    let cs = smooth_cases();
    (0..instances)
        .map(|i| {
            let (manifold, map) = cs[i % cs.len()];
            let mut r = rng(500 + i as u64);
            let ens = ensemble(manifold, map, 1 + r.random_range(0..10), &mut r);
            let data = DataSet::new(base_points(&manifold, 1 + r.random_range(0..100), &mut r)).unwrap();
            let beta = [0.5, 2.0, 20.0][i % 3];
            OracleReport::compare(format!("sm_loss[{i}]"), sm_loss(&ens, &data, beta), brute_force_sm_loss(&ens, &data, beta), 1e-10)
        })
        .collect()
}

pub fn spectral_reports() -> Vec<OracleReport> {
    let mut out = Vec::new();
    for (grid, delta) in [(128usize, 0.3), (256, 0.2), (512, 0.15)] {
        let mut cfg = PdeConfig::new(1.0, 1.0);
        cfg.grid = grid;
        cfg.delta = delta;
        let s = TorusSolver::new(cfg.clone()).unwrap();
        let mut r = rng(grid as u64);
        let h: Vec<f64> = (0..grid).map(|_| r.random::<f64>()).collect();
        let fast = s.convolve_phi(&h);
        let slow = brute_force_torus_convolution(&h, delta, cfg.modes());
        for (i, (a, b)) in fast.iter().zip(&slow).enumerate() {
            out.push(OracleReport::compare(format!("phi*h[G={grid},{i}]"), *a, *b, 1e-10));
        }
    }
    out
}

pub fn oracle_equivalence() -> Verdict {
    Verdict::from_reports(&field_f_reports(100))
        .and(Verdict::from_reports(&mmd2_reports(100)))
        .and(Verdict::from_reports(&sm_loss_reports(100)))
        .and(Verdict::from_reports(&spectral_reports()))
}

// -------------------------------------------------------------- derivatives

/// Distance of every ridge pre-activation from the ReLU kink.
fn kink_margin(ens: &FeatureEnsemble, x: &[f64]) -> f64 {
    match ens.model.map {
        FeatureMap::Ridge { activation: Activation::Relu, .. } => (0..ens.len())
            .map(|j| {
                let th = ens.thetas.row(j);
                let mut z: f64 = th.iter().zip(x).map(|(a, b)| a * b).sum();
                if let Manifold::Euclidean { .. } = ens.model.manifold {
                    z += th[th.len() - 1];
                }
                z.abs() / th.iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .fold(f64::INFINITY, f64::min),
        _ => f64::INFINITY,
    }
}

pub fn grad_energy_reports() -> Vec<OracleReport> {
    let mut out = Vec::new();
    for (k, (manifold, map)) in cases().into_iter().enumerate() {
        let mut r = rng(600 + k as u64);
        let ens = ensemble(manifold, map, 8, &mut r);
        let pts = base_points(&manifold, 30, &mut r);
        for (i, x) in pts.rows().enumerate() {
            if kink_margin(&ens, x) < 1e-3 {
                continue;
            }
            let mut g = vec![0.0; x.len()];
            ens.grad_energy_x(x, &mut g);
            let fd = fd_gradient(|y| ens.energy(y), x, 1e-6);
            for (c, (a, b)) in g.iter().zip(&fd).enumerate() {
                out.push(OracleReport::compare(format!("grad_energy_x[{k},{i},{c}]"), *a, *b, 1e-5));
            }
        }
    }
    out
}

pub fn sm_variation_reports() -> Vec<OracleReport> {
    let mut out = Vec::new();
    for (k, (manifold, map)) in smooth_cases().into_iter().enumerate() {
        let mut r = rng(700 + k as u64);
        let ens = ensemble(manifold, map, 5, &mut r);
        let data = DataSet::new(base_points(&manifold, 12, &mut r)).unwrap();
        let beta = 2.0;
        for j in 0..ens.len() {
            let (v, g) = sm_first_variation(&ens, &data, beta, ens.thetas.row(j));
            let dw = fd_directional(
                |h| {
                    let mut e = ens.clone();
                    e.weights[j] += h;
                    sm_loss(&e, &data, beta)
                },
                1e-6,
            );
            out.push(OracleReport::compare(format!("V[{k},{j}]"), v, dw * ens.weights[j] / ens.coefficient(j), 1e-5));
            let dir: Vec<f64> = (0..g.len()).map(|_| r.random::<f64>() - 0.5).collect();
            let dt = fd_directional(
                |h| {
                    let mut e = ens.clone();
                    e.thetas.row_mut(j).iter_mut().zip(&dir).for_each(|(t, d)| *t += h * d);
                    sm_loss(&e, &data, beta)
                },
                1e-6,
            );
            let got: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            out.push(OracleReport::compare(format!("grad V[{k},{j}]"), got, dt / ens.coefficient(j), 1e-5));
        }
    }
    out
}

pub fn mmd_drift_reports() -> Vec<OracleReport> {
    let mut out = Vec::new();
    for d in 1..=3usize {
        let mut r = rng(800 + d as u64);
        let manifold = Manifold::sphere(d);
        let kernels = [
            Kernel::ArcCosine1 { ambient: d + 1 },
            Kernel::monte_carlo(FeatureModel::new(manifold, FeatureMap::softplus(4.0)).unwrap(), 40, &mut r),
        ];
        let a = base_points(&manifold, 25, &mut r);
        let b = base_points(&manifold, 30, &mut r);
        for (ki, k) in kernels.iter().enumerate() {
            for i in 0..8 {
                let x = uniform_sphere(&mut r, d + 1);
                let g = mmd_drift(&x, &a, &b, k);
                let fd = fd_gradient(|y| witness(y, &a, &b, k), &x, 1e-6);
                for (c, (p, q)) in g.iter().zip(&fd).enumerate() {
                    out.push(OracleReport::compare(format!("mmd_drift[d={d},k={ki},{i},{c}]"), *p, *q, 1e-5));
                }
            }
        }
    }
    out
}

pub fn derivative_checks() -> Verdict {
    Verdict::from_reports(&grad_energy_reports())
        .and(Verdict::from_reports(&sm_variation_reports()))
        .and(Verdict::from_reports(&mmd_drift_reports()))
}

// ------------------------------------------------------- KL vs quadrature

/// Exact draws from `exp(-β f)` on `S^2` by rejection from the uniform law.
pub fn rejection_sample(f: &dyn Fn(&[f64]) -> f64, lipschitz: f64, beta: f64, n: usize, r: &mut ChaCha8Rng) -> Points {
    let res = 200;
    let grid = sphere_grid(2, res);
    // midpoint cells have diameter below 2π/res
    let floor = grid.iter().map(|p| f(p)).fold(f64::INFINITY, f64::min) - lipschitz * 2.0 * std::f64::consts::PI / res as f64;
    let mut out = Vec::with_capacity(3 * n);
    let mut accepted = 0;
    while accepted < n {
        let x = uniform_sphere(r, 3);
        if r.random::<f64>() < (-beta * (f(&x) - floor)).exp() {
            out.extend_from_slice(&x);
            accepted += 1;
        }
    }
    Points::new(3, out).unwrap()
}

fn ridge_lipschitz(ens: &FeatureEnsemble) -> f64 {
    (0..ens.len()).map(|j| ens.coefficient(j).abs()).sum()
}

/// Random teacher/student pairs at β = 20: per-pair `(estimate, se, quadrature)`.
pub fn kl_pairs(pairs: usize, n_test: usize) -> Vec<(f64, f64, f64)> {
    let beta = 20.0;
    (0..pairs)
        .map(|i| {
            let mut r = rng(900 + i as u64);
            let teacher = ensemble(Manifold::sphere(2), FeatureMap::relu(), 6, &mut r);
            let student = ensemble(Manifold::sphere(2), FeatureMap::relu(), 6, &mut r);
            let test = rejection_sample(&|x| teacher.energy(x), ridge_lipschitz(&teacher), beta, n_test, &mut r);
            let (kl, se) = kl_estimate_tempered(&test, &student, beta, &teacher, beta).unwrap();
            let q = sphere_quadrature_kl(|x| teacher.energy(x), |x| student.energy(x), beta, 2, 600);
            (kl, se, q)
        })
        .collect()
}

pub fn kl_vs_quadrature() -> Verdict {
    let rows = kl_pairs(6, 10_000);
    let worst = rows.iter().map(|(k, s, q)| (k - q).abs() / s).fold(0.0, f64::max);
    let detail = rows.iter().map(|(k, s, q)| format!("{k:.4}±{s:.4} vs {q:.4}")).collect::<Vec<_>>().join(", ");
    Verdict::new(worst <= 3.0, format!("n*=1e4, beta=20, max |est-quad|/se = {worst:.2}: {detail}"))
}

// ------------------------------------------------------------- PDE studies

pub fn terminal_pde(alpha: f64, alpha_prime: f64, rescaled_budget: f64) -> dualebm::pde1d::PdeRecord {
    let mut cfg = PdeConfig::new(alpha, rescaled_budget / alpha.max(1.0));
    cfg.alpha_prime = alpha_prime;
    let recs = pde_run(cfg, u64::MAX, |_, _| Ok(())).unwrap();
    *recs.last().unwrap()
}

pub const PDE_BUDGET: f64 = 200.0;

pub fn pde_timescale() -> Verdict {
    let kl: Vec<(f64, f64)> = [0.01, 1.0, 10.0, 100.0].iter().map(|&a| (a, terminal_pde(a, 0.0, PDE_BUDGET).kl_ebm)).collect();
    let base = kl[1].1;
    let slow = kl[0].1 > 10.0 * base;
    let fast = kl[2..].iter().all(|(_, v)| *v <= 3.0 * base && *v >= base / 3.0);
    let detail = kl.iter().map(|(a, v)| format!("KL(alpha={a})={v:.4e}")).collect::<Vec<_>>().join(", ");
    Verdict::new(slow && fast, format!("rescaled budget {PDE_BUDGET}: {detail}"))
}

pub fn pde_restart() -> Verdict {
    let recs: Vec<(f64, f64, f64)> = [0.0, 1.0, 10.0]
        .iter()
        .map(|&ap| {
            let r = terminal_pde(10.0, ap, PDE_BUDGET);
            (ap, r.kl_ebm, r.sm)
        })
        .collect();
    let monotone = recs.windows(2).all(|w| w[1].1 >= w[0].1);
    let (lo, hi) = recs.iter().fold((f64::INFINITY, 0.0f64), |(l, h), r| (l.min(r.2), h.max(r.2)));
    let detail = recs.iter().map(|(a, k, s)| format!("alpha'={a}: KL={k:.4e} SM={s:.4e}")).collect::<Vec<_>>().join(", ");
    Verdict::new(monotone && hi <= 3.0 * lo, format!("alpha=10; {detail}; SM spread x{:.3}", hi / lo))
}

// -------------------------------------------------- particles against PDE

/// `n` quantile points of a grid density on `[0, 1)` (piecewise constant cells).
pub fn density_quantiles(density: &[f64], n: usize) -> Points {
    let g = density.len();
    let h = 1.0 / g as f64;
    let mut cdf = vec![0.0; g + 1];
    for i in 0..g {
        cdf[i + 1] = cdf[i] + density[i] * h;
    }
    let total = cdf[g];
    let mut out = Vec::with_capacity(n);
    let mut cell = 0;
    for k in 0..n {
        let u = (k as f64 + 0.5) / n as f64 * total;
        while cdf[cell + 1] < u {
            cell += 1;
        }
        let frac = (u - cdf[cell]) / (cdf[cell + 1] - cdf[cell]);
        out.push((cell as f64 + frac) * h);
    }
    Points::new(1, out).unwrap()
}

/// L¹ distance between a 64-bin particle histogram and the grid density
/// averaged onto the same bins.
pub fn histogram_l1(particles: &Points, density: &[f64], bins: usize) -> f64 {
    let mut counts = vec![0.0; bins];
    for x in particles.as_slice() {
        counts[((x * bins as f64) as usize).min(bins - 1)] += 1.0;
    }
    let per = density.len() / bins;
    (0..bins)
        .map(|b| {
            let hist = counts[b] / particles.len() as f64 * bins as f64;
            let grid = density[b * per..(b + 1) * per].iter().sum::<f64>() / per as f64;
            (hist - grid).abs() / bins as f64
        })
        .sum()
}

/// Particle system on the torus with neurons frozen on the PDE grid, against
/// the gridded solver at the same `α`.
/// Each row is `(t, particle L1, L1 travelled by the grid density since t = 0)`.
pub fn particle_pde(n_particles: usize, checkpoints: &[f64]) -> Vec<(f64, f64, f64)> {
    let alpha = 1.0;
    let pcfg = PdeConfig::new(alpha, *checkpoints.last().unwrap());
    let mut solver = TorusSolver::new(pcfg.clone()).unwrap();
    let grid = pcfg.grid;
    let dt = pcfg.step();
    let model = FeatureModel::new(Manifold::Torus, FeatureMap::PeriodicGaussian { width: pcfg.delta, modes: pcfg.modes() }).unwrap();
    let thetas = Points::new(1, solver.grid_points()).unwrap();
    let ens = FeatureEnsemble::new(model, thetas, vec![pcfg.gamma0; grid], vec![-1; grid]).unwrap();
    let data = DataSet::new(density_quantiles(&solver.fields.nu_p, n_particles)).unwrap();
    let particles = density_quantiles(&solver.fields.nu, n_particles);
    let nu0 = solver.fields.nu.clone();
    let mut cfg = DualConfig::new(alpha, dt, 0, pcfg.beta);
    cfg.transport_features = false;
    cfg.cap_total_variation = false;
    cfg.seed = 5;
    let mut trainer = DualTrainer::new(cfg, data, TrainerState::new(ens, dualebm::ParticleSet(particles), 5)).unwrap();
    let mut out = Vec::new();
    for &t in checkpoints {
        let steps = (t / dt).round() as u64;
        while trainer.state.iteration < steps {
            trainer.step().unwrap();
        }
        while solver.steps < steps {
            solver.step().unwrap();
        }
        let moved = solver.fields.nu.iter().zip(&nu0).map(|(a, b)| (a - b).abs()).sum::<f64>() / grid as f64;
        out.push((t, histogram_l1(&trainer.state.particles, &solver.fields.nu, 64), moved));
    }
    out
}

pub fn particle_pde_consistency() -> Verdict {
    let rows = particle_pde(20_000, &[0.2, 1.0]);
    let pass = rows.iter().all(|(_, l1, _)| *l1 <= 0.1);
    let detail = rows.iter().map(|(t, l, m)| format!("L1(t={t})={l:.4} (PDE moved {m:.4})")).collect::<Vec<_>>().join(", ");
    Verdict::new(pass, format!("N=2e4, 64 bins: {detail}"))
}

// ----------------------------------------- restarts against score matching

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub struct RestartSm {
    pub cosine: f64,
    pub drift_only_cosine: f64,
    pub dual_norm: f64,
    pub sm_norm: f64,
}

/// Mean neuron displacement of one restarted dual step (`p_R = 1`) over
/// antithetic noise pairs, against one score-matching step.
pub fn restart_sm(draws: usize, beta: f64, seed: u64) -> RestartSm {
    let s = 1e-3;
    let (m, n) = (4, 16);
    let manifold = Manifold::sphere(2);
    let mut r = rng(seed);
    let model = FeatureModel::new(manifold, FeatureMap::softplus(1.0)).unwrap();
    let ens0 = FeatureEnsemble::random(model, m, WeightInit::Ones, &mut r).unwrap();
    let data = DataSet::new(base_points(&manifold, n, &mut r)).unwrap();
    let displacement = |e: &FeatureEnsemble| -> Vec<f64> {
        e.thetas.as_slice().iter().zip(ens0.thetas.as_slice()).map(|(a, b)| a - b).collect()
    };
    let mut sm = ens0.clone();
    sm_step(&mut sm, &data, &SmConfig::new(s, 1, beta), 0).unwrap();
    let d_sm = displacement(&sm);
    let mut cold = ens0.clone();
    sm_step(&mut cold, &data, &SmConfig::new(s, 1, f64::INFINITY), 0).unwrap();
    let d_cold = displacement(&cold);
    let mut cfg = DualConfig::new(1.0, s, 1, beta);
    cfg.p_r = 1.0;
    cfg.restart_mode = RestartMode::Stratified;
    let (hx, htheta) = cfg.step_sizes();
    let mut acc = vec![0.0; d_sm.len()];
    for _ in 0..draws {
        let mut z = Points::zeros(n, 3);
        z.as_mut_slice().iter_mut().for_each(|v| *v = StandardNormal.sample(&mut r));
        for sign in [1.0, -1.0] {
            let mut noise = z.clone();
            noise.as_mut_slice().iter_mut().for_each(|v| *v *= sign);
            let mut e = ens0.clone();
            let mut p = Points::zeros(n, 3);
            restart_particles(&mut p, &data, cfg.p_r, cfg.restart_mode, &mut r);
            particle_update_with_noise(&e, &mut p, hx, cfg.inv_beta(), cfg.tangent_drift, &noise).unwrap();
            feature_update(&mut e, &p, &data, htheta, true, 0).unwrap();
            acc.iter_mut().zip(displacement(&e)).for_each(|(a, d)| *a += d);
        }
    }
    // the dual step moves by s_x s_θ ∇V on average, the SM step by s ∇V
    acc.iter_mut().for_each(|a| *a /= (2 * draws) as f64 * hx);
    RestartSm {
        cosine: cosine(&acc, &d_sm),
        drift_only_cosine: cosine(&d_cold, &d_sm),
        dual_norm: acc.iter().map(|v| v * v).sum::<f64>().sqrt(),
        sm_norm: d_sm.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

pub const DESK_TEACHER_BETA: f64 = 2.0;

pub const RESTART_SM_BETA: f64 = 20.0;

pub fn restart_sm_equivalence() -> Verdict {
    let r = restart_sm(10_000, RESTART_SM_BETA, 0);
    Verdict::new(
        r.cosine >= 0.99,
        format!(
            "m=4, n=N=16, s=1e-3, beta={RESTART_SM_BETA}, 1e4 antithetic draws: cosine {:.5} (mean dual step / s_x {:.4e}, SM step {:.4e}; noiseless-drift cosine {:.4})",
            r.cosine, r.dual_norm, r.sm_norm, r.drift_only_cosine
        ),
    )
}

// ------------------------------------------------------------ desk run

pub struct DeskRow {
    pub iteration: u64,
    pub kl: f64,
    pub se: f64,
    pub tv: f64,
}

pub fn sphere_desk_run(iterations: u64, log_every: u64, teacher_beta: f64) -> Vec<DeskRow> {
    let manifold = Manifold::sphere(2);
    let teacher = TeacherModel::two_neurons(2, 2.87, -10.0, Activation::Relu).unwrap();
    let mut lc = LangevinConfig::new(teacher_beta);
    lc.burn_in = 5000;
    let data = generate_dataset(&teacher, &manifold, 10_000, &lc, 1).unwrap();
    let test = generate_dataset(&teacher, &manifold, 10_000, &lc, 2).unwrap().into_points();
    let beta = 20.0;
    let mut cfg = DualConfig::new(10.0, 0.02, iterations, beta);
    cfg.p_r = 0.0;
    let model = FeatureModel::new(manifold, FeatureMap::relu()).unwrap();
    let state = TrainerState::init(model, 64, 20_000, &data, &cfg).unwrap();
    let mut trainer = DualTrainer::new(cfg, data, state).unwrap();
    let teacher_law = Scaled(teacher_beta, &teacher);
    let mut rows = Vec::new();
    trainer
        .train(|s| {
            if s.iteration % log_every == 0 || s.iteration == iterations {
                let (kl, se) = kl_estimate_tempered(&test, &Scaled(beta, &s.ensemble), 1.0, &teacher_law, 1.0)?;
                rows.push(DeskRow { iteration: s.iteration, kl, se, tv: f1_norm(&s.ensemble, beta) });
            }
            Ok(())
        })
        .unwrap();
    rows
}
