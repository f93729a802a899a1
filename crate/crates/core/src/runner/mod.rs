//! Experiment orchestration: data preparation, training loops, metrics,
//! checkpoints and plots.

pub mod checkpoint;
pub mod config;
pub mod plot;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dual::{DualTrainer, TrainerState};
use crate::error::{Error, Result};
use crate::geometry::Manifold;
use crate::metrics::{f1_norm, kl_estimate_tempered, sm_estimate, MetricsWriter, METRICS_HEADER};
use crate::mmd::{mmd2, witness_and_grad, Kernel, MmdConfig, MmdFlow, MmdVariant};
use crate::model::{DataSet, Energy, FeatureEnsemble, FeatureModel, Scaled, TeacherModel};
use crate::pde1d::{pde_run, PDE_HEADER};
use crate::points::Points;
use crate::sampler::{generate_dataset, item_rng, read_points_csv, write_points_csv, LangevinConfig};
use crate::sm::{SmState, SmTrainer};

pub use checkpoint::{Checkpoint, MmdState, CHECKPOINT_VERSION};
pub use config::{ExperimentConfig, KernelSpec, Mode};

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub log_every: Option<u64>,
    pub resume: Option<PathBuf>,
    pub plot: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub metrics: Option<PathBuf>,
    /// Metric rows written by this invocation.
    pub records: usize,
    pub children: Vec<RunSummary>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Independent seed for a named purpose, derived from the run seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    item_rng(seed, tag).next_u64()
}

const TRAIN_TAG: u64 = 1;
const TEST_TAG: u64 = 2;

/// Training/test samples plus the teacher that produced them, if any.
pub struct Prepared {
    pub data: DataSet,
    pub test: Option<Points>,
    pub teacher: Option<TeacherModel>,
    pub teacher_beta: f64,
}

pub fn teacher_model(cfg: &ExperimentConfig) -> Result<Option<TeacherModel>> {
    let (Some(t), Some(m)) = (&cfg.teacher, cfg.manifold) else { return Ok(None) };
    TeacherModel::two_neurons(m.intrinsic_dim(), t.angle, t.w_star, t.activation).map(Some)
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let manifold = cfg.manifold.ok_or_else(|| Error::InvalidConfig("a manifold is required".into()))?;
    if let Some(files) = &cfg.data {
        let train = read_points_csv(File::open(&files.train)?)?;
        let test = match &files.test {
            Some(p) => Some(read_points_csv(File::open(p)?)?),
            None => None,
        };
        for p in std::iter::once(&train).chain(test.as_ref()) {
            if p.dim() != manifold.ambient_dim() {
                return Err(Error::InvalidConfig(format!(
                    "data has {} columns but the manifold needs {}",
                    p.dim(),
                    manifold.ambient_dim()
                )));
            }
        }
        let teacher = teacher_model(cfg)?;
        let tb = cfg.teacher.as_ref().map_or(2.0, |t| t.teacher_beta);
        return Ok(Prepared { data: DataSet::new(train)?, test, teacher, teacher_beta: tb });
    }
    let t = cfg.teacher.as_ref().ok_or_else(|| Error::InvalidConfig("no data source".into()))?;
    let teacher = teacher_model(cfg)?.expect("teacher present");
    let lc = LangevinConfig {
        step: t.langevin.step,
        burn_in: t.langevin.burn_in,
        thin: t.langevin.thin,
        chains: t.langevin.chains,
        beta: t.teacher_beta,
    };
    let data = generate_dataset(&teacher, &manifold, t.n, &lc, derive_seed(seed, TRAIN_TAG))?;
    let test = if t.n_test > 0 {
        Some(generate_dataset(&teacher, &manifold, t.n_test, &lc, derive_seed(seed, TEST_TAG))?.into_points())
    } else {
        None
    };
    Ok(Prepared { data, test, teacher: Some(teacher), teacher_beta: t.teacher_beta })
}

fn resolve_out(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    let dir = opts.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("runs").join(cfg.mode.name()));
    std::fs::create_dir_all(&dir)?;
    let probe = dir.join(".write_probe");
    File::create(&probe).map_err(|e| Error::InvalidConfig(format!("output directory {} is not writable: {e}", dir.display())))?;
    std::fs::remove_file(&probe)?;
    Ok(dir)
}

/// Runs one experiment described by `cfg`, writing artifacts under the
/// output directory.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let out = resolve_out(cfg, opts)?;
    let seed = opts.seed.unwrap_or(cfg.seed);
    let log_every = opts.log_every.unwrap_or(cfg.log_every).max(1);
    std::fs::write(out.join("config.toml"), toml::to_string(cfg).map_err(|e| Error::InvalidConfig(e.to_string()))?)?;
    let mut summary = match cfg.mode {
        Mode::TeacherGen => teacher_gen(cfg, seed, &out)?,
        Mode::TrainDual => train_dual(cfg, seed, log_every, &out, opts.resume.as_deref())?,
        Mode::TrainSm => train_sm(cfg, seed, log_every, &out, opts.resume.as_deref())?,
        Mode::TrainMmd => train_mmd(cfg, seed, log_every, &out, opts.resume.as_deref())?,
        Mode::Pde1d => run_pde(cfg, log_every, &out)?,
        Mode::Sweep => sweep(cfg, opts, &out)?,
    };
    if opts.plot {
        if let Some(m) = &summary.metrics {
            plot::plot_metrics(m, &out)?;
        }
        for c in &summary.children {
            if let Some(m) = &c.metrics {
                plot::plot_metrics(m, &c.out_dir)?;
            }
        }
    }
    summary.out_dir = out;
    Ok(summary)
}

fn teacher_gen(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunSummary> {
    let p = prepare_data(cfg, seed)?;
    write_points_csv(p.data.points(), BufWriter::new(File::create(out.join("train.csv"))?))?;
    if let Some(t) = &p.test {
        write_points_csv(t, BufWriter::new(File::create(out.join("test.csv"))?))?;
    }
    if let Some(t) = &p.teacher {
        std::fs::write(out.join("teacher.json"), serde_json::to_string_pretty(t)?)?;
    }
    Ok(RunSummary { out_dir: out.to_path_buf(), metrics: None, records: 0, children: Vec::new() })
}

/// Opens the metrics stream: fresh, or continued after `resume_iter` with
/// later rows dropped.
fn open_metrics(path: &Path, header: &[&str], resume_iter: Option<u64>) -> Result<MetricsWriter<BufWriter<File>>> {
    match resume_iter {
        Some(it) if path.exists() => {
            let keep: Vec<String> = BufReader::new(File::open(path)?)
                .lines()
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .enumerate()
                .filter(|(i, l)| *i == 0 || l.split(',').next().and_then(|v| v.parse::<u64>().ok()).is_some_and(|v| v <= it))
                .map(|(_, l)| l)
                .collect();
            let mut f = File::create(path)?;
            for l in &keep {
                writeln!(f, "{l}")?;
            }
            let f = OpenOptions::new().append(true).open(path)?;
            Ok(MetricsWriter::append(BufWriter::new(f)))
        }
        _ => MetricsWriter::with_header(BufWriter::new(File::create(path)?), header),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint::load(path)
}

fn due(iteration: u64, every: u64, last: u64) -> bool {
    iteration.is_multiple_of(every) || iteration == last
}

/// Monitors against the teacher; NaN when no teacher or test set is known.
fn monitors<S: Energy>(p: &Prepared, manifold: &Manifold, student: &S) -> Result<(f64, f64)> {
    match (&p.teacher, &p.test) {
        (Some(t), Some(test)) => {
            let teacher = Scaled(p.teacher_beta, t);
            let (kl, _) = kl_estimate_tempered(test, student, 1.0, &teacher, 1.0)?;
            Ok((kl, sm_estimate(test, student, &teacher, manifold)))
        }
        _ => Ok((f64::NAN, f64::NAN)),
    }
}

fn feature_model(cfg: &ExperimentConfig) -> Result<(FeatureModel, &config::ModelSpec)> {
    let spec = cfg.model.as_ref().ok_or_else(|| Error::InvalidConfig("a [model] table is required".into()))?;
    let manifold = cfg.manifold.expect("validated");
    Ok((FeatureModel::new(manifold, spec.features)?, spec))
}

fn train_dual(cfg: &ExperimentConfig, seed: u64, log_every: u64, out: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    let p = prepare_data(cfg, seed)?;
    let (model, spec) = feature_model(cfg)?;
    let mut dcfg = cfg.dual.clone().expect("validated");
    dcfg.seed = seed;
    let state = match resume {
        Some(path) => match load_checkpoint(path)? {
            Checkpoint::TrainDual { state } => state,
            _ => return Err(Error::InvalidConfig("checkpoint was not written by train-dual".into())),
        },
        None => TrainerState::init(model, spec.m, spec.n_particles, &p.data, &dcfg)?,
    };
    let resume_iter = resume.map(|_| state.iteration);
    let metrics_path = out.join(METRICS_FILE);
    let mut w = open_metrics(&metrics_path, &METRICS_HEADER, resume_iter)?;
    let manifold = model.manifold;
    let beta = dcfg.beta;
    let total = dcfg.iterations;
    let mut trainer = DualTrainer::new(dcfg, p.data.clone(), state)?;
    let mut records = 0;
    let mut log = |t: &DualTrainer, w: &mut MetricsWriter<_>| -> Result<()> {
        let st = &t.state;
        let (kl, sm) = monitors(&p, &manifold, &Scaled(beta, &st.ensemble))?;
        w.write_row(st.iteration, &[t.cfg.time(st.iteration), t.cfg.rescaled_time(st.iteration), kl, sm, f1_norm(&st.ensemble, beta)])?;
        records += 1;
        Ok(())
    };
    if resume_iter.is_none() {
        log(&trainer, &mut w)?;
    }
    while trainer.state.iteration < total {
        trainer.step()?;
        let it = trainer.state.iteration;
        if due(it, log_every, total) {
            log(&trainer, &mut w)?;
        }
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it < total {
            checkpoint::save(&Checkpoint::TrainDual { state: trainer.state.clone() }, &out.join(CHECKPOINT_FILE))?;
        }
    }
    checkpoint::save(&Checkpoint::TrainDual { state: trainer.state }, &out.join(CHECKPOINT_FILE))?;
    Ok(RunSummary { out_dir: out.to_path_buf(), metrics: Some(metrics_path), records, children: Vec::new() })
}

fn train_sm(cfg: &ExperimentConfig, seed: u64, log_every: u64, out: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    let p = prepare_data(cfg, seed)?;
    let (model, spec) = feature_model(cfg)?;
    let mut scfg = cfg.sm.clone().expect("validated");
    scfg.seed = seed;
    let state = match resume {
        Some(path) => match load_checkpoint(path)? {
            Checkpoint::TrainSm { state } => state,
            _ => return Err(Error::InvalidConfig("checkpoint was not written by train-sm".into())),
        },
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            SmState { ensemble: FeatureEnsemble::random(model, spec.m, spec.weight_init, &mut rng)?, iteration: 0 }
        }
    };
    let resume_iter = resume.map(|_| state.iteration);
    let metrics_path = out.join(METRICS_FILE);
    let mut w = open_metrics(&metrics_path, &METRICS_HEADER, resume_iter)?;
    let manifold = model.manifold;
    let (beta, s, total) = (scfg.beta, scfg.s, scfg.iterations);
    let mut trainer = SmTrainer::new(scfg, p.data.clone(), state.ensemble)?;
    trainer.state.iteration = state.iteration;
    let mut records = 0;
    let mut log = |st: &SmState, w: &mut MetricsWriter<_>| -> Result<()> {
        let (kl, sm) = monitors(&p, &manifold, &Scaled(beta, &st.ensemble))?;
        let time = st.iteration as f64 * s;
        w.write_row(st.iteration, &[time, time, kl, sm, f1_norm(&st.ensemble, beta)])?;
        records += 1;
        Ok(())
    };
    if resume_iter.is_none() {
        log(&trainer.state, &mut w)?;
    }
    while trainer.state.iteration < total {
        trainer.step()?;
        let it = trainer.state.iteration;
        if due(it, log_every, total) {
            log(&trainer.state, &mut w)?;
        }
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it < total {
            checkpoint::save(&Checkpoint::TrainSm { state: trainer.state.clone() }, &out.join(CHECKPOINT_FILE))?;
        }
    }
    checkpoint::save(&Checkpoint::TrainSm { state: trainer.state }, &out.join(CHECKPOINT_FILE))?;
    Ok(RunSummary { out_dir: out.to_path_buf(), metrics: Some(metrics_path), records, children: Vec::new() })
}

/// Energy readout of an MMD flow as an [`Energy`].
pub struct MmdEnergy<'a> {
    pub particles: &'a Points,
    pub data: &'a Points,
    pub kernel: &'a Kernel,
    /// Multiplies the witness: `β / MMD` or `2 β̃`.
    pub scale: f64,
}

impl<'a> MmdEnergy<'a> {
    pub fn new(particles: &'a Points, data: &'a Points, kernel: &'a Kernel, cfg: &MmdConfig) -> Self {
        let scale = match cfg.variant {
            MmdVariant::Squared => 2.0 * cfg.beta,
            MmdVariant::Sqrt => {
                let m = mmd2(particles, data, kernel).max(0.0).sqrt();
                if m > crate::mmd::MMD_FLOOR {
                    cfg.beta / m
                } else {
                    f64::NAN
                }
            }
        };
        MmdEnergy { particles, data, kernel, scale }
    }
}

impl Energy for MmdEnergy<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.scale * witness_and_grad(x, self.particles, self.data, self.kernel, &mut g)
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) {
        witness_and_grad(x, self.particles, self.data, self.kernel, out);
        out.iter_mut().for_each(|g| *g *= self.scale);
    }
}

fn train_mmd(cfg: &ExperimentConfig, seed: u64, log_every: u64, out: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    let p = prepare_data(cfg, seed)?;
    let spec = cfg.mmd.clone().expect("validated");
    let manifold = cfg.manifold.expect("validated");
    let mcfg = MmdConfig { variant: spec.variant, beta: spec.beta, s: spec.s, iterations: spec.iterations, seed };
    let kernel = match spec.kernel {
        KernelSpec::ArcCosine1 => Kernel::ArcCosine1 { ambient: manifold.ambient_dim() },
        KernelSpec::MonteCarlo { features } => {
            let model = FeatureModel::new(manifold, crate::model::FeatureMap::relu())?;
            Kernel::monte_carlo(model, features, &mut item_rng(seed, 3))
        }
    };
    let mut state = match resume {
        Some(path) => match load_checkpoint(path)? {
            Checkpoint::TrainMmd { state } => state,
            _ => return Err(Error::InvalidConfig("checkpoint was not written by train-mmd".into())),
        },
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut particles = Points::zeros(spec.n_particles, manifold.ambient_dim());
            for x in particles.rows_mut() {
                manifold.sample_base(&mut rng, x);
            }
            MmdState { particles, iteration: 0, rng }
        }
    };
    let resume_iter = resume.map(|_| state.iteration);
    let metrics_path = out.join(METRICS_FILE);
    let mut w = open_metrics(&metrics_path, &["iter", "time", "rescaled_time", "kl", "sm", "mmd2"], resume_iter)?;
    let flow = MmdFlow::new(mcfg.clone(), kernel, manifold, p.data.clone())?;
    let total = mcfg.iterations;
    let mut records = 0;
    let mut log = |st: &MmdState, w: &mut MetricsWriter<_>| -> Result<()> {
        let energy = MmdEnergy::new(&st.particles, p.data.points(), &flow.kernel, &mcfg);
        let (kl, sm) = if energy.scale.is_finite() { monitors(&p, &manifold, &energy)? } else { (f64::NAN, f64::NAN) };
        let time = st.iteration as f64 * mcfg.s;
        w.write_row(st.iteration, &[time, time, kl, sm, flow.mmd2(&st.particles)])?;
        records += 1;
        Ok(())
    };
    if resume_iter.is_none() {
        log(&state, &mut w)?;
    }
    while state.iteration < total {
        let step_seed: u64 = state.rng.random();
        flow.step(&mut state.particles, step_seed).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { what, iteration: state.iteration },
            other => other,
        })?;
        state.iteration += 1;
        if due(state.iteration, log_every, total) {
            log(&state, &mut w)?;
        }
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 && state.iteration < total {
            checkpoint::save(&Checkpoint::TrainMmd { state: state.clone() }, &out.join(CHECKPOINT_FILE))?;
        }
    }
    checkpoint::save(&Checkpoint::TrainMmd { state }, &out.join(CHECKPOINT_FILE))?;
    Ok(RunSummary { out_dir: out.to_path_buf(), metrics: Some(metrics_path), records, children: Vec::new() })
}

#[derive(Serialize)]
struct DensityRow {
    x: f64,
    nu: f64,
    nu_p: f64,
    gamma_minus: f64,
    energy: f64,
}

fn run_pde(cfg: &ExperimentConfig, log_every: u64, out: &Path) -> Result<RunSummary> {
    let pcfg = cfg.pde1d.clone().expect("validated");
    let metrics_path = out.join(METRICS_FILE);
    let mut w = MetricsWriter::with_header(BufWriter::new(File::create(&metrics_path)?), &PDE_HEADER)?;
    let mut last = None;
    let records = pde_run(pcfg, log_every, |r, solver| {
        w.write_row(r.step, &[r.time, r.rescaled_time, r.kl_ebm, r.kl_nu, r.sm, r.gamma_mass])?;
        last = Some((solver.grid_points(), solver.fields.clone(), solver.energy()));
        Ok(())
    })?;
    if let Some((xs, f, e)) = last {
        let mut d = csv::Writer::from_path(out.join("densities.csv"))?;
        for (i, x) in xs.iter().enumerate() {
            d.serialize(DensityRow { x: *x, nu: f.nu[i], nu_p: f.nu_p[i], gamma_minus: f.gamma_minus[i], energy: e[i] })?;
        }
        d.flush()?;
    }
    Ok(RunSummary { out_dir: out.to_path_buf(), metrics: Some(metrics_path), records: records.len(), children: Vec::new() })
}

/// Runs every `(alpha, seed)` pair of the sweep concurrently, each in its
/// own subdirectory.
fn sweep(cfg: &ExperimentConfig, opts: &RunOptions, out: &Path) -> Result<RunSummary> {
    let sw = cfg.sweep.clone().expect("validated");
    let alphas: Vec<Option<f64>> = if sw.alpha.is_empty() { vec![None] } else { sw.alpha.iter().copied().map(Some).collect() };
    let jobs: Vec<(Option<f64>, u64)> = alphas.iter().flat_map(|a| sw.seeds.iter().map(move |s| (*a, *s))).collect();
    let children: Vec<Result<RunSummary>> = jobs
        .par_iter()
        .map(|&(alpha, seed)| {
            let mut c = cfg.clone();
            c.mode = sw.mode;
            c.sweep = None;
            let mut name = format!("seed_{seed}");
            if let Some(a) = alpha {
                name = format!("alpha_{a}_{name}");
                if let Some(d) = c.dual.as_mut() {
                    d.alpha = a;
                }
                if let Some(p) = c.pde1d.as_mut() {
                    p.alpha = a;
                }
            }
            if let Some(budget) = sw.rescaled_budget {
                if let Some(d) = c.dual.as_mut() {
                    d.iterations = (budget / (d.s * d.alpha.max(1.0))).round() as u64;
                }
                if let Some(p) = c.pde1d.as_mut() {
                    p.total_time = budget / p.alpha.max(1.0);
                }
            }
            let child = RunOptions { out: Some(out.join(name)), seed: Some(seed), log_every: opts.log_every, resume: None, plot: false };
            run_experiment(&c, &child)
        })
        .collect();
    let children = children.into_iter().collect::<Result<Vec<_>>>()?;
    let records = children.iter().map(|c| c.records).sum();
    Ok(RunSummary { out_dir: out.to_path_buf(), metrics: None, records, children })
}
