//! TOML experiment description.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dual::DualConfig;
use crate::error::{Error, Result};
use crate::geometry::Manifold;
use crate::mmd::MmdVariant;
use crate::model::{Activation, FeatureMap, WeightInit};
use crate::pde1d::PdeConfig;
use crate::sm::SmConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TeacherGen,
    TrainDual,
    TrainSm,
    TrainMmd,
    Pde1d,
    Sweep,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::TeacherGen => "teacher-gen",
            Mode::TrainDual => "train-dual",
            Mode::TrainSm => "train-sm",
            Mode::TrainMmd => "train-mmd",
            Mode::Pde1d => "pde1d",
            Mode::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_log_every")]
    pub log_every: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Write a checkpoint every this many iterations (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub manifold: Option<Manifold>,
    #[serde(default)]
    pub teacher: Option<TeacherSpec>,
    #[serde(default)]
    pub data: Option<DataFiles>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub dual: Option<DualConfig>,
    #[serde(default)]
    pub sm: Option<SmConfig>,
    #[serde(default)]
    pub mmd: Option<MmdSpec>,
    #[serde(default)]
    pub pde1d: Option<PdeConfig>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn d_log_every() -> u64 {
    100
}

/// Planted two-neuron teacher and its Langevin sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    /// Angle between the two teacher neurons, radians.
    pub angle: f64,
    pub w_star: f64,
    #[serde(default)]
    pub activation: Activation,
    /// Inverse temperature of the teacher law `exp(-teacher_beta f*)`. The
    /// default puts the planted energy `teacher_beta f*` (F₁ norm
    /// `2 |w*|` at `w* = -10`) exactly on the student ball of radius 20.
    #[serde(default = "two")]
    pub teacher_beta: f64,
    /// Training samples.
    pub n: usize,
    /// Test samples used by the monitors.
    #[serde(default = "d_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub langevin: LangevinSpec,
}

fn two() -> f64 {
    2.0
}

fn d_n_test() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangevinSpec {
    #[serde(default = "d_step")]
    pub step: f64,
    #[serde(default = "d_burn_in")]
    pub burn_in: u64,
    #[serde(default = "d_thin")]
    pub thin: u64,
    #[serde(default = "d_chains")]
    pub chains: usize,
}

fn d_step() -> f64 {
    0.005
}
fn d_burn_in() -> u64 {
    50_000
}
fn d_thin() -> u64 {
    50
}
fn d_chains() -> usize {
    64
}

impl Default for LangevinSpec {
    fn default() -> Self {
        LangevinSpec { step: d_step(), burn_in: d_burn_in(), thin: d_thin(), chains: d_chains() }
    }
}

/// Data read from CSV files instead of sampled from a teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub train: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub m: usize,
    /// Particle count.
    #[serde(rename = "N", default)]
    pub n_particles: usize,
    #[serde(default = "d_features")]
    pub features: FeatureMap,
    #[serde(default)]
    pub weight_init: WeightInit,
}

fn d_features() -> FeatureMap {
    FeatureMap::relu()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    ArcCosine1,
    /// Random-feature kernel with `M` uniform ReLU neurons.
    MonteCarlo {
        #[serde(rename = "M")]
        features: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmdSpec {
    pub variant: MmdVariant,
    #[serde(alias = "beta_tilde")]
    pub beta: f64,
    pub s: f64,
    #[serde(rename = "T")]
    pub iterations: u64,
    #[serde(rename = "N")]
    pub n_particles: usize,
    #[serde(default = "d_kernel")]
    pub kernel: KernelSpec,
}

fn d_kernel() -> KernelSpec {
    KernelSpec::ArcCosine1
}

/// Independent seeded copies of one experiment, run concurrently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    /// Optional grid over the timescale ratio; each value gets its own runs.
    #[serde(default)]
    pub alpha: Vec<f64>,
    /// Gives every run the same budget in rescaled time `t·max(α, 1)`.
    #[serde(default)]
    pub rescaled_budget: Option<f64>,
}

/// Validation failure pinned to a key.
struct Problem {
    section: &'static str,
    key: &'static str,
    message: String,
}

fn problem(section: &'static str, key: &'static str, message: impl Into<String>) -> Problem {
    Problem { section, key, message: message.into() }
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the line of the offending key.
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        if let Err(p) = cfg.check() {
            let at = match locate_key(text, p.section, p.key) {
                Some(line) => format!("line {line}: "),
                None => String::new(),
            };
            let key = if p.section.is_empty() { p.key.to_string() } else { format!("{}.{}", p.section, p.key) };
            return Err(Error::Parse { path: path.to_path_buf(), message: format!("{at}{key}: {}", p.message) });
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, path)
    }

    /// Same checks as parsing, for configs built in code.
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|p| Error::InvalidConfig(format!("{}.{}: {}", p.section, p.key, p.message)))
    }

    fn check(&self) -> std::result::Result<(), Problem> {
        self.check_mode(self.mode)
    }

    fn check_mode(&self, mode: Mode) -> std::result::Result<(), Problem> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if self.log_every == 0 {
            return Err(problem("", "log_every", "must be at least 1"));
        }
        let needs_manifold = !matches!(mode, Mode::Pde1d | Mode::Sweep);
        if needs_manifold {
            let m = self.manifold.ok_or_else(|| problem("manifold", "kind", "a [manifold] table is required"))?;
            match m {
                Manifold::Sphere { ambient } if ambient < 2 => {
                    return Err(problem("manifold", "ambient", "sphere needs ambient >= 2"));
                }
                Manifold::Euclidean { dim: 0 } => return Err(problem("manifold", "dim", "must be positive")),
                _ => {}
            }
        }
        if let Some(t) = &self.teacher {
            if !self.manifold.is_some_and(|m| m.is_sphere()) {
                return Err(problem("teacher", "angle", "teacher models live on spheres"));
            }
            if !t.angle.is_finite() {
                return Err(problem("teacher", "angle", "must be finite"));
            }
            if !t.w_star.is_finite() {
                return Err(problem("teacher", "w_star", "must be finite"));
            }
            if !pos(t.teacher_beta) {
                return Err(problem("teacher", "teacher_beta", "must be positive"));
            }
            if t.n == 0 {
                return Err(problem("teacher", "n", "must be positive"));
            }
            if !pos(t.langevin.step) {
                return Err(problem("langevin", "step", "must be positive"));
            }
            if t.langevin.chains == 0 {
                return Err(problem("langevin", "chains", "must be positive"));
            }
            if t.langevin.thin == 0 {
                return Err(problem("langevin", "thin", "must be positive"));
            }
        }
        let needs_data = matches!(mode, Mode::TrainDual | Mode::TrainSm | Mode::TrainMmd);
        if mode == Mode::TeacherGen && self.teacher.is_none() {
            return Err(problem("teacher", "n", "teacher-gen needs a [teacher] table"));
        }
        if needs_data && self.teacher.is_none() && self.data.is_none() {
            return Err(problem("data", "train", "training needs a [teacher] or a [data] table"));
        }
        if matches!(mode, Mode::TrainDual | Mode::TrainSm) {
            let model = self.model.as_ref().ok_or_else(|| problem("model", "m", "a [model] table is required"))?;
            if model.m == 0 {
                return Err(problem("model", "m", "must be positive"));
            }
            if let Some(man) = self.manifold {
                match (man, model.features) {
                    (Manifold::Torus, FeatureMap::Ridge { .. }) => {
                        return Err(problem("model", "features", "ridge features need a sphere or Euclidean space"));
                    }
                    (Manifold::Sphere { .. } | Manifold::Euclidean { .. }, FeatureMap::PeriodicGaussian { .. }) => {
                        return Err(problem("model", "features", "periodic features need the torus"));
                    }
                    _ => {}
                }
            }
            if let FeatureMap::PeriodicGaussian { width, modes } = model.features {
                if !pos(width) || modes == 0 {
                    return Err(problem("model", "features", "periodic features need width > 0 and modes >= 1"));
                }
            }
        }
        match mode {
            Mode::TrainDual => {
                let d = self.dual.as_ref().ok_or_else(|| problem("dual", "alpha", "a [dual] table is required"))?;
                if !pos(d.alpha) {
                    return Err(problem("dual", "alpha", format!("must be positive, got {}", d.alpha)));
                }
                if !pos(d.s) {
                    return Err(problem("dual", "s", format!("must be positive, got {}", d.s)));
                }
                if !pos(d.beta) {
                    return Err(problem("dual", "beta", format!("must be positive, got {}", d.beta)));
                }
                if !(0.0..=1.0).contains(&d.p_r) {
                    return Err(problem("dual", "p_r", format!("must lie in [0, 1], got {}", d.p_r)));
                }
                if d.alpha_prime.is_some_and(|a| !(a >= 0.0)) {
                    return Err(problem("dual", "alpha_prime", "must be nonnegative"));
                }
                if self.model.as_ref().is_some_and(|m| m.n_particles == 0) {
                    return Err(problem("model", "N", "train-dual needs N >= 1 particles"));
                }
            }
            Mode::TrainSm => {
                let s = self.sm.as_ref().ok_or_else(|| problem("sm", "s", "a [sm] table is required"))?;
                if !pos(s.s) {
                    return Err(problem("sm", "s", format!("must be positive, got {}", s.s)));
                }
                if !pos(s.beta) {
                    return Err(problem("sm", "beta", format!("must be positive, got {}", s.beta)));
                }
                if self.model.as_ref().is_some_and(|m| !m.features.is_smooth()) {
                    return Err(problem("model", "features", "score matching needs a smooth activation"));
                }
            }
            Mode::TrainMmd => {
                let k = self.mmd.as_ref().ok_or_else(|| problem("mmd", "variant", "a [mmd] table is required"))?;
                if !pos(k.s) {
                    return Err(problem("mmd", "s", format!("must be positive, got {}", k.s)));
                }
                if !pos(k.beta) {
                    return Err(problem("mmd", "beta", format!("must be positive, got {}", k.beta)));
                }
                if k.n_particles == 0 {
                    return Err(problem("mmd", "N", "must be positive"));
                }
                if !self.manifold.is_some_and(|m| m.is_sphere()) {
                    return Err(problem("manifold", "kind", "the MMD flow runs on spheres"));
                }
                if let KernelSpec::MonteCarlo { features: 0 } = k.kernel {
                    return Err(problem("mmd", "kernel", "M must be positive"));
                }
            }
            Mode::Pde1d => {
                let p = self.pde1d.as_ref().ok_or_else(|| problem("pde1d", "alpha", "a [pde1d] table is required"))?;
                p.validate().map_err(|e| problem("pde1d", pde_key(&e.to_string()), e.to_string()))?;
            }
            Mode::Sweep => {
                let sw = self.sweep.as_ref().ok_or_else(|| problem("sweep", "mode", "a [sweep] table is required"))?;
                if matches!(sw.mode, Mode::Sweep | Mode::TeacherGen) {
                    return Err(problem("sweep", "mode", "sweeps run a training mode or pde1d"));
                }
                if sw.seeds.is_empty() {
                    return Err(problem("sweep", "seeds", "list at least one seed"));
                }
                if sw.alpha.iter().any(|a| !pos(*a)) {
                    return Err(problem("sweep", "alpha", "values must be positive"));
                }
                if sw.rescaled_budget.is_some_and(|b| !pos(b)) {
                    return Err(problem("sweep", "rescaled_budget", "must be positive"));
                }
                if (!sw.alpha.is_empty() || sw.rescaled_budget.is_some()) && !matches!(sw.mode, Mode::TrainDual | Mode::Pde1d) {
                    return Err(problem("sweep", "alpha", "an alpha grid needs train-dual or pde1d"));
                }
                self.check_mode(sw.mode)?;
            }
            Mode::TeacherGen => {}
        }
        Ok(())
    }
}

fn pde_key(message: &str) -> &'static str {
    for key in ["grid", "delta", "p", "alpha_prime", "T", "gamma0"] {
        if message.contains(&format!(": {key} ")) || message.contains(&format!(" {key} must")) {
            return key;
        }
    }
    "alpha"
}

/// 1-based line of `key = ...` inside `[section]` (or a dotted/nested table
/// ending in `section`); top level when `section` is empty.
pub fn locate_key(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section || current.ends_with(&format!(".{section}")) {
                header_line = Some(i + 1);
            }
            continue;
        }
        let in_section = if section.is_empty() {
            current.is_empty()
        } else {
            current == section || current.ends_with(&format!(".{section}"))
        };
        if in_section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim().trim_matches('"') == key {
                    return Some(i + 1);
                }
            }
        }
    }
    header_line
}
