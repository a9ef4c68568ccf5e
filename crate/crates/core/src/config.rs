//! Experiment configuration: TOML with `include` files merged underneath,
//! then `SDMP_SEED` / `SDMP_THREADS` from the environment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Acquisition, DatasetManifest, GeometrySpec};
use crate::decomp::DecompTrainConfig;
use crate::denoiser::DenoiserTrainConfig;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::pipeline::Method;
use crate::solver::SolverConfig;
use crate::spectral::{MassAttenuationTable, SpectralModel, Spectrum};

pub const ENV_SEED: &str = "SDMP_SEED";
pub const ENV_THREADS: &str = "SDMP_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub views: usize,
    pub kvp_switching: bool,
    pub photons: f64,
    pub noiseless: bool,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            views: 180,
            kvp_switching: true,
            photons: 2e6,
            noiseless: false,
        }
    }
}

/// Optional file overrides for the spectral model; missing entries fall
/// back to the built-in spectra and tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectraConfig {
    pub low: Option<PathBuf>,
    pub high: Option<PathBuf>,
    pub bone_table: Option<PathBuf>,
    pub water_table: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub base_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 40,
            n_test: 20,
            base_seed: 1000,
        }
    }
}

/// Where the decomposer's `(y, p*)` pairs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    /// Both energies of the simulated scans, paired by ray index.
    Measured,
    /// `y = h(p*)` on every label ray.
    Labels,
    /// Label rays with Poisson counts at the acquisition's photon level.
    NoisyLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompSection {
    pub pairs: PairSource,
    /// Keep every `stride`-th ray.
    pub stride: usize,
    pub train: DecompTrainConfig,
}

impl Default for DecompSection {
    fn default() -> Self {
        DecompSection {
            pairs: PairSource::Labels,
            stride: 1,
            train: DecompTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub schedule: ScheduleConfig,
    pub train: DenoiserTrainConfig,
}

/// Pretrained networks to load instead of training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointConfig {
    pub decomp: Option<PathBuf>,
    pub bone: Option<PathBuf>,
    pub water: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub angles: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub xis: Vec<f64>,
    pub t_samples: Vec<usize>,
    /// Independent repetitions; each draws fresh test phantoms and noise.
    pub seeds: Vec<u64>,
    /// Test records per sweep point (the first ones of the test split).
    pub n_records: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            angles: vec![60, 120, 180, 240, 300, 360],
            lambdas: vec![1e-4, 1e-3, 0.1, 1.0],
            xis: vec![0.0, 0.2, 0.8, 1.0],
            t_samples: vec![10, 100, 500, 1000],
            seeds: vec![0, 1, 2],
            n_records: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads; `None` lets rayon decide.
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
    pub geometry: GeometrySpec,
    pub acquisition: AcquisitionConfig,
    pub spectra: SpectraConfig,
    pub dataset: DatasetConfig,
    pub decomp: DecompSection,
    pub denoiser: DenoiserSection,
    pub solver: SolverConfig,
    pub checkpoints: CheckpointConfig,
    /// Methods scored by the evaluation run.
    pub methods: Vec<Method>,
    pub sweep: SweepConfig,
    /// Write a PNG montage per test record.
    pub montages: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            threads: None,
            output_dir: PathBuf::from("runs/default"),
            geometry: GeometrySpec::desk(128),
            acquisition: AcquisitionConfig::default(),
            spectra: SpectraConfig::default(),
            dataset: DatasetConfig::default(),
            decomp: DecompSection::default(),
            denoiser: DenoiserSection::default(),
            solver: SolverConfig::default(),
            checkpoints: CheckpointConfig::default(),
            methods: vec![Method::Fbp, Method::DecompMod, Method::Oracle],
            sweep: SweepConfig::default(),
            montages: true,
        }
    }
}

/// Recursively merges `over` into `base`; tables merge key by key, anything
/// else is replaced.
pub fn deep_merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn read_table(path: &Path, depth: usize) -> Result<toml::Table> {
    if depth > 16 {
        return Err(Error::Config(format!("include chain too deep at {}", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let dir = &parent.canonicalize()?;
    absolutize_paths(&mut table, dir);
    let includes = match table.remove("include") {
        None => vec![],
        Some(toml::Value::String(s)) => vec![s],
        Some(toml::Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                other => Err(Error::Config(format!("{}: include entries must be strings, got {other}", path.display()))),
            })
            .collect::<Result<_>>()?,
        Some(other) => return Err(Error::Config(format!("{}: bad include value {other}", path.display()))),
    };
    let mut merged = toml::Table::new();
    for inc in includes {
        deep_merge(&mut merged, read_table(&dir.join(inc), depth + 1)?);
    }
    deep_merge(&mut merged, table);
    Ok(merged)
}

/// Relative file paths are relative to the file that names them.
fn absolutize_paths(table: &mut toml::Table, dir: &Path) {
    let fix = |v: &mut toml::Value| {
        if let toml::Value::String(s) = v {
            if Path::new(s.as_str()).is_relative() {
                *s = dir.join(&*s).to_string_lossy().into_owned();
            }
        }
    };
    if let Some(v) = table.get_mut("output_dir") {
        fix(v);
    }
    for section in ["spectra", "checkpoints"] {
        if let Some(toml::Value::Table(sp)) = table.get_mut(section) {
            for (_, v) in sp.iter_mut() {
                fix(v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Loads a config file with its includes and environment overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let table = read_table(path.as_ref(), 0)?;
        let mut cfg = Self::from_table(table)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(s) = get(ENV_SEED) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_SEED}=`{s}` is not an unsigned integer")))?;
        }
        if let Some(s) = get(ENV_THREADS) {
            let n: usize = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_THREADS}=`{s}` is not an unsigned integer")))?;
            self.threads = Some(n);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sweep;
        if s.angles.is_empty() || s.lambdas.is_empty() || s.xis.is_empty() || s.t_samples.is_empty() || s.seeds.is_empty() {
            return Err(Error::Config("sweep axes must be non-empty".into()));
        }
        if s.n_records == 0 {
            return Err(Error::Config("sweep.n_records must be at least 1".into()));
        }
        if s.angles.iter().any(|&a| a < 2) {
            return Err(Error::Config("every sweep angle count must be at least 2".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.dataset.n_test == 0 {
            return Err(Error::Config("dataset.n_test must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must name at least one method".into()));
        }
        let (sp, ck) = (&self.spectra, &self.checkpoints);
        for p in [&sp.low, &sp.high, &sp.bone_table, &sp.water_table, &ck.decomp, &ck.bone, &ck.water].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        let sched = self.denoiser.schedule.build()?;
        self.solver.validate(&sched)?;
        self.acquisition().scan()?;
        Ok(())
    }

    /// Sizes the global rayon pool once; later calls are no-ops.
    pub fn init_threads(&self) {
        if let Some(n) = self.threads {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }

    pub fn acquisition(&self) -> Acquisition {
        let model_labels = |p: &Option<PathBuf>, d: &str| p.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| d.to_string());
        Acquisition {
            geometry: self.geometry.clone(),
            views_per_channel: self.acquisition.views,
            kvp_switching: self.acquisition.kvp_switching,
            photons: self.acquisition.photons,
            noiseless: self.acquisition.noiseless,
            spectra: [model_labels(&self.spectra.low, "90kVp"), model_labels(&self.spectra.high, "150kVp")],
        }
    }

    pub fn manifest(&self) -> DatasetManifest {
        let d = &self.dataset;
        DatasetManifest::torso(self.acquisition(), d.n_train, d.n_test, d.base_seed.wrapping_add(self.seed))
    }

    pub fn spectral_model(&self) -> Result<SpectralModel> {
        let sp = &self.spectra;
        if sp.low.is_none() && sp.high.is_none() && sp.bone_table.is_none() && sp.water_table.is_none() {
            return Ok(SpectralModel::reference());
        }
        let reference = SpectralModel::reference();
        let low = match &sp.low {
            Some(p) => Spectrum::from_file(p)?,
            None => reference.spectra[0].clone(),
        };
        let high = match &sp.high {
            Some(p) => Spectrum::from_file(p)?,
            None => reference.spectra[1].clone(),
        };
        let bone = match &sp.bone_table {
            Some(p) => MassAttenuationTable::from_file(p)?,
            None => MassAttenuationTable::cortical_bone(),
        };
        let water = match &sp.water_table {
            Some(p) => MassAttenuationTable::from_file(p)?,
            None => MassAttenuationTable::water(),
        };
        SpectralModel::new([low, high], [bone, water])
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        self.denoiser.schedule.build()
    }
}
