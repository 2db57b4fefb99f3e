//! Run configuration (TOML). Every section is optional; missing keys take
//! the defaults below, unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dcles::analysis::GOLDEN;
use dcles::closure::CnnArchitecture;
use dcles::filters::FilterKind;
use dcles::grid::Precision;
use dcles::les::Formulation;
use dcles::operators::BodyForce;
use dcles::pipeline::{DatasetConfig, Split};
use dcles::timestepping::{Scheme, StepControl};
use dcles::training::{LossKind, TrainConfig};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridSection,
    pub flow: FlowSection,
    pub ic: IcSection,
    pub time: TimeSection,
    pub filters: FilterSection,
    pub dataset: DatasetSection,
    pub closure: ClosureSection,
    pub training: TrainingSection,
    pub les: LesSection,
    pub analysis: AnalysisSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub dim: usize,
    /// DNS cells per axis.
    pub n: usize,
    pub length: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { dim: 2, n: 256, length: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub reynolds: f64,
    pub force: BodyForce,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection { reynolds: 2000.0, force: BodyForce::None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcSection {
    pub peak_wavenumber: f64,
    pub seeds: Vec<u64>,
}

impl Default for IcSection {
    fn default() -> Self {
        IcSection { peak_wavenumber: 5.0, seeds: (0..5).collect() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSection {
    pub t_burn: f64,
    pub t_end: f64,
    /// CFL number of the burn-in.
    pub cfl: f64,
    /// Fixed DNS step while recording.
    pub dt: f64,
    pub scheme: Scheme,
}

impl Default for TimeSection {
    fn default() -> Self {
        TimeSection { t_burn: 0.5, t_end: 1.0, cfl: 0.85, dt: 1e-3, scheme: Scheme::Wray3 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub kinds: Vec<FilterKind>,
    pub coarse: Vec<usize>,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection { kinds: vec![FilterKind::Fa, FilterKind::Va], coarse: vec![32] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub stride: usize,
    pub splits: [usize; 3],
    pub split_seed: u64,
    pub precision: Precision,
    /// Existing dataset read by `train` and `les`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Coarse size used by `train` and `les`; defaults to the first one in the dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarse: Option<usize>,
    pub filter: FilterKind,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { stride: 10, splits: [3, 1, 1], split_seed: 0, precision: Precision::Double, path: None, coarse: None, filter: FilterKind::Fa }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ClosureKind {
    #[default]
    None,
    Smagorinsky,
    Cnn,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClosureSection {
    pub kind: ClosureKind,
    /// Smagorinsky coefficient.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    /// CNN parameter file; `train` starts from it when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
    pub init_seed: u64,
    pub radius: usize,
    pub width: usize,
    pub hidden: usize,
}

impl Default for ClosureSection {
    fn default() -> Self {
        ClosureSection { kind: ClosureKind::None, theta: None, params: None, init_seed: 0, radius: 2, width: 24, hidden: 4 }
    }
}

impl ClosureSection {
    pub fn architecture(&self, dim: usize) -> CnnArchitecture {
        CnnArchitecture::uniform(dim, self.radius, self.width, self.hidden)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub prior: TrainConfig,
    pub post: TrainConfig,
    /// Candidate count of the Smagorinsky coefficient search over [0, 0.3].
    pub smagorinsky_candidates: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection { prior: TrainConfig::default(), post: TrainConfig::post(), smagorinsky_candidates: 301 }
    }
}

impl TrainingSection {
    pub fn for_loss(&self, loss: LossKind) -> TrainConfig {
        let mut c = match loss {
            LossKind::Prior => self.prior.clone(),
            LossKind::Post => self.post.clone(),
        };
        c.loss = loss;
        c
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LesSection {
    pub formulation: Formulation,
    /// Simulated time; defaults to the span of the reference trajectory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    /// Step control; defaults to the dataset snapshot step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control: Option<StepControl>,
    pub split: Split,
    /// Index of the trajectory within the split.
    pub trajectory: usize,
    /// Field output every this many steps; 0 writes only the final state.
    pub save_every: usize,
}

impl Default for LesSection {
    fn default() -> Self {
        LesSection { formulation: Formulation::Dcf, t_end: None, control: None, split: Split::Test, trajectory: 0, save_every: 10 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Ratio between successive spectrum shells.
    pub ratio: f64,
    /// Field files, or directories whose field files are all analyzed.
    pub inputs: Vec<PathBuf>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection { ratio: GOLDEN, inputs: Vec::new() }
    }
}

impl RunConfig {
    /// Parses `path`; relative paths inside are taken from the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.dataset.path.as_mut() {
            abs(p);
        }
        if let Some(p) = cfg.closure.params.as_mut() {
            abs(p);
        }
        cfg.analysis.inputs.iter_mut().for_each(abs);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            dim: self.grid.dim,
            dns_n: self.grid.n,
            length: self.grid.length,
            reynolds: self.flow.reynolds,
            force: self.flow.force,
            peak_wavenumber: self.ic.peak_wavenumber,
            seeds: self.ic.seeds.clone(),
            t_burn: self.time.t_burn,
            t_end: self.time.t_end,
            cfl: self.time.cfl,
            dt: self.time.dt,
            stride: self.dataset.stride,
            coarse: self.filters.coarse.clone(),
            filters: self.filters.kinds.clone(),
            precision: self.dataset.precision,
            scheme: self.time.scheme,
            splits: self.dataset.splits,
            split_seed: self.dataset.split_seed,
        }
    }

    /// `--seed`: shifts the initial-condition seeds to `seed, seed + 1, ...`
    /// and sets the training and initialization seeds.
    pub fn override_seed(&mut self, seed: u64) {
        let n = self.ic.seeds.len() as u64;
        self.ic.seeds = (seed..seed + n).collect();
        self.training.prior.seed = seed;
        self.training.post.seed = seed;
        self.closure.init_seed = seed;
        self.dataset.split_seed = seed;
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        match &self.dataset.path {
            Some(p) if p.is_dir() => Ok(p),
            Some(p) => bail!("dataset directory {} does not exist", p.display()),
            None => bail!("dataset.path is required for this command"),
        }
    }

    pub fn params_path(&self) -> Result<Option<&Path>> {
        match &self.closure.params {
            Some(p) if p.is_file() => Ok(Some(p)),
            Some(p) => bail!("closure parameter file {} does not exist", p.display()),
            None => Ok(None),
        }
    }

    /// Checks that do not need any input files.
    pub fn validate(&self) -> Result<()> {
        self.dataset_config().validate()?;
        for t in [&self.training.prior, &self.training.post] {
            t.validate()?;
        }
        if let Some(th) = self.closure.theta {
            if !(0.0..=1.0).contains(&th) {
                bail!("closure.theta must lie in [0, 1], got {th}");
            }
        }
        self.closure.architecture(self.grid.dim).validate()?;
        if self.training.smagorinsky_candidates < 2 {
            bail!("training.smagorinsky_candidates must be at least 2");
        }
        if !(self.analysis.ratio > 1.0) {
            bail!("analysis.ratio must exceed 1");
        }
        if let Some(c) = self.les.control {
            c.validate()?;
        }
        if let Some(t) = self.les.t_end {
            if !(t > 0.0) {
                bail!("les.t_end must be positive");
            }
        }
        Ok(())
    }
}
