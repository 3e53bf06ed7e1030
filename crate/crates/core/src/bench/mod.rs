//! Experiment harness: label-ratio sweeps over cross-validation folds, the
//! ablation and sensitivity studies, evaluation and single-cell forecasts.

mod baselines;
mod dataset;
pub mod report;
mod run;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionConfig;
use crate::error::{bail_arg, Error, Result};
use crate::graphssl::NgmConfig;
use crate::nn::TrainConfig;
use crate::synthgen::SynthWorldConfig;

pub use baselines::{ModeBaseline, RandomBaseline};
pub use dataset::{load_dataset, Dataset};
pub use run::{
    evaluate, forecast, job_seed, run_ablation, run_job, run_sensitivity, run_sweep, train_method, Evaluation, Forecast,
    Job, TrainedModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Random,
    Mode,
    Snn,
    Lp,
    Ls,
    LpDssl,
    NgmNatural,
    Surconfort,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Random,
        Method::Mode,
        Method::Snn,
        Method::Lp,
        Method::Ls,
        Method::LpDssl,
        Method::NgmNatural,
        Method::Surconfort,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Mode => "mode",
            Method::Snn => "snn",
            Method::Lp => "lp",
            Method::Ls => "ls",
            Method::LpDssl => "lp-dssl",
            Method::NgmNatural => "ngm-natural",
            Method::Surconfort => "surconfort",
        }
    }

    /// Display name, protocol and graph columns of the comparison table.
    fn table_row(self) -> (&'static str, &'static str, &'static str) {
        match self {
            Method::Random => ("Random", "-", "-"),
            Method::Mode => ("MODE", "stats.", "-"),
            Method::Snn => ("SNN", "SL", "-"),
            Method::Lp => ("LP", "SSL", "natural"),
            Method::Ls => ("LS", "SSL", "natural"),
            Method::LpDssl => ("LP-DSSL", "SSL", "descriptor"),
            Method::NgmNatural => ("NGM", "SSL", "natural"),
            Method::Surconfort => ("SURCONFORT", "SSL", "rail"),
        }
    }

    /// Whether training produces a network checkpoint.
    pub fn is_neural(self) -> bool {
        matches!(
            self,
            Method::Snn | Method::LpDssl | Method::NgmNatural | Method::Surconfort
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidArgument(format!("unknown method `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SynthWorldConfig),
    Csv(CsvSource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthWorldConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub stations: PathBuf,
    pub edges: PathBuf,
    pub reports: PathBuf,
    #[serde(default)]
    pub holidays: Option<PathBuf>,
    /// Per-cell ground truth, for evaluation against the full field.
    #[serde(default)]
    pub truth: Option<PathBuf>,
}

impl CsvSource {
    /// The file layout written by the synthetic generator.
    pub fn in_dir(dir: &std::path::Path) -> Self {
        let truth = dir.join("truth.csv");
        let holidays = dir.join("holidays.csv");
        Self {
            stations: dir.join("stations.csv"),
            edges: dir.join("edges.csv"),
            reports: dir.join("reports.csv"),
            holidays: holidays.exists().then_some(holidays),
            truth: truth.exists().then_some(truth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub methods: Vec<Method>,
    pub ratios: Vec<f64>,
    pub folds: usize,
    /// Evaluate only the first this-many folds of each split (all when unset).
    pub max_folds: Option<usize>,
    pub seeds: Vec<u64>,
    pub slots: usize,
    pub d_max_km: f64,
    pub train: TrainConfig,
    pub ngm: NgmConfig,
    pub diffusion: DiffusionConfig,
    pub zeta_grid: Vec<f64>,
    pub sensitivity_ratio: f64,
    /// Judge predictions against the ground-truth field instead of reports.
    pub truth: bool,
    /// Worker threads; 1 runs serially, 0 uses every core.
    pub jobs: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            methods: vec![
                Method::Random,
                Method::Mode,
                Method::Snn,
                Method::Lp,
                Method::Ls,
                Method::LpDssl,
                Method::Surconfort,
            ],
            ratios: vec![0.10, 0.25, 0.50, 0.75, 1.00],
            folds: 5,
            max_folds: None,
            seeds: vec![0],
            slots: crate::data::DEFAULT_SLOTS,
            d_max_km: crate::railgraph::DEFAULT_D_MAX_KM,
            train: TrainConfig::default(),
            ngm: NgmConfig::default(),
            diffusion: DiffusionConfig::default(),
            zeta_grid: vec![0.0, 0.35, 0.7, 1.0, 2.0],
            sensitivity_ratio: 0.10,
            truth: false,
            jobs: 1,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            bail_arg!("no methods selected");
        }
        if self.seeds.is_empty() {
            bail_arg!("at least one seed is required");
        }
        if self.ratios.is_empty() {
            bail_arg!("no label ratios selected");
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            bail_arg!("label ratio {r} outside (0, 1]");
        }
        if self.folds < 2 {
            bail_arg!("need at least 2 folds, got {}", self.folds);
        }
        if self.max_folds == Some(0) {
            bail_arg!("max_folds must be positive");
        }
        if !(self.d_max_km > 0.0) {
            bail_arg!("d_max must be positive, got {}", self.d_max_km);
        }
        if self.zeta_grid.iter().any(|z| !(*z >= 0.0)) {
            bail_arg!("zeta grid values must be non-negative");
        }
        if !(self.sensitivity_ratio > 0.0 && self.sensitivity_ratio <= 1.0) {
            bail_arg!("sensitivity ratio {} outside (0, 1]", self.sensitivity_ratio);
        }
        self.train.validate()?;
        self.ngm.validate()?;
        self.diffusion.validate()?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn fold_count(&self) -> usize {
        self.max_folds.map_or(self.folds, |m| m.min(self.folds))
    }
}

/// Correct and total predictions at one station.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Outcome of one (method, ratio, fold, seed) job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub method: Method,
    pub ratio: f64,
    pub fold: usize,
    pub seed: u64,
    /// Graph-regularization strength, for graph-regularized methods.
    pub zeta: Option<f64>,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_station: BTreeMap<usize, Tally>,
    pub wall_seconds: f64,
}

impl ResultRecord {
    /// Sort key that makes serial and parallel runs emit the same order.
    pub fn order_key(&self) -> (Method, u64, u64, u64, usize) {
        (
            self.method,
            self.zeta.map_or(0, |z| z.to_bits()),
            self.ratio.to_bits(),
            self.seed,
            self.fold,
        )
    }
}

pub(crate) fn sort_records(records: &mut [ResultRecord]) {
    records.sort_by(|a, b| {
        a.order_key()
            .cmp(&b.order_key())
    });
}
