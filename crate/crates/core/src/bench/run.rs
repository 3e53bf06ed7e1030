use std::collections::BTreeMap;
use std::time::Instant;

use chrono::{NaiveDate, NaiveTime, Timelike};
use rayon::prelude::*;

use super::baselines::{ModeBaseline, RandomBaseline};
use super::dataset::{load_dataset, Dataset};
use super::{sort_records, ExperimentConfig, Method, ResultRecord, Tally};
use crate::data::{
    fold_datasets, kfold_split, mask_labels, FeatureEncoder, Fold, HolidayCalendar, Sample, ServiceWindow, SlotGrid,
    SplitDataset,
};
use crate::diffusion::{lp_dssl_train, DiffusionMethod, DiffusionModel};
use crate::error::{bail_arg, Error, Result};
use crate::graphssl::{train_surconfort, GraphSource, NgmConfig};
use crate::nn::{argmax, gather, predict, MlpModel, SampleSource, TrainConfig};
use crate::railgraph::{build_adjacency, build_cosine_adjacency, RailAdjacency};
use crate::seed;

/// One unit of sweep work.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Job {
    pub method: Method,
    pub ratio: f64,
    pub fold: usize,
    pub seed: u64,
    /// Overrides the configured zeta for graph-regularized methods.
    pub zeta: Option<f64>,
}

/// Seed shared by every method on the same (seed, ratio, fold), so that
/// label masks and initializations line up across methods.
pub fn job_seed(seed: u64, ratio: f64, fold: usize) -> u64 {
    seed::derive(seed, &[fold as u64, ratio.to_bits()])
}

/// Encoded view of a slice of samples.
struct Samples<'a> {
    encoder: FeatureEncoder,
    samples: &'a [Sample],
}

impl SampleSource for Samples<'_> {
    fn width(&self) -> usize {
        self.encoder.width()
    }

    fn len(&self) -> usize {
        self.samples.len()
    }

    fn fill_row(&self, idx: usize, row: &mut [f64]) -> Result<()> {
        row.fill(0.0);
        for k in self.samples[idx].active(&self.encoder)? {
            row[k] = 1.0;
        }
        Ok(())
    }

    fn label(&self, idx: usize) -> Option<u8> {
        self.samples[idx].label
    }
}

/// Any fitted learner.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Random(RandomBaseline),
    Mode(ModeBaseline),
    Network(MlpModel),
    Diffusion(DiffusionModel),
}

impl TrainedModel {
    pub fn predict(&self, encoder: FeatureEncoder, samples: &[Sample]) -> Result<Vec<u8>> {
        let src = Samples { encoder, samples };
        let ids: Vec<usize> = (0..samples.len()).collect();
        match self {
            TrainedModel::Random(b) => Ok(b.predict(samples)),
            TrainedModel::Mode(b) => Ok(b.predict(samples)),
            TrainedModel::Network(m) => {
                check_width(m, encoder)?;
                predict(m, &src, &ids)
            }
            TrainedModel::Diffusion(d) => d.predict(&gather(&src, &ids)?),
        }
    }
}

fn check_width(model: &MlpModel, encoder: FeatureEncoder) -> Result<()> {
    if model.input_width() != encoder.width() {
        return Err(Error::Shape(format!(
            "model input width {} does not match S + 9 + T = {} + 9 + {} = {}",
            model.input_width(),
            encoder.n_stations,
            encoder.n_slots,
            encoder.width()
        )));
    }
    Ok(())
}

/// Station graph for the configured source. The natural source has no
/// station graph; the rail graph is returned so callers always get one.
pub(crate) fn station_graph(ds: &Dataset, cfg: &ExperimentConfig) -> Result<RailAdjacency> {
    match cfg.ngm.graph {
        GraphSource::Cosine => build_cosine_adjacency(&ds.network),
        GraphSource::Rail | GraphSource::Natural => build_adjacency(&ds.network, cfg.d_max_km),
    }
}

/// Fits `method` on a training split.
pub fn train_method(
    method: Method,
    split: &SplitDataset,
    adjacency: &RailAdjacency,
    cfg: &ExperimentConfig,
    seed: u64,
    zeta: Option<f64>,
) -> Result<TrainedModel> {
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let ngm = |graph| NgmConfig {
        zeta: zeta.unwrap_or(cfg.ngm.zeta),
        graph,
        ..cfg.ngm.clone()
    };
    Ok(match method {
        Method::Random => TrainedModel::Random(RandomBaseline { seed }),
        Method::Mode => TrainedModel::Mode(ModeBaseline::fit(&split.labeled, seed)),
        Method::Snn => TrainedModel::Network(crate::nn::train_supervised(split, &train)?.0),
        Method::Surconfort => TrainedModel::Network(train_surconfort(split, adjacency, &ngm(cfg.ngm.graph), &train)?.0),
        Method::NgmNatural => {
            TrainedModel::Network(train_surconfort(split, adjacency, &ngm(GraphSource::Natural), &train)?.0)
        }
        Method::Lp => TrainedModel::Diffusion(DiffusionModel::fit(split, DiffusionMethod::Lp, &cfg.diffusion, seed)?),
        Method::Ls => TrainedModel::Diffusion(DiffusionModel::fit(split, DiffusionMethod::Ls, &cfg.diffusion, seed)?),
        Method::LpDssl => TrainedModel::Network(lp_dssl_train(split, &cfg.diffusion, &train)?.0),
    })
}

/// Overall and per-station accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_station: BTreeMap<usize, Tally>,
}

pub(crate) fn score(predictions: &[u8], samples: &[Sample], truth: impl Fn(&Sample) -> Option<u8>) -> Result<Evaluation> {
    let mut per_station: BTreeMap<usize, Tally> = BTreeMap::new();
    let mut correct = 0;
    let mut total = 0;
    for (p, s) in predictions.iter().zip(samples) {
        let Some(y) = truth(s) else { continue };
        let t = per_station.entry(s.station).or_default();
        t.total += 1;
        total += 1;
        if *p == y {
            t.correct += 1;
            correct += 1;
        }
    }
    if total == 0 {
        bail_arg!("no labeled test samples to evaluate");
    }
    Ok(Evaluation {
        accuracy: correct as f64 / total as f64,
        correct,
        total,
        per_station,
    })
}

/// Accuracy of a network on labeled samples, overall and per station.
pub fn evaluate(model: &MlpModel, encoder: FeatureEncoder, samples: &[Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        bail_arg!("empty test set");
    }
    let pred = TrainedModel::Network(model.clone()).predict(encoder, samples)?;
    score(&pred, samples, |s| s.label)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub class: u8,
    pub confidences: [f64; 4],
}

/// Predicted class and class probabilities for one station at one moment.
pub fn forecast(
    model: &MlpModel,
    encoder: FeatureEncoder,
    calendar: &HolidayCalendar,
    window: &ServiceWindow,
    station: usize,
    date: NaiveDate,
    time: NaiveTime,
) -> Result<Forecast> {
    check_width(model, encoder)?;
    if station >= encoder.n_stations {
        bail_arg!("station {station} outside 0..{}", encoder.n_stations);
    }
    let minute = time.hour() * 60 + time.minute();
    if window.is_out_of_service(minute) {
        bail_arg!(
            "{} falls in the out-of-service window {}",
            time.format("%H:%M"),
            window.describe()
        );
    }
    let grid = SlotGrid::new(encoder.n_slots)?;
    let slot = grid.slot_of(time);
    let x = encoder.encode(station, calendar.context(date), slot)?;
    let x = ndarray::Array2::from_shape_vec((1, x.len()), x).expect("one row");
    let p = model.forward_infer(&x)?.probs;
    let row = p.row(0);
    let confidences = [row[0], row[1], row[2], row[3]];
    Ok(Forecast {
        class: argmax(&confidences) as u8,
        confidences,
    })
}

/// Trains and scores a single job against precomputed folds.
pub fn run_job(
    ds: &Dataset,
    adjacency: &RailAdjacency,
    folds: &[Fold],
    job: &Job,
    cfg: &ExperimentConfig,
) -> Result<ResultRecord> {
    let start = Instant::now();
    let fold = folds
        .get(job.fold)
        .ok_or_else(|| Error::InvalidArgument(format!("fold {} of {}", job.fold, folds.len())))?;
    let js = job_seed(job.seed, job.ratio, job.fold);
    let (train, test) = fold_datasets(&ds.full, fold);
    let train = mask_labels(&train, job.ratio, js)?;
    let model = train_method(job.method, &train, adjacency, cfg, js, job.zeta)?;
    let pred = model.predict(ds.full.encoder, &test)?;
    let eval = if cfg.truth {
        score(&pred, &test, |s| ds.truth_of(s.cell_id))?
    } else {
        score(&pred, &test, |s| s.label)?
    };
    let graph_regularized = matches!(job.method, Method::Surconfort | Method::NgmNatural);
    let record = ResultRecord {
        method: job.method,
        ratio: job.ratio,
        fold: job.fold,
        seed: job.seed,
        zeta: graph_regularized.then(|| job.zeta.unwrap_or(cfg.ngm.zeta)),
        accuracy: eval.accuracy,
        correct: eval.correct,
        total: eval.total,
        per_station: eval.per_station,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    log::info!(
        "{} ratio={} seed={} fold={} accuracy={:.4} ({:.1}s)",
        record.method,
        record.ratio,
        record.seed,
        record.fold,
        record.accuracy,
        record.wall_seconds
    );
    Ok(record)
}

fn execute(cfg: &ExperimentConfig, jobs: Vec<Job>) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    if cfg.truth && ds.truth.is_none() {
        return Err(Error::Config("truth evaluation needs a ground-truth file".into()));
    }
    let adjacency = station_graph(&ds, cfg)?;
    let mut folds: BTreeMap<u64, Vec<Fold>> = BTreeMap::new();
    for &s in &cfg.seeds {
        folds.insert(s, kfold_split(ds.full.l(), cfg.folds, s)?);
    }
    let one = |job: &Job| run_job(&ds, &adjacency, &folds[&job.seed], job, cfg);
    let mut records = if cfg.jobs == 1 {
        jobs.iter().map(one).collect::<Result<Vec<_>>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(one).collect::<Result<Vec<_>>>())?
    };
    sort_records(&mut records);
    Ok(records)
}

fn grid_jobs(cfg: &ExperimentConfig, methods: &[Method], ratios: &[f64], zetas: &[Option<f64>]) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &method in methods {
        for &zeta in zetas {
            for &ratio in ratios {
                for &seed in &cfg.seeds {
                    for fold in 0..cfg.fold_count() {
                        jobs.push(Job {
                            method,
                            ratio,
                            fold,
                            seed,
                            zeta,
                        });
                    }
                }
            }
        }
    }
    jobs
}

/// Every (method, ratio, fold, seed) combination of the config.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    let jobs = grid_jobs(cfg, &cfg.methods, &cfg.ratios, &[None]);
    execute(cfg, jobs)
}

/// The rail-graph method, the natural-graph method and the supervised
/// network across all ratios.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    let methods = [Method::Surconfort, Method::NgmNatural, Method::Snn];
    let jobs = grid_jobs(cfg, &methods, &cfg.ratios, &[None]);
    execute(cfg, jobs)
}

/// The rail-graph method at the sensitivity ratio for each zeta of the grid.
pub fn run_sensitivity(cfg: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    if cfg.zeta_grid.is_empty() {
        bail_arg!("empty zeta grid");
    }
    let zetas: Vec<Option<f64>> = cfg.zeta_grid.iter().map(|&z| Some(z)).collect();
    let jobs = grid_jobs(cfg, &[Method::Surconfort], &[cfg.sensitivity_ratio], &zetas);
    execute(cfg, jobs)
}
