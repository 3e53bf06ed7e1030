//! Mini-batch training loop with early stopping, shared by every learner.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::mlp::{argmax, cross_entropy, ForwardCache, ForwardOutput, Gradients, MlpModel, DEFAULT_HIDDEN, PROB_FLOOR};
use crate::data::{SplitDataset, NUM_CLASSES};
use crate::error::{bail_arg, Error, Result};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub adam: AdamConfig,
    pub hidden: [usize; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 200,
            patience: 50,
            validation_fraction: 0.10,
            adam: AdamConfig::default(),
            hidden: DEFAULT_HIDDEN,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            bail_arg!("batch size must be at least 2");
        }
        if self.max_epochs == 0 {
            bail_arg!("max_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            bail_arg!("validation fraction {} outside [0, 1)", self.validation_fraction);
        }
        if !(self.adam.learning_rate > 0.0) {
            bail_arg!("learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainLog {
    pub fn best_val_accuracy(&self) -> f64 {
        self.val_accuracy[self.best_epoch]
    }
}

/// Anything that can hand out encoded rows by index.
pub trait SampleSource {
    fn width(&self) -> usize;
    fn len(&self) -> usize;
    fn fill_row(&self, idx: usize, row: &mut [f64]) -> Result<()>;
    fn label(&self, idx: usize) -> Option<u8>;
    fn weight(&self, _idx: usize) -> f64 {
        1.0
    }
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Global indices: labeled samples first, then unlabeled.
impl SampleSource for SplitDataset {
    fn width(&self) -> usize {
        self.encoder.width()
    }

    fn len(&self) -> usize {
        self.n()
    }

    fn fill_row(&self, idx: usize, row: &mut [f64]) -> Result<()> {
        row.fill(0.0);
        for k in self.get(idx).active(&self.encoder)? {
            row[k] = 1.0;
        }
        Ok(())
    }

    fn label(&self, idx: usize) -> Option<u8> {
        self.get(idx).label
    }
}

/// Dense feature rows with optional labels and per-sample loss weights.
#[derive(Debug, Clone)]
pub struct DenseSource {
    pub features: Array2<f64>,
    pub labels: Vec<Option<u8>>,
    pub weights: Vec<f64>,
}

impl DenseSource {
    pub fn new(features: Array2<f64>, labels: Vec<Option<u8>>) -> Self {
        let weights = vec![1.0; labels.len()];
        Self {
            features,
            labels,
            weights,
        }
    }
}

impl SampleSource for DenseSource {
    fn width(&self) -> usize {
        self.features.ncols()
    }

    fn len(&self) -> usize {
        self.features.nrows()
    }

    fn fill_row(&self, idx: usize, row: &mut [f64]) -> Result<()> {
        row.copy_from_slice(self.features.row(idx).as_slice().expect("row-major"));
        Ok(())
    }

    fn label(&self, idx: usize) -> Option<u8> {
        self.labels[idx]
    }

    fn weight(&self, idx: usize) -> f64 {
        self.weights[idx]
    }
}

pub fn gather<S: SampleSource + ?Sized>(source: &S, ids: &[usize]) -> Result<Array2<f64>> {
    let w = source.width();
    let mut x = Array2::zeros((ids.len(), w));
    for (row, &id) in x.rows_mut().into_iter().zip(ids) {
        let mut row = row;
        source.fill_row(id, row.as_slice_mut().expect("row-major"))?;
    }
    Ok(x)
}

/// Weighted cross-entropy target on one batch row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub row: usize,
    pub class: usize,
    pub weight: f64,
}

/// Sum of `scale * weight * CE` over the targets and its gradient with
/// respect to the logits.
pub fn cross_entropy_term(out: &ForwardOutput, targets: &[Target], scale: f64) -> Result<(f64, Array2<f64>)> {
    let mut grad = Array2::zeros(out.probs.dim());
    let mut loss = 0.0;
    for t in targets {
        if t.class >= out.probs.ncols() {
            bail_arg!("label {} outside {} classes", t.class, out.probs.ncols());
        }
        let p = out.probs.row(t.row);
        let p = p.as_slice().expect("row-major");
        let c = scale * t.weight;
        loss += c * cross_entropy(p, t.class);
        if p[t.class] >= PROB_FLOOR {
            let mut g = grad.row_mut(t.row);
            for (k, gk) in g.iter_mut().enumerate() {
                *gk += c * (p[k] - if k == t.class { 1.0 } else { 0.0 });
            }
        }
    }
    Ok((loss, grad))
}

/// One optimizer step's loss and gradients.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub grads: Gradients,
}

/// Mean weighted cross-entropy over a batch of labeled sample ids, one
/// train-mode forward pass.
pub fn supervised_step<S: SampleSource + ?Sized>(model: &mut MlpModel, source: &S, batch: &[usize]) -> Result<StepOutcome> {
    if batch.is_empty() {
        bail_arg!("empty labeled batch");
    }
    let x = gather(source, batch)?;
    let (out, cache) = model.forward_train(&x)?;
    let targets = targets_for(source, batch)?;
    let (loss, grad_logits) = cross_entropy_term(&out, &targets, 1.0 / batch.len() as f64)?;
    let grads = backward_checked(model, &cache, &grad_logits, None)?;
    Ok(StepOutcome { loss, grads })
}

pub(crate) fn targets_for<S: SampleSource + ?Sized>(source: &S, batch: &[usize]) -> Result<Vec<Target>> {
    batch
        .iter()
        .enumerate()
        .map(|(row, &id)| {
            let class = source
                .label(id)
                .ok_or_else(|| Error::InvalidArgument(format!("sample {id} in the labeled batch has no label")))?;
            Ok(Target {
                row,
                class: class as usize,
                weight: source.weight(id),
            })
        })
        .collect()
}

pub(crate) fn backward_checked(
    model: &MlpModel,
    cache: &ForwardCache,
    grad_logits: &Array2<f64>,
    grad_descriptors: Option<&Array2<f64>>,
) -> Result<Gradients> {
    model.backward(cache, grad_logits, grad_descriptors, false)
}

/// Class predictions by argmax of inference-mode probabilities.
pub fn predict<S: SampleSource + ?Sized>(model: &MlpModel, source: &S, ids: &[usize]) -> Result<Vec<u8>> {
    Ok(predict_proba(model, source, ids)?
        .rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().expect("row-major")) as u8)
        .collect())
}

pub fn predict_proba<S: SampleSource + ?Sized>(model: &MlpModel, source: &S, ids: &[usize]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((ids.len(), model.classes()));
    for (k, chunk) in ids.chunks(4096).enumerate() {
        let x = gather(source, chunk)?;
        let p = model.forward_infer(&x)?.probs;
        out.slice_mut(ndarray::s![k * 4096..k * 4096 + chunk.len(), ..]).assign(&p);
    }
    Ok(out)
}

/// Inference-mode descriptors.
pub fn descriptors<S: SampleSource + ?Sized>(model: &MlpModel, source: &S, ids: &[usize]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((ids.len(), model.descriptor_width()));
    for (k, chunk) in ids.chunks(4096).enumerate() {
        let x = gather(source, chunk)?;
        let d = model.forward_infer(&x)?.descriptors;
        out.slice_mut(ndarray::s![k * 4096..k * 4096 + chunk.len(), ..]).assign(&d);
    }
    Ok(out)
}

pub fn accuracy<S: SampleSource + ?Sized>(model: &MlpModel, source: &S, ids: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        bail_arg!("accuracy over an empty set");
    }
    let pred = predict(model, source, ids)?;
    let correct = pred
        .iter()
        .zip(ids)
        .filter(|&(&p, &id)| source.label(id) == Some(p))
        .count();
    Ok(correct as f64 / ids.len() as f64)
}

/// Splits labeled ids into (train, validation). Validation gets
/// `round(fraction * l)` ids, capped so that at least two remain for
/// training; with fewer than three labels nothing is held out.
pub fn holdout_validation(ids: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let l = ids.len();
    let n_val = if l < 3 {
        0
    } else {
        ((fraction * l as f64).round() as usize).min(l - 2)
    };
    let mut order = ids.to_vec();
    order.shuffle(&mut seed::rng(seed, Stream::Validation));
    let val = order.split_off(l - n_val);
    let mut train = order;
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    // batch norm needs two rows; fold a trailing singleton into its neighbour
    if out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * batch_size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Runs mini-batch Adam over `train_ids`, evaluating accuracy on
/// `val_ids` (or the training ids when no validation set exists) after each
/// epoch, and returns the parameters of the best epoch.
pub fn fit<S, F>(
    mut model: MlpModel,
    source: &S,
    train_ids: &[usize],
    val_ids: &[usize],
    cfg: &TrainConfig,
    mut objective: F,
) -> Result<(MlpModel, TrainLog)>
where
    S: SampleSource + ?Sized,
    F: FnMut(&mut MlpModel, &[usize]) -> Result<StepOutcome>,
{
    cfg.validate()?;
    if train_ids.len() < 2 {
        bail_arg!("need at least 2 labeled training samples, got {}", train_ids.len());
    }
    let eval_ids = if val_ids.is_empty() { train_ids } else { val_ids };
    let mut adam = AdamState::new(cfg.adam);
    let mut shuffle_rng = seed::rng(cfg.seed, Stream::Shuffle);
    let mut order = train_ids.to_vec();
    let mut log = TrainLog {
        train_loss: Vec::new(),
        val_accuracy: Vec::new(),
        best_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut best = model.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in batches(&order, cfg.batch_size) {
            let step = objective(&mut model, batch)?;
            if !step.loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
            }
            total += step.loss * batch.len() as f64;
            count += batch.len();
            adam.step(model.trainable_mut(), step.grads.slices())?;
        }
        let acc = accuracy(&model, source, eval_ids)?;
        log.train_loss.push(total / count as f64);
        log.val_accuracy.push(acc);
        if acc > best_acc {
            best_acc = acc;
            best = model.clone();
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log.stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    Ok((best, log))
}

/// The supervised baseline: training on labeled samples only, early
/// stopping on a held-out share of them.
pub fn train_supervised(split: &SplitDataset, cfg: &TrainConfig) -> Result<(MlpModel, TrainLog)> {
    if split.l() == 0 {
        return Err(Error::Data("no labeled samples to train on".into()));
    }
    let ids: Vec<usize> = (0..split.l()).collect();
    let (train, val) = holdout_validation(&ids, cfg.validation_fraction, cfg.seed);
    let model = MlpModel::new(split.encoder.width(), cfg.hidden, NUM_CLASSES, cfg.seed)?;
    fit(model, split, &train, &val, cfg, |m, batch| supervised_step(m, split, batch))
}
