//! The shared classifier: network, optimizer, training loop, checkpoints.

mod adam;
mod checkpoint;
mod mlp;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use mlp::{
    argmax, cross_entropy, softmax, BatchNorm, Dense, ForwardCache, ForwardOutput, Gradients, MlpModel, Mode,
    BN_EPS, BN_MOMENTUM, DEFAULT_HIDDEN, PROB_FLOOR,
};
pub use train::{
    accuracy, cross_entropy_term, descriptors, fit, gather, holdout_validation, predict, predict_proba,
    supervised_step, train_supervised, DenseSource, SampleSource, StepOutcome, StopReason, Target, TrainConfig,
    TrainLog,
};
pub(crate) use train::{backward_checked, targets_for};
