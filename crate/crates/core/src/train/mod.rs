//! Optimizers, the mini-batch training loop, evaluation metrics and the
//! per-epoch history.

mod history;
mod metrics;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use history::{EpochRecord, History, HISTORY_HEADER};
pub use metrics::{evaluate, inverse_frequency_weights, majority_baseline, Evaluation, REFERENCE_CLASS_COUNTS};
pub use optim::{Optimizer, OptimizerConfig};

use crate::data::{ClassLabel, DatasetArchive, SplitPlan};
use crate::nn::{cross_entropy, one_hot, softmax_cross_entropy_grad, Mode, Network, NnError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("history file: {0}")]
    History(String),
    #[error("i/o error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Nn(NnError::from(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeighting {
    #[default]
    Off,
    InverseFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub class_weighting: ClassWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 120,
            val_fraction: 0.2,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            class_weighting: ClassWeighting::Off,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(TrainError::Config(format!(
                "validation fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        self.optimizer.validate()
    }
}

fn class_counts(labels: &[ClassLabel], indices: &[usize]) -> [usize; 3] {
    let mut counts = [0; 3];
    for &i in indices {
        counts[labels[i].id()] += 1;
    }
    counts
}

/// Trains `net` in place and returns the per-epoch history.
pub fn train(net: &mut Network<f32>, archive: &DatasetArchive, plan: &SplitPlan, cfg: &TrainConfig) -> Result<History> {
    train_with_progress(net, archive, plan, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
///
/// Each epoch reshuffles the training indices from a generator seeded once
/// with `cfg.seed`, runs every mini-batch (the last one may be short) through
/// a train-mode forward pass, the fused softmax/cross-entropy gradient and an
/// optimizer step, then evaluates the validation split in inference mode.
/// Reported train loss and accuracy are sample-weighted means over the
/// epoch's mini-batches.
pub fn train_with_progress(
    net: &mut Network<f32>,
    archive: &DatasetArchive,
    plan: &SplitPlan,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    let expected = [archive.channels(), crate::data::IMAGE_SIDE, crate::data::IMAGE_SIDE];
    if net.input_shape() != expected {
        return Err(TrainError::Shape(format!(
            "archive samples are {:?} but the network expects {:?}",
            expected,
            net.input_shape()
        )));
    }
    if plan.train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if plan.val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    if let Some(&bad) = plan.train.iter().chain(&plan.val).find(|&&i| i >= archive.len()) {
        return Err(TrainError::Shape(format!(
            "split index {bad} out of range for {} samples",
            archive.len()
        )));
    }
    let weights = match cfg.class_weighting {
        ClassWeighting::Off => None,
        ClassWeighting::InverseFrequency => Some(inverse_frequency_weights(class_counts(archive.labels(), &plan.train))),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut order = plan.train.clone();
    let mut history = History::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let x = archive.batch(batch);
            let labels = archive.batch_labels(batch);
            let target = one_hot::<f32>(&labels, 3)?;
            net.zero_grads();
            let probs = net.forward(&x, Mode::Train)?;
            loss_sum += cross_entropy(&probs, &target, weights.as_ref().map(|w| &w[..]))? * batch.len() as f64;
            correct += probs.argmax_rows()?.iter().zip(&labels).filter(|(p, l)| p == l).count();
            let dlogits = softmax_cross_entropy_grad(&probs, &target, weights.as_ref().map(|w| &w[..]))?;
            net.backward_from_logits(&dlogits)?;
            optimizer.step(&mut net.params_mut())?;
        }
        net.clear_caches();
        let val = evaluate(net, archive, &plan.val)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_acc: correct as f64 / order.len() as f64,
            val_loss: val.mean_loss,
            val_acc: val.accuracy,
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}
