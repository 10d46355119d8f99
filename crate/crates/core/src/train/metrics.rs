use serde::Serialize;

use super::{Result, TrainError};
use crate::data::{ClassLabel, DatasetArchive};
use crate::nn::{cross_entropy, one_hot, Network};
use crate::tensor::{argmax, Tensor};

const EVAL_BATCH: usize = 64;

/// Accuracy, mean loss and the confusion matrix (rows are true classes).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub samples: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub confusion: [[usize; 3]; 3],
}

impl Evaluation {
    /// Scores probability rows (`[N, 3]`, row-major) against true labels.
    pub fn from_predictions(probs: &[f32], labels: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(TrainError::EmptySplit("evaluation"));
        }
        if probs.len() != labels.len() * 3 || labels.iter().any(|&l| l >= 3) {
            return Err(TrainError::Shape(format!(
                "{} probabilities for {} labels",
                probs.len(),
                labels.len()
            )));
        }
        let p = Tensor::new(&[labels.len(), 3], probs.to_vec())?;
        let loss = cross_entropy(&p, &one_hot::<f32>(labels, 3)?, None)?;
        let mut confusion = [[0usize; 3]; 3];
        for (row, &l) in probs.chunks(3).zip(labels) {
            confusion[l][argmax(row)] += 1;
        }
        let correct: usize = (0..3).map(|i| confusion[i][i]).sum();
        Ok(Evaluation {
            samples: labels.len(),
            accuracy: correct as f64 / labels.len() as f64,
            mean_loss: loss,
            confusion,
        })
    }

    /// Sample-weighted merge of evaluations over disjoint sets.
    fn merge(parts: &[Evaluation]) -> Evaluation {
        let samples: usize = parts.iter().map(|e| e.samples).sum();
        let mut confusion = [[0usize; 3]; 3];
        let mut loss = 0.0;
        for e in parts {
            loss += e.mean_loss * e.samples as f64;
            for i in 0..3 {
                for j in 0..3 {
                    confusion[i][j] += e.confusion[i][j];
                }
            }
        }
        let correct: usize = (0..3).map(|i| confusion[i][i]).sum();
        Evaluation {
            samples,
            accuracy: correct as f64 / samples as f64,
            mean_loss: loss / samples as f64,
            confusion,
        }
    }
}

/// Inference-mode evaluation over the given archive indices. The network is
/// borrowed immutably, so parameters and running statistics cannot change.
pub fn evaluate(net: &Network<f32>, archive: &DatasetArchive, indices: &[usize]) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let parts = indices
        .chunks(EVAL_BATCH)
        .map(|chunk| {
            let probs = net.predict(&archive.batch(chunk))?;
            Evaluation::from_predictions(probs.data(), &archive.batch_labels(chunk))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::merge(&parts))
}

/// Per-class image counts (Normal, Pneumonia, Tuberculosis) of the combined
/// clinical corpus: the Montgomery and Shenzhen tuberculosis sets plus the
/// Kaggle pneumonia set.
pub const REFERENCE_CLASS_COUNTS: [usize; 3] = [1989, 4273, 394];

/// Accuracy of always predicting the most frequent class.
pub fn majority_baseline(class_counts: [usize; 3]) -> (ClassLabel, f64) {
    let total: usize = class_counts.iter().sum();
    let best = argmax(&class_counts.map(|c| c as f64));
    let acc = if total == 0 {
        0.0
    } else {
        class_counts[best] as f64 / total as f64
    };
    (ClassLabel::from_id(best).expect("id < 3"), acc)
}

/// Inverse-frequency weights `N / (K·n_c)`; absent classes get weight 0.
pub fn inverse_frequency_weights(class_counts: [usize; 3]) -> [f64; 3] {
    let total: usize = class_counts.iter().sum();
    class_counts.map(|c| if c == 0 { 0.0 } else { total as f64 / (3.0 * c as f64) })
}
