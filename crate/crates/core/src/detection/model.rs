use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DetectionError, LabeledDataset, Sample};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weight: f64,
    pub bias: f64,
    pub feature_mean: f64,
    pub feature_stddev: f64,
}

impl LogisticModel {
    pub fn standardize(&self, delta: i64) -> f64 {
        (delta as f64 - self.feature_mean) / self.feature_stddev
    }

    /// Probability of the attack label.
    pub fn predict(&self, delta: i64) -> f64 {
        sigmoid(self.weight * self.standardize(delta) + self.bias)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_epochs: 2000,
            tolerance: 1e-6,
            train_fraction: 0.7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Per-class shuffle, then the first `round(fraction * n_class)` samples of
/// each class go to training. Order within each half is label 0 then 1.
pub fn stratified_split(dataset: &LabeledDataset, train_fraction: f64) -> Split {
    let mut rng = rng::stream(dataset.split_seed, "split");
    let mut split = Split::default();
    for label in [0u8, 1] {
        let mut class: Vec<Sample> = dataset.samples.iter().copied().filter(|s| s.label == label).collect();
        class.shuffle(&mut rng);
        let cut = ((class.len() as f64) * train_fraction).round() as usize;
        let test = class.split_off(cut.min(class.len()));
        split.train.extend(class);
        split.test.extend(test);
    }
    split
}

#[derive(Clone, Debug, PartialEq)]
pub struct Training {
    pub model: LogisticModel,
    pub split: Split,
    pub epochs: usize,
    pub converged: bool,
}

/// Splits `dataset` and fits a single-feature logistic regression by
/// full-batch gradient descent on the mean log-loss.
pub fn train(dataset: &LabeledDataset, config: &TrainConfig) -> Result<Training, DetectionError> {
    let split = stratified_split(dataset, config.train_fraction);
    let pos = split.train.iter().filter(|s| s.label == 1).count();
    if pos == 0 || pos == split.train.len() {
        return Err(DetectionError::DegenerateData);
    }

    let n = split.train.len() as f64;
    let mean = split.train.iter().map(|s| s.delta as f64).sum::<f64>() / n;
    let var = split.train.iter().map(|s| (s.delta as f64 - mean).powi(2)).sum::<f64>() / n;
    let stddev = if var > 0.0 { var.sqrt() } else { 1.0 };
    let xs: Vec<(f64, f64)> = split
        .train
        .iter()
        .map(|s| ((s.delta as f64 - mean) / stddev, s.label as f64))
        .collect();

    let (mut w, mut b) = (0.0f64, 0.0f64);
    let mut epochs = 0;
    let mut converged = false;
    while epochs < config.max_epochs {
        let (mut gw, mut gb) = (0.0, 0.0);
        for &(z, y) in &xs {
            let err = sigmoid(w * z + b) - y;
            gw += err * z;
            gb += err;
        }
        gw /= n;
        gb /= n;
        if gw.abs().max(gb.abs()) < config.tolerance {
            converged = true;
            break;
        }
        w -= config.learning_rate * gw;
        b -= config.learning_rate * gb;
        epochs += 1;
    }

    Ok(Training {
        model: LogisticModel {
            weight: w,
            bias: b,
            feature_mean: mean,
            feature_stddev: stddev,
        },
        split,
        epochs,
        converged,
    })
}
