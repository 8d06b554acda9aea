//! Mini-batch SGD under either feedback mode.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::datasets::{self, LabeledImageSet};
use crate::error::{Error, Result};
use crate::layers::{FeedbackMode, ParamGrads};
use crate::network::{Network, NetworkSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Samples per reduction chunk. Per-sample gradients are summed in index order
/// inside a chunk and chunk sums are added in chunk order, so the result does
/// not depend on how many threads ran.
const REDUCTION_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: FeedbackMode,
    pub init_seed: u64,
    pub feedback_seed: u64,
    pub shuffle_seed: u64,
}

impl TrainConfig {
    pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
    pub const DEFAULT_BATCH_SIZE: usize = 64;
    pub const DEFAULT_EPOCHS_MNIST: usize = 5;
    pub const DEFAULT_EPOCHS_CIFAR10: usize = 20;

    pub fn new(mode: FeedbackMode, epochs: usize) -> Self {
        Self {
            learning_rate: Self::DEFAULT_LEARNING_RATE,
            epochs,
            batch_size: Self::DEFAULT_BATCH_SIZE,
            mode,
            init_seed: 1,
            feedback_seed: 2,
            shuffle_seed: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    fn meta(&self, epochs_done: usize) -> TrainingMeta {
        TrainingMeta {
            init_seed: self.init_seed,
            feedback_seed: self.feedback_seed,
            shuffle_seed: self.shuffle_seed,
            epochs: epochs_done as u64,
            batch_size: self.batch_size as u64,
            learning_rate: self.learning_rate,
            mode: (epochs_done > 0).then_some(self.mode),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Held-out accuracy, when an evaluation set was supplied.
    pub clean_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
}

impl Metrics {
    /// `epoch,mean_loss,clean_accuracy`, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,clean_accuracy\n");
        for e in &self.epochs {
            let acc = e.clean_accuracy.map_or_else(String::new, |a| format!("{a:.6}"));
            let _ = writeln!(out, "{},{:.6},{}", e.epoch, e.mean_loss, acc);
        }
        out
    }
}

fn add_grads(acc: &mut [Option<ParamGrads>], other: &[Option<ParamGrads>]) -> Result<()> {
    for (a, o) in acc.iter_mut().zip(other) {
        if let (Some(a), Some(o)) = (a.as_mut(), o.as_ref()) {
            a.accumulate(o, 1.0)?;
        }
    }
    Ok(())
}

/// Mean loss and mean parameter gradients over one batch.
pub fn batch_gradients(
    network: &Network,
    images: &[&Tensor],
    labels: &[usize],
    mode: FeedbackMode,
) -> Result<(f64, Vec<Option<ParamGrads>>)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Config(format!("batch of {} images and {} labels", images.len(), labels.len())));
    }
    let chunks: Vec<(f64, Vec<Option<ParamGrads>>)> = images
        .par_chunks(REDUCTION_CHUNK)
        .zip(labels.par_chunks(REDUCTION_CHUNK))
        .map(|(xs, ys)| {
            let mut grads = network.zero_grads();
            let mut loss = 0.0;
            for (x, &y) in xs.iter().zip(ys) {
                let (l, g) = network.loss_and_param_grads(x, y, mode)?;
                loss += l;
                add_grads(&mut grads, &g)?;
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut total_loss = 0.0;
    let mut total = network.zero_grads();
    for (loss, grads) in &chunks {
        total_loss += loss;
        add_grads(&mut total, grads)?;
    }
    let inv = 1.0 / images.len() as f64;
    total.iter_mut().flatten().for_each(|g| g.scale(inv));
    Ok((total_loss * inv, total))
}

/// Applies `W ← W − lr·grad_W`, `b ← b − lr·grad_b`; feedback weights are untouched.
pub fn sgd_step(network: &mut Network, grads: &[Option<ParamGrads>], learning_rate: f64) -> Result<()> {
    network.sgd_step(grads, learning_rate)
}

pub(crate) fn epoch_seed(shuffle_seed: u64, epoch: usize) -> u64 {
    let mut rng = Rng::new(shuffle_seed);
    let mut seed = rng.next_u64();
    for _ in 0..epoch {
        seed = rng.next_u64();
    }
    seed
}

/// Trains a freshly initialized network. `eval_set`, when given, is scored
/// after every epoch.
pub fn train(
    spec: &NetworkSpec,
    config: &TrainConfig,
    train_set: &LabeledImageSet,
    eval_set: Option<&LabeledImageSet>,
) -> Result<(Checkpoint, Metrics)> {
    let network = Network::init(spec.clone(), config.init_seed, config.feedback_seed)?;
    train_from(network, config, train_set, eval_set, |_, _| {})
}

/// Like [`train`], starting from `network`. `on_epoch` sees each epoch's
/// metrics together with the network as it stands after that epoch.
pub fn train_from(
    mut network: Network,
    config: &TrainConfig,
    train_set: &LabeledImageSet,
    eval_set: Option<&LabeledImageSet>,
    mut on_epoch: impl FnMut(&EpochMetrics, &Network),
) -> Result<(Checkpoint, Metrics)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset { op: "train" });
    }
    if train_set.image_shape() != network.spec().input_shape.as_slice() {
        return Err(Error::Config(format!(
            "dataset images {:?} do not fit network input {:?}",
            train_set.image_shape(),
            network.spec().input_shape
        )));
    }
    let mut metrics = Metrics::default();
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in datasets::batches(train_set, config.batch_size, epoch_seed(config.shuffle_seed, epoch))?.enumerate() {
            let (loss, grads) = batch_gradients(&network, &batch.images, &batch.labels, config.mode)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1, batch: b, loss });
            }
            loss_sum += loss * batch.images.len() as f64;
            seen += batch.images.len();
            network.sgd_step(&grads, config.learning_rate)?;
        }
        let clean_accuracy = eval_set.map(|s| evaluate_accuracy(&network, s)).transpose()?;
        let m = EpochMetrics { epoch: epoch + 1, mean_loss: loss_sum / seen as f64, clean_accuracy };
        on_epoch(&m, &network);
        metrics.epochs.push(m);
    }
    Ok((Checkpoint { network, meta: config.meta(config.epochs) }, metrics))
}

/// Per-item predictions in dataset order.
pub fn predictions(network: &Network, set: &LabeledImageSet) -> Result<Vec<usize>> {
    set.images().par_iter().map(|x| network.predict(x)).collect()
}

/// Fraction of items whose arg-max logit (lowest index on ties) equals the label.
pub fn evaluate_accuracy(network: &Network, set: &LabeledImageSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyDataset { op: "evaluate_accuracy" });
    }
    let preds = predictions(network, set)?;
    let correct = preds.iter().zip(set.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / set.len() as f64)
}

pub fn mean_loss(network: &Network, set: &LabeledImageSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyDataset { op: "mean_loss" });
    }
    let losses: Vec<f64> = set
        .images()
        .par_iter()
        .zip(set.labels().par_iter())
        .map(|(x, &y)| {
            let logits = network.logits(x)?;
            crate::network::loss_and_output_delta(&logits, y).map(|(l, _)| l)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / set.len() as f64)
}
