use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::info;

use super::dataset::{ShapesSample, NUM_CLASSES};
use super::loss::{argmax_map, softmax_ce_loss};
use super::{EngineError, ModelParams, Network};
use crate::archspec::NetworkSpec;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Worker threads for per-sample gradients. Gradients are always reduced
    /// in sample order, so the result does not depend on this value.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 8,
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub epochs: Vec<EpochLog>,
}

pub(crate) fn sample_input<T: Scalar>(s: &ShapesSample) -> Array4<T> {
    s.image.mapv(|v| T::of(v as f64)).insert_axis(Axis(0))
}

fn sample_labels(s: &ShapesSample) -> Array3<u8> {
    s.labels.clone().insert_axis(Axis(0))
}

/// Fraction of pixels whose argmax matches the label.
pub fn pixel_accuracy<T: Scalar>(
    net: &Network<T>,
    samples: &[ShapesSample],
) -> Result<f64, EngineError> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in samples {
        let pred = argmax_map(&net.logits(&sample_input(s))?);
        hits += pred
            .index_axis(Axis(0), 0)
            .iter()
            .zip(s.labels.iter())
            .filter(|(a, b)| a == b)
            .count();
        total += s.labels.len();
    }
    Ok(if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    })
}

fn sample_gradient<T: Scalar>(
    net: &Network<T>,
    s: &ShapesSample,
) -> Result<(T, ModelParams<T>), EngineError> {
    let mut pass = net.forward(&sample_input(s))?;
    let (loss, dlogits) = softmax_ce_loss(pass.output().data(), sample_labels(s).view(), None)?;
    let grads = net
        .backward(&mut pass, &dlogits, true)?
        .expect("requested parameter gradients");
    Ok((loss, grads))
}

/// SGD with momentum on per-pixel cross-entropy.
///
/// `spec` must end in a per-pixel logit map with one channel per class.
/// Parameters are initialized from `cfg.seed`; the same seed shuffles the
/// training set every epoch.
pub fn train<T: Scalar>(
    spec: &NetworkSpec,
    train_set: &[ShapesSample],
    val_set: &[ShapesSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, EngineError> {
    if train_set.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    match spec.output_shape() {
        Some(s) if s.c == NUM_CLASSES && (s.h, s.w) == (spec.input.h, spec.input.w) => {}
        other => {
            return Err(EngineError::ShapeMismatch(format!(
                "network output {other:?} is not a {NUM_CLASSES}-class per-pixel map"
            )))
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::new(spec.clone(), ModelParams::<T>::init(spec, cfg.seed))?;
    let mut velocity = net.params().zeros_like();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .expect("thread pool");
    let lr = T::of(cfg.lr);
    let momentum = T::of(cfg.momentum);
    let batch_size = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(batch_size).enumerate() {
            let results: Vec<Result<(T, ModelParams<T>), EngineError>> = if cfg.workers > 1 {
                pool.install(|| {
                    batch
                        .par_iter()
                        .map(|&i| sample_gradient(&net, &train_set[i]))
                        .collect()
                })
            } else {
                batch
                    .iter()
                    .map(|&i| sample_gradient(&net, &train_set[i]))
                    .collect()
            };
            let mut grad = net.params().zeros_like();
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss.to_f64_lossy();
                grad.scaled_add(T::one(), &g);
            }
            if !batch_loss.is_finite() {
                return Err(EngineError::NonFinite(format!(
                    "loss at epoch {} batch {b}",
                    epoch + 1
                )));
            }
            grad.scale(T::one() / T::of(batch.len() as f64));
            velocity.momentum_update(momentum, &grad);
            net.params_mut().scaled_add(-lr, &velocity);
            loss_sum += batch_loss;
        }
        if !net.params().is_finite() {
            return Err(EngineError::NonFinite(format!(
                "parameters after epoch {}",
                epoch + 1
            )));
        }
        let log = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            val_accuracy: pixel_accuracy(&net, val_set)?,
        };
        info!(
            epoch = log.epoch,
            loss = log.train_loss,
            val_accuracy = log.val_accuracy,
            "epoch done"
        );
        epochs.push(log);
    }
    Ok(TrainOutcome {
        params: net.into_params(),
        epochs,
    })
}
