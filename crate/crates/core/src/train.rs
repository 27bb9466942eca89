//! Mini-batch training loop and evaluation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{materialize, ClassLabel, DatasetError, DatasetManifest, Split};
use crate::image::ImageTensor;
use crate::metrics::{argmax, ConfusionMatrix};
use crate::nn::layers::{batch_loss, cross_entropy};
use crate::nn::{adam_step, Mode, ModelParams, Network, NnError, Tensor4, TrainConfig};
use crate::rng;

/// Batch size used for evaluation passes; does not affect results.
const EVAL_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("sample {index} is {got:?} (h, w, c), model expects {expected:?}")]
    InputShape {
        index: usize,
        got: [usize; 3],
        expected: [usize; 3],
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Step {
        epoch: usize,
        batch: usize,
        #[source]
        source: NnError,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// A preprocessed image with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: ImageTensor,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// `epoch,train_loss,train_acc,val_loss,val_acc` with one row per epoch.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        ));
    }
    out
}

/// Loads every sample of `split` from the manifest root, in manifest order.
/// Augmented copies are materialized from their source with the manifest's
/// augmentation and `seed`.
pub fn load_examples(manifest: &DatasetManifest, split: Split, seed: u64) -> Result<Vec<Example>, TrainError> {
    let samples: Vec<_> = manifest.in_split(split).collect();
    let loaded: Vec<Result<Example, DatasetError>> = samples
        .par_iter()
        .map(|s| {
            let mut image = s.load(&manifest.root)?;
            if let Some(p) = &s.augmented_from {
                let spec = manifest.augment.ok_or_else(|| DatasetError::MissingAugment(s.path.clone()))?;
                image = materialize(&image, p, &spec, seed);
            }
            Ok(Example { image, label: s.label })
        })
        .collect();
    Ok(loaded.into_iter().collect::<Result<_, _>>()?)
}

fn check_shapes(examples: &[Example], expected: [usize; 3]) -> Result<(), TrainError> {
    for (index, e) in examples.iter().enumerate() {
        let got = [e.image.height(), e.image.width(), e.image.channels()];
        if got != expected {
            return Err(TrainError::InputShape { index, got, expected });
        }
    }
    Ok(())
}

fn stack<'a>(items: impl ExactSizeIterator<Item = &'a Example>, shape: [usize; 3]) -> (Tensor4<f32>, Vec<usize>) {
    let n = items.len();
    let mut data = Vec::with_capacity(n * shape.iter().product::<usize>());
    let mut labels = Vec::with_capacity(n);
    for e in items {
        data.extend_from_slice(e.image.data());
        labels.push(e.label.index());
    }
    (Tensor4::from_vec(n, shape[0], shape[1], shape[2], data), labels)
}

/// Trains a freshly initialized model for `config.epochs` epochs and
/// returns the final-epoch model with one history record per epoch.
/// `on_epoch` sees each record as soon as it is computed.
pub fn train(
    config: &TrainConfig,
    train_set: &[Example],
    val_set: &[Example],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, Vec<EpochRecord>), TrainError> {
    let mut model = ModelParams::init(config)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let shape = config.input_shape();
    check_shapes(train_set, shape)?;
    check_shapes(val_set, shape)?;

    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, rng::SHUFFLE, &[epoch as u64]));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let (x, labels) = stack(idx.iter().map(|&i| &train_set[i]), shape);
            let mut drop_rng = rng::stream(config.seed, rng::DROPOUT, &[epoch as u64, batch as u64]);
            let cache = model.network.forward(&x, Mode::Train, &mut drop_rng)?;
            let loss = batch_loss(&cache.probs, &labels);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            loss_sum += loss * labels.len() as f64;
            let k = cache.probs.c;
            correct += cache
                .probs
                .data
                .chunks_exact(k)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            let grads = model.network.backward(&cache, &labels)?;
            adam_step(&mut model.network, &grads, &mut model.adam, &config.optimizer)
                .map_err(|source| TrainError::Step { epoch, batch, source })?;
        }
        let val = evaluate(&model.network, val_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_loss: val.loss,
            val_acc: val.accuracy(),
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok((model, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<Prediction>,
    /// Mean cross-entropy.
    pub loss: f64,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.confusion.trace() as f64 / self.confusion.total() as f64
    }
}

/// Eval-mode class probabilities for each image, in input order.
pub fn predict_images(network: &Network<f32>, images: &[&ImageTensor]) -> Result<Vec<Prediction>, TrainError> {
    let shape = network.input_shape;
    for (index, img) in images.iter().enumerate() {
        let got = [img.height(), img.width(), img.channels()];
        if got != shape {
            return Err(TrainError::InputShape { index, got, expected: shape });
        }
    }
    let chunks: Vec<Result<Vec<Prediction>, NnError>> = images
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * shape.iter().product::<usize>());
            for img in chunk {
                data.extend_from_slice(img.data());
            }
            let x = Tensor4::from_vec(chunk.len(), shape[0], shape[1], shape[2], data);
            let probs = network.predict(&x)?;
            Ok(probs
                .data
                .chunks_exact(probs.c)
                .map(|row| Prediction {
                    label: argmax(row),
                    probabilities: row.to_vec(),
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(images.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Eval-mode predictions for a labelled set and the resulting confusion
/// matrix (rows = true class).
pub fn evaluate(network: &Network<f32>, set: &[Example]) -> Result<Evaluation, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let images: Vec<&ImageTensor> = set.iter().map(|e| &e.image).collect();
    let predictions = predict_images(network, &images)?;
    let mut confusion = ConfusionMatrix::new(network.num_classes());
    let mut loss = 0.0;
    for (e, p) in set.iter().zip(&predictions) {
        confusion.record(e.label.index(), p.label);
        loss += cross_entropy(&p.probabilities, e.label.index());
    }
    Ok(Evaluation {
        confusion,
        predictions,
        loss: loss / set.len() as f64,
    })
}
