//! The training loop: mini-batch gradient descent with per-layer batch
//! normalization, optional momentum, weight decay, dropout, and input
//! jitter; snapshots along the way; deterministic for a fixed config.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::net::{accuracy, softmax_cross_entropy, ToyNet};
use super::{Optimizer, ToyConfig, ToyDataset, ToyError};
use crate::store::{ActivationDataset, LayerBlock, LayerKind, Metrics, StoreError};

/// Loss/accuracy trace entry; `epoch` counts completed epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub net: ToyNet,
    /// (completed-epoch count, network state) pairs: epoch 0 (after the
    /// normalization calibration pass), every cadence step, and the final
    /// epoch.
    pub snapshots: Vec<(usize, ToyNet)>,
    pub curve: Vec<EpochStat>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_train_loss: f64,
    pub stopped_early: bool,
}

impl TrainedModel {
    pub fn snapshot_at(&self, epoch: usize) -> Result<&ToyNet, ToyError> {
        self.snapshots
            .iter()
            .find(|(e, _)| *e == epoch)
            .map(|(_, net)| net)
            .ok_or(ToyError::MissingSnapshot { epoch })
    }
}

fn targets_of(ds: &ToyDataset) -> Vec<usize> {
    ds.labels.class_of.clone()
}

/// Inference-mode data loss and accuracies on both splits.
fn evaluate(net: &ToyNet, train: &ToyDataset, test: &ToyDataset) -> (f64, f64, f64) {
    let (_, train_logits) = net.forward_inference(&train.x);
    let (_, test_logits) = net.forward_inference(&test.x);
    let train_targets = targets_of(train);
    (
        softmax_cross_entropy(&train_logits, &train_targets),
        accuracy(&train_logits, &train_targets),
        accuracy(&test_logits, &targets_of(test)),
    )
}

/// Trains a fresh network on `train`. RNG discipline (single ChaCha stream
/// seeded by `config.seed`): weight init, then per epoch a shuffle, then per
/// batch the jitter draws (if augmenting) followed by the dropout masks (if
/// the rate is nonzero). Disabled features draw nothing, so a run with
/// dropout 0 and no augmentation consumes exactly the plain trainer's
/// stream.
pub fn train(
    config: &ToyConfig,
    train_ds: &ToyDataset,
    test_ds: &ToyDataset,
) -> Result<TrainedModel, ToyError> {
    config.validate()?;
    let n = train_ds.n_samples();
    let n_classes = train_ds.labels.n_classes;
    let targets = targets_of(train_ds);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = ToyNet::init(
        train_ds.x.ncols(),
        config.width,
        config.depth,
        n_classes,
        &mut rng,
    );

    // Calibration: running statistics start as the full training set's
    // batch statistics, so an epoch-0 dump is properly normalized instead
    // of reflecting the arbitrary (0, 1) initialization.
    let cache = net.forward_train(&train_ds.x, None);
    net.update_running_stats(&cache, Some(1.0));

    let cadence = (config.epochs / 10).max(1);
    let mut snapshots: Vec<(usize, ToyNet)> = vec![(0, net.clone())];
    let mut curve = Vec::with_capacity(config.epochs + 1);
    {
        let (loss, train_acc, test_acc) = evaluate(&net, train_ds, test_ds);
        curve.push(EpochStat { epoch: 0, train_loss: loss, train_accuracy: train_acc, test_accuracy: test_acc });
    }

    let mut velocity: Vec<f64> = vec![0.0; net.n_params()];
    let mut lr = config.learning_rate;
    let mut order: Vec<usize> = (0..n).collect();
    let mut stopped_early = false;
    let mut epochs_run = 0;

    'epochs: for epoch in 0..config.epochs {
        if config.lr_drop_epochs.contains(&epoch) {
            lr *= 0.2;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue; // batch statistics need at least two samples
            }
            let mut x = Array2::zeros((chunk.len(), train_ds.x.ncols()));
            for (r, &s) in chunk.iter().enumerate() {
                x.row_mut(r).assign(&train_ds.x.row(s));
            }
            if config.augment {
                x.mapv_inplace(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal));
            }
            let batch_targets: Vec<usize> = chunk.iter().map(|&s| targets[s]).collect();

            let masks = if config.dropout_rate > 0.0 {
                let keep = 1.0 - config.dropout_rate;
                Some(
                    (0..config.depth)
                        .map(|_| {
                            Array2::from_shape_fn((chunk.len(), config.width), |_| {
                                if rng.random::<f64>() < keep {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            })
                        })
                        .collect::<Vec<_>>(),
                )
            } else {
                None
            };

            let cache = net.forward_train(&x, masks.as_deref());
            let batch_loss = net.loss_from(&cache, &batch_targets, config.weight_decay);
            if !batch_loss.is_finite() {
                return Err(ToyError::Diverged { epoch: epoch + 1 });
            }
            let grads = net.backward(&cache, &batch_targets, masks.as_deref(), config.weight_decay);
            net.update_running_stats(&cache, None);

            let flat = grads.flat();
            match config.optimizer {
                Optimizer::PlainGradient => {
                    for (p, g) in net.params_flat_mut().into_iter().zip(&flat) {
                        *p -= lr * g;
                    }
                }
                Optimizer::Momentum => {
                    for ((p, v), g) in
                        net.params_flat_mut().into_iter().zip(&mut velocity).zip(&flat)
                    {
                        *v = 0.9 * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
        }
        epochs_run = epoch + 1;

        let (loss, train_acc, test_acc) = evaluate(&net, train_ds, test_ds);
        if !loss.is_finite() {
            return Err(ToyError::Diverged { epoch: epochs_run });
        }
        curve.push(EpochStat {
            epoch: epochs_run,
            train_loss: loss,
            train_accuracy: train_acc,
            test_accuracy: test_acc,
        });
        if epochs_run % cadence == 0 {
            snapshots.push((epochs_run, net.clone()));
        }
        if loss < 1e-4 {
            stopped_early = true;
            break 'epochs;
        }
    }

    if snapshots.last().map(|(e, _)| *e) != Some(epochs_run) {
        snapshots.push((epochs_run, net.clone()));
    }
    let last = curve.last().expect("at least the epoch-0 entry");
    Ok(TrainedModel {
        train_accuracy: last.train_accuracy,
        test_accuracy: last.test_accuracy,
        final_train_loss: last.train_loss,
        net,
        snapshots,
        curve,
        stopped_early,
    })
}

/// Captures the network's post-normalization, pre-ReLU responses to the
/// training inputs (inference-mode statistics) as a loadable dataset with
/// the training labels attached.
pub fn dump_activations(
    net: &ToyNet,
    data: &ToyDataset,
    model_id: &str,
    metrics: Option<Metrics>,
    hyperparams: BTreeMap<String, String>,
) -> Result<ActivationDataset, StoreError> {
    let (preacts, _) = net.forward_inference(&data.x);
    let layers = preacts
        .into_iter()
        .enumerate()
        .map(|(l, preacts)| LayerBlock {
            name: format!("hidden_{l}"),
            layer_index: l,
            kind: LayerKind::Dense,
            preacts,
            neuron_offset: 0,
        })
        .collect();
    ActivationDataset::new(layers, data.labels.clone(), model_id.to_string(), metrics, hyperparams)
}
