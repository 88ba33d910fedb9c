use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::quantized::{plan_for, Calibration};
use super::{Activation, Dataset, Grads, LayerQuant, Loss, Network};
use crate::error::{Error, Result};
use crate::formats::ReportNumber;
use crate::quantizer::PrecisionMap;

/// Samples per gradient chunk. Chunks are summed in a fixed order so the
/// result does not depend on the number of worker threads.
const CHUNK: usize = 8;

/// PACT clipping levels are kept at or above this.
const MIN_ALPHA: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, lr: 0.05, batch_size: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: ReportNumber,
    pub train_metric: ReportNumber,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

/// Accuracy for cross-entropy networks, RMSE otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub loss: ReportNumber,
    pub accuracy: Option<ReportNumber>,
    pub rmse: Option<ReportNumber>,
}

impl Metrics {
    /// Accuracy or RMSE, whichever applies.
    pub fn primary(&self) -> f64 {
        self.accuracy.as_ref().or(self.rmse.as_ref()).map_or(f64::NAN, |m| m.value)
    }

    pub(crate) fn from_outputs(net: &Network, outputs: &[Vec<f64>], labels: &[f64]) -> Self {
        let loss: f64 = outputs.iter().zip(labels).map(|(o, &t)| net.sample_loss(o, t)).sum();
        let n = labels.len().max(1) as f64;
        let (accuracy, rmse) = match net.loss {
            Loss::CrossEntropy => {
                let correct = outputs
                    .iter()
                    .zip(labels)
                    .filter(|(o, &t)| argmax(o) == t as usize)
                    .count();
                (Some((correct as f64 / n).into()), None)
            }
            Loss::Mse => {
                let se: f64 = outputs
                    .iter()
                    .zip(labels)
                    .map(|(o, &t)| {
                        if o.len() == 1 {
                            (o[0] - t).powi(2)
                        } else {
                            o.iter()
                                .enumerate()
                                .map(|(i, &y)| (y - if i == t as usize { 1.0 } else { 0.0 }).powi(2))
                                .sum::<f64>()
                                / o.len() as f64
                        }
                    })
                    .sum();
                (None, Some((se / n).sqrt().into()))
            }
        };
        Metrics { samples: labels.len(), loss: (loss / n).into(), accuracy, rmse }
    }
}

/// First index of the largest value.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.total_cmp(&v[best]).is_gt() {
            best = i;
        }
    }
    best
}

/// Full-precision evaluation.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<Metrics> {
    if data.features != net.input_features() {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} features, network takes {}",
            data.features,
            net.input_features()
        )));
    }
    let ew = net.effective_weights(&[]);
    let outputs: Vec<Vec<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| net.forward_with(data.sample(i), &ew, &[]))
        .collect();
    Ok(Metrics::from_outputs(net, &outputs, &data.labels))
}

/// Plain SGD on the full-precision network.
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<History> {
    train_loop(net, data, cfg, None)
}

/// Quantization-aware training: the forward pass sees weights, layer inputs
/// and pre-activations rounded to each layer's format, gradients pass
/// straight through the rounding except where a value saturated, and the
/// full-precision shadow weights take the update. Scales are recalibrated on
/// the training set at the start of every epoch. Real64 layers are not
/// quantized, so an all-Real64 map trains exactly like [`train`].
pub fn qat_train(net: &mut Network, data: &Dataset, map: &PrecisionMap, cfg: &TrainConfig) -> Result<History> {
    map.validate(&net.layer_ids())?;
    train_loop(net, data, cfg, Some(map))
}

fn train_loop(net: &mut Network, data: &Dataset, cfg: &TrainConfig, map: Option<&PrecisionMap>) -> Result<History> {
    if data.features != net.input_features() {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} features, network takes {}",
            data.features,
            net.input_features()
        )));
    }
    if cfg.batch_size == 0 || data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset or zero batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = History::default();

    for epoch in 0..cfg.epochs {
        let plan: Vec<Option<LayerQuant>> = match map {
            Some(m) => plan_for(net, m, &Calibration::new(net, m, data)?)?,
            None => Vec::new(),
        };
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, g) = batch_gradients(net, data, batch, &plan);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            epoch_loss += loss;
            apply(net, &g, cfg.lr / batch.len() as f64);
        }
        let mean = epoch_loss / data.len() as f64;
        let metric = super::evaluate(net, data)?.primary();
        history.epochs.push(EpochRecord { epoch, loss: mean.into(), train_metric: metric.into() });
    }
    Ok(history)
}

fn batch_gradients(net: &Network, data: &Dataset, batch: &[usize], plan: &[Option<LayerQuant>]) -> (f64, Grads) {
    let ew = net.effective_weights(plan);
    let parts: Vec<(f64, Grads)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Grads::zeros(net);
            let mut loss = 0.0;
            for &i in chunk {
                loss += net.sample_backward(data.sample(i), data.labels[i], &ew, plan, &mut g);
            }
            (loss, g)
        })
        .collect();
    let mut total = Grads::zeros(net);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add(g);
    }
    (loss, total)
}

fn apply(net: &mut Network, g: &Grads, step: f64) {
    for (li, layer) in net.layers.iter_mut().enumerate() {
        layer.weights.iter_mut().zip(&g.weights[li]).for_each(|(w, d)| *w -= step * d);
        layer.bias.iter_mut().zip(&g.bias[li]).for_each(|(b, d)| *b -= step * d);
        if layer.activation == Activation::Pact {
            layer.alpha = (layer.alpha - step * g.alpha[li]).max(MIN_ALPHA);
        }
    }
}
