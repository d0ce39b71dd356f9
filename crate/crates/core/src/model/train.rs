use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Activation, LabeledDataset, Network, TrainConfig};
use crate::error::{Error, Result};

/// Per-layer parameter gradients, shaped like the layers they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net
                .layers()
                .iter()
                .map(|l| DMatrix::zeros(l.output_dim(), l.input_dim()))
                .collect(),
            biases: net
                .layers()
                .iter()
                .map(|l| DVector::zeros(l.output_dim()))
                .collect(),
        }
    }
}

/// Mean over samples of the mean squared error across output coordinates.
pub fn mse_loss(net: &Network, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let m = net.output_dim() as f64;
    let total: f64 = inputs
        .iter()
        .zip(targets)
        .map(|(x, t)| {
            let y = net.forward_from(0, x);
            y.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / m
        })
        .sum();
    total / inputs.len() as f64
}

/// Loss and its exact gradient by backpropagation over the given samples.
pub fn loss_and_gradient(
    net: &Network,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> (f64, Gradients) {
    let mut grads = Gradients::zeros_like(net);
    let batch = inputs.len() as f64;
    let m = net.output_dim() as f64;
    let mut loss = 0.0;

    for (x, t) in inputs.iter().zip(targets) {
        // activations[k] is the input of layer k
        let mut activations = vec![DVector::from_column_slice(x)];
        let mut pre = Vec::with_capacity(net.num_layers());
        for layer in net.layers() {
            let z = &layer.weights * activations.last().unwrap() + &layer.bias;
            let a = match layer.activation {
                Activation::Relu => z.map(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
            };
            pre.push(z);
            activations.push(a);
        }
        let y = activations.last().unwrap();
        let t = DVector::from_column_slice(t);
        let diff = y - &t;
        loss += diff.norm_squared() / m;

        let mut delta = diff * (2.0 / (m * batch));
        for k in (0..net.num_layers()).rev() {
            let layer = net.layer(k);
            if layer.activation == Activation::Relu {
                delta.zip_apply(&pre[k], |d, z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            grads.weights[k] += &delta * activations[k].transpose();
            grads.biases[k] += &delta;
            if k > 0 {
                delta = layer.weights.tr_mul(&delta);
            }
        }
    }
    (loss / batch, grads)
}

/// Minibatch SGD on mean-squared error, warm-started from `net`.
///
/// Sample order is shuffled per epoch from `cfg.seed`, so identical inputs
/// give bit-identical results.
pub fn train(net: &Network, data: &LabeledDataset, cfg: &TrainConfig) -> Result<Network> {
    train_with_history(net, data, cfg).map(|(n, _)| n)
}

/// Like [`train`], also returning the mean batch loss of every epoch.
pub fn train_with_history(
    net: &Network,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.check_dims(net)?;

    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs_per_iteration);

    for epoch in 0..cfg.epochs_per_iteration {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| data.inputs[i].clone()).collect();
            let ts: Vec<Vec<f64>> = chunk.iter().map(|&i| data.targets[i].clone()).collect();
            let (loss, grads) = loss_and_gradient(&net, &xs, &ts);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            for (k, layer) in net.layers_mut().iter_mut().enumerate() {
                layer.weights -= &grads.weights[k] * cfg.learning_rate;
                layer.bias -= &grads.biases[k] * cfg.learning_rate;
            }
            epoch_loss += loss;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok((net, history))
}
