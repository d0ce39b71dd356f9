//! Feed-forward ReLU networks: representation, evaluation, training and accuracy.

mod nnet;
mod train;

pub use nnet::{load_nnet, parse_nnet, write_nnet, NNetText};
pub use train::{loss_and_gradient, mse_loss, train, train_with_history, Gradients};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// One affine map followed by an activation. `weights` has shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::dim(weights.nrows(), bias.len(), "layer bias length"));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut z = &self.weights * x + &self.bias;
        if self.activation == Activation::Relu {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        z
    }
}

/// Input normalization constants carried by NNet files.
///
/// `means` and `ranges` have `input_dim + 1` entries; the last one applies to
/// every output.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub input_min: Vec<f64>,
    pub input_max: Vec<f64>,
    pub means: Vec<f64>,
    pub ranges: Vec<f64>,
}

impl Normalization {
    pub fn identity(input_dim: usize) -> Self {
        Self {
            input_min: vec![f64::MIN; input_dim],
            input_max: vec![f64::MAX; input_dim],
            means: vec![0.0; input_dim + 1],
            ranges: vec![1.0; input_dim + 1],
        }
    }

    /// Maps a raw input to the network's native space (clamped to the min/max).
    pub fn normalize_input(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(i, &v)| {
                let v = v.clamp(self.input_min[i], self.input_max[i]);
                (v - self.means[i]) / self.ranges[i]
            })
            .collect()
    }

    /// Same affine transform without clamping; used for property boxes.
    pub fn normalize_unclamped(&self, i: usize, raw: f64) -> f64 {
        (raw - self.means[i]) / self.ranges[i]
    }

    pub fn denormalize_output(&self, y: &[f64]) -> Vec<f64> {
        let k = self.means.len() - 1;
        y.iter().map(|&v| v * self.ranges[k] + self.means[k]).collect()
    }
}

/// A layered affine + ReLU network. Hidden layers are ReLU, the last layer
/// may be Identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    normalization: Normalization,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let input_dim = layers
            .first()
            .map(Layer::input_dim)
            .ok_or_else(|| Error::Invalid("network needs at least one layer".into()))?;
        Self::with_normalization(layers, Normalization::identity(input_dim))
    }

    pub fn with_normalization(layers: Vec<Layer>, normalization: Normalization) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(Error::Invalid(format!(
                    "layer {} expects {} inputs but layer {} produces {}",
                    k + 1,
                    pair[1].input_dim(),
                    k,
                    pair[0].output_dim()
                )));
            }
        }
        let last = layers.len() - 1;
        if let Some(k) = layers[..last]
            .iter()
            .position(|l| l.activation != Activation::Relu)
        {
            return Err(Error::Invalid(format!(
                "hidden layer {k} must use ReLU activation"
            )));
        }
        let d = layers[0].input_dim();
        if d == 0 || layers[last].output_dim() == 0 {
            return Err(Error::Invalid("zero-width input or output".into()));
        }
        if normalization.means.len() != d + 1
            || normalization.ranges.len() != d + 1
            || normalization.input_min.len() != d
            || normalization.input_max.len() != d
        {
            return Err(Error::Invalid("normalization length mismatch".into()));
        }
        Ok(Self {
            layers,
            normalization,
        })
    }

    /// Builds a network from layer widths `[in, h1, ..., out]` with ReLU hidden
    /// layers, an Identity output layer, and uniform He-style initialization.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Invalid("need at least input and output sizes".into()));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
                let scale = (6.0 / fan_in as f64).sqrt();
                let w = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-scale..scale));
                let b = DVector::from_fn(fan_out, |_, _| rng.gen_range(-0.1..0.1));
                let act = if k + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer::new(w, b, act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, k: usize) -> &Layer {
        &self.layers[k]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Total number of ReLU neurons.
    pub fn relu_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.activation == Activation::Relu)
            .map(Layer::output_dim)
            .sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Replaces the layer parameters while keeping the architecture.
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(self.input_dim(), x.len(), "forward input"));
        }
        Ok(self.forward_from(0, x).as_slice().to_vec())
    }

    /// Evaluates layers `from..` on a value that is the input of layer `from`.
    pub fn forward_from(&self, from: usize, x: &[f64]) -> DVector<f64> {
        let mut v = DVector::from_column_slice(x);
        for layer in &self.layers[from..] {
            v = layer.apply(&v);
        }
        v
    }

    /// Applies the stored normalization to a raw input before evaluation and
    /// de-normalizes the output.
    pub fn forward_normalized(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.input_dim() {
            return Err(Error::dim(self.input_dim(), raw.len(), "forward input"));
        }
        let y = self.forward(&self.normalization.normalize_input(raw))?;
        Ok(self.normalization.denormalize_output(&y))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Training pairs with optional explicit class labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::dim(inputs.len(), targets.len(), "dataset pairs"));
        }
        Ok(Self {
            inputs,
            targets,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.inputs.len() {
            return Err(Error::dim(self.inputs.len(), labels.len(), "dataset labels"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Samples `n` inputs uniformly from a box and labels them with the
    /// network's own outputs.
    pub fn sample_from_network<R: Rng + ?Sized>(
        net: &Network,
        lb: &[f64],
        ub: &[f64],
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                lb.iter()
                    .zip(ub)
                    .map(|(&l, &u)| rng.gen_range(l..=u))
                    .collect()
            })
            .collect();
        let targets = inputs
            .iter()
            .map(|x| net.forward(x))
            .collect::<Result<Vec<_>>>()?;
        Self::new(inputs, targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        match &self.labels {
            Some(l) => l[i],
            None => argmax(&self.targets[i]),
        }
    }

    pub fn check_dims(&self, net: &Network) -> Result<()> {
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            if x.len() != net.input_dim() {
                return Err(Error::dim(net.input_dim(), x.len(), "dataset input"));
            }
            if y.len() != net.output_dim() {
                return Err(Error::dim(net.output_dim(), y.len(), "dataset target"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_per_iteration: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            epochs_per_iteration: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fraction of samples whose argmax output matches the label.
pub fn accuracy(net: &Network, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0usize;
    for (i, x) in data.inputs.iter().enumerate() {
        if argmax(&net.forward(x)?) == data.label(i) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag_net() -> Network {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        Network::new(vec![Layer::new(w, b, Activation::Identity).unwrap()]).unwrap()
    }

    #[test]
    fn single_affine_layer() {
        assert_eq!(diag_net().forward(&[1.0, 1.0]).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn zero_network_maps_to_zero() {
        let layers = vec![
            Layer::new(DMatrix::zeros(3, 2), DVector::zeros(3), Activation::Relu).unwrap(),
            Layer::new(DMatrix::zeros(2, 3), DVector::zeros(2), Activation::Identity).unwrap(),
        ];
        let net = Network::new(layers).unwrap();
        assert_eq!(net.forward(&[5.0, -7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_length() {
        assert!(matches!(
            diag_net().forward(&[1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn rejects_non_chaining_layers() {
        let layers = vec![
            Layer::new(DMatrix::zeros(3, 2), DVector::zeros(3), Activation::Relu).unwrap(),
            Layer::new(DMatrix::zeros(2, 4), DVector::zeros(2), Activation::Identity).unwrap(),
        ];
        assert!(Network::new(layers).is_err());
    }

    #[test]
    fn rejects_identity_hidden_layer() {
        let layers = vec![
            Layer::new(DMatrix::zeros(3, 2), DVector::zeros(3), Activation::Identity).unwrap(),
            Layer::new(DMatrix::zeros(2, 3), DVector::zeros(2), Activation::Identity).unwrap(),
        ];
        assert!(Network::new(layers).is_err());
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::random(&[3, 5, 4, 2], &mut rng).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut v = x.clone();
            for layer in net.layers() {
                let mut out = vec![0.0; layer.output_dim()];
                for r in 0..layer.output_dim() {
                    let mut acc = layer.bias[r];
                    for c in 0..layer.input_dim() {
                        acc += layer.weights[(r, c)] * v[c];
                    }
                    out[r] = match layer.activation {
                        Activation::Relu if acc < 0.0 => 0.0,
                        _ => acc,
                    };
                }
                v = out;
            }
            let y = net.forward(&x).unwrap();
            for (a, b) in y.iter().zip(&v) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn self_labelled_accuracy_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Network::random(&[2, 4, 3], &mut rng).unwrap();
        let data =
            LabeledDataset::sample_from_network(&net, &[-1.0, -1.0], &[1.0, 1.0], 200, &mut rng)
                .unwrap();
        assert_eq!(accuracy(&net, &data).unwrap(), 1.0);
    }

    #[test]
    fn constant_net_on_balanced_labels_is_half() {
        let layers = vec![Layer::new(
            DMatrix::zeros(2, 1),
            DVector::from_vec(vec![1.0, 0.0]),
            Activation::Identity,
        )
        .unwrap()];
        let net = Network::new(layers).unwrap();
        let inputs: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
        let targets = vec![vec![0.0, 0.0]; 100];
        let labels = (0..100).map(|i| i % 2).collect();
        let data = LabeledDataset::new(inputs, targets)
            .unwrap()
            .with_labels(labels)
            .unwrap();
        assert_eq!(accuracy(&net, &data).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_is_permutation_invariant_and_matches_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = Network::random(&[2, 6, 3], &mut rng).unwrap();
        let inputs: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let labels: Vec<usize> = (0..300).map(|_| rng.gen_range(0..3)).collect();
        let data = LabeledDataset::new(inputs.clone(), vec![vec![0.0; 3]; 300])
            .unwrap()
            .with_labels(labels.clone())
            .unwrap();
        let mut count = 0;
        for (x, &l) in inputs.iter().zip(&labels) {
            let y = net.forward(x).unwrap();
            let mut best = 0;
            for k in 1..y.len() {
                if y[k] > y[best] {
                    best = k;
                }
            }
            if best == l {
                count += 1;
            }
        }
        let acc = accuracy(&net, &data).unwrap();
        assert_eq!(acc, count as f64 / 300.0);

        let mut order: Vec<usize> = (0..300).collect();
        order.reverse();
        let shuffled = LabeledDataset::new(
            order.iter().map(|&i| inputs[i].clone()).collect(),
            vec![vec![0.0; 3]; 300],
        )
        .unwrap()
        .with_labels(order.iter().map(|&i| labels[i]).collect())
        .unwrap();
        assert_eq!(accuracy(&net, &shuffled).unwrap(), acc);
    }

    #[test]
    fn accuracy_rejects_empty() {
        assert!(matches!(
            accuracy(&diag_net(), &LabeledDataset::default()),
            Err(Error::EmptyDataset)
        ));
    }
}
