use alloc::{format, string::String, vec, vec::Vec};

use crate::data::Dataset;
use crate::nn::{Adam, AdamConfig, DropoutMode, LayerSpec, Network};
use crate::{Error, Result, Rng, Tensor, NUM_CLASSES};

/// Minibatch Adam schedule shared by the network-based trainers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 128,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(String::from("epochs and batch size must be positive")));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.adam.lr
            )));
        }
        Ok(())
    }
}

/// Loss trajectory of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean minibatch loss of each epoch, in order.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    /// Updates rejected for numerical reasons (PBP only).
    pub skipped: u64,
    /// Variance clamps applied (PBP only).
    pub clamped: u64,
}

/// Fully connected ReLU classifier `sizes[0] → … → sizes[last]` ending in softmax,
/// with dropout after every hidden activation when `dropout > 0`.
pub fn mlp(sizes: &[usize], dropout: f64) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (i, pair) in sizes.windows(2).enumerate() {
        layers.push(LayerSpec::Dense {
            fan_in: pair[0],
            fan_out: pair[1],
        });
        if i + 2 < sizes.len() {
            layers.push(LayerSpec::Relu);
            if dropout > 0.0 {
                layers.push(LayerSpec::Dropout { rate: dropout });
            }
        }
    }
    layers.push(LayerSpec::Softmax);
    layers
}

/// LeNet-style MNIST CNN: two 5×5 conv/pool stages, a 500-unit dense layer
/// followed by dropout at `dropout`, and a softmax output.
pub fn lenet(dropout: f64) -> (Vec<usize>, Vec<LayerSpec>) {
    let layers = vec![
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 20,
            kernel_h: 5,
            kernel_w: 5,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d,
        LayerSpec::Conv2d {
            in_channels: 20,
            out_channels: 50,
            kernel_h: 5,
            kernel_w: 5,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d,
        LayerSpec::Flatten,
        LayerSpec::Dense {
            fan_in: 800,
            fan_out: 500,
        },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropout },
        LayerSpec::Dense {
            fan_in: 500,
            fan_out: NUM_CLASSES,
        },
        LayerSpec::Softmax,
    ];
    (vec![1, 28, 28], layers)
}

pub(crate) fn check_training_set(train: &Dataset, input_dim: usize) -> Result<&[usize]> {
    let labels = train.require_labels()?;
    if train.dim() != input_dim {
        return Err(Error::Dimension {
            layer: 0,
            kind: "input",
            detail: format!(
                "model input width {input_dim} but dataset rows have width {}",
                train.dim()
            ),
        });
    }
    if train.is_empty() {
        return Err(Error::Precondition(String::from("empty training set")));
    }
    Ok(labels)
}

/// Minibatch index order for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

pub(crate) fn batch_of(train: &Dataset, labels: &[usize], idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let d = train.dim();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(train.image(i));
    }
    Ok((
        Tensor::matrix(idx.len(), d, data)?,
        idx.iter().map(|&i| labels[i]).collect(),
    ))
}

fn train_network(mut net: Network, train: &Dataset, config: &TrainConfig, seed: u64) -> Result<(Network, TrainReport)> {
    config.validate()?;
    let labels = check_training_set(train, net.input_dim())?;
    let root = Rng::new(seed);
    net.init(&mut root.derive(0));
    let mut shuffle = root.derive(1);
    let mut masks = root.derive(2);
    let mut adam = Adam::new(net.num_params(), config.adam);
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(train.len(), config.batch_size, &mut shuffle);
        for idx in &batches {
            let (x, y) = batch_of(train, labels, idx)?;
            let g = net.nll_gradients(&x, &y, DropoutMode::PerExample(&mut masks))?;
            adam.step(net.params_mut(), &g.params)?;
            total += g.loss;
            report.steps += 1;
        }
        let mean = total / batches.len() as f64;
        log::info!("epoch {}: mean loss {mean:.5}", epoch + 1);
        report.epoch_losses.push(mean);
    }
    Ok((net, report))
}

/// Trains a point-estimate network by minibatch Adam on the mean NLL.
/// Dropout layers, if present, are active during training.
pub fn train_baseline(
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    train: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Network, TrainReport)> {
    train_network(Network::new(input_shape, layers)?, train, config, seed)
}

/// Same objective as [`train_baseline`], but the network must contain a dropout
/// layer since its masks are what MC-dropout samples at prediction time.
pub fn train_mc_dropout(
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    train: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Network, TrainReport)> {
    let net = Network::new(input_shape, layers)?;
    if !net.has_dropout() {
        return Err(Error::Config(String::from(
            "MC-dropout needs at least one dropout layer with positive rate",
        )));
    }
    train_network(net, train, config, seed)
}
