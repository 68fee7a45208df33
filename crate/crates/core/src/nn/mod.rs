//! Minimal dense-network core: a fixed layer set with reverse-mode gradients.
//!
//! A [`Network`] is a validated sequence of [`LayerSpec`]s plus one flat
//! parameter buffer. Each parameterised layer owns a contiguous span of that
//! buffer (weights first, then biases), which is the layout optimisers,
//! Gaussian posteriors and checkpoints all share.
//!
//! Activations are batch-major: a batch of `n` inputs is an `n × d` matrix,
//! image inputs are flattened `C·H·W` rows.

mod layers;
mod optim;

use alloc::{format, string::String, vec, vec::Vec};
use core::fmt;
use core::ops::Range;
use core::str::FromStr;

pub use optim::{Adam, AdamConfig, Sgd};

use crate::{Error, Result, Rng, Tensor};

/// One layer of a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Dense {
        fan_in: usize,
        fan_out: usize,
    },
    Relu,
    Softmax,
    /// Zeroes each unit with probability `rate`.
    Dropout {
        rate: f64,
    },
    /// Valid padding, stride 1.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    /// 2×2 window, stride 2.
    MaxPool2d,
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d => "maxpool2d",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Number of parameters (weights then biases).
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => fan_in * fan_out + fan_out,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => out_channels * in_channels * kernel_h * kernel_w + out_channels,
            _ => 0,
        }
    }

    /// Fan-in used for weight initialisation, `None` for parameter-free layers.
    pub fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { fan_in, .. } => Some(fan_in),
            LayerSpec::Conv2d {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some(in_channels * kernel_h * kernel_w),
            _ => None,
        }
    }

    /// Number of weights, excluding biases.
    pub fn weight_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => fan_in * fan_out,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => out_channels * in_channels * kernel_h * kernel_w,
            _ => 0,
        }
    }

    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let dim_err = |detail: String| Error::Dimension {
            layer: index,
            kind: self.kind(),
            detail,
        };
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => {
                if fan_in == 0 || fan_out == 0 {
                    return Err(dim_err(format!("dense sizes must be positive, got {fan_in}x{fan_out}")));
                }
                if input != [fan_in] {
                    return Err(dim_err(format!("expects input [{fan_in}], got {input:?}")));
                }
                Ok(vec![fan_out])
            }
            LayerSpec::Relu | LayerSpec::Softmax => Ok(input.to_vec()),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::Config(format!(
                        "dropout rate {rate} at layer {index} is outside [0, 1)"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 {
                    return Err(dim_err(String::from("conv2d sizes must be positive")));
                }
                match *input {
                    [c, h, w] if c == in_channels && h >= kernel_h && w >= kernel_w => {
                        Ok(vec![out_channels, h - kernel_h + 1, w - kernel_w + 1])
                    }
                    _ => Err(dim_err(format!(
                        "expects [{in_channels}, >={kernel_h}, >={kernel_w}], got {input:?}"
                    ))),
                }
            }
            LayerSpec::MaxPool2d => match *input {
                [c, h, w] if h >= 2 && w >= 2 => Ok(vec![c, h / 2, w / 2]),
                _ => Err(dim_err(format!("expects [C, H>=2, W>=2], got {input:?}"))),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => write!(f, "dense {fan_in} {fan_out}"),
            LayerSpec::Dropout { rate } => write!(f, "dropout {rate}"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => write!(f, "conv2d {in_channels} {out_channels} {kernel_h} {kernel_w}"),
            other => f.write_str(other.kind()),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut it = s.split_whitespace();
        let kind = it
            .next()
            .ok_or_else(|| Error::Config(String::from("empty layer spec")))?;
        let rest: Vec<&str> = it.collect();
        let bad = || Error::Config(format!("malformed layer spec `{s}`"));
        let ints = |n: usize| -> Result<Vec<usize>> {
            if rest.len() != n {
                return Err(bad());
            }
            rest.iter().map(|t| t.parse::<usize>().map_err(|_| bad())).collect()
        };
        let spec = match kind {
            "dense" => {
                let v = ints(2)?;
                LayerSpec::Dense {
                    fan_in: v[0],
                    fan_out: v[1],
                }
            }
            "conv2d" => {
                let v = ints(4)?;
                LayerSpec::Conv2d {
                    in_channels: v[0],
                    out_channels: v[1],
                    kernel_h: v[2],
                    kernel_w: v[3],
                }
            }
            "dropout" => {
                if rest.len() != 1 {
                    return Err(bad());
                }
                LayerSpec::Dropout {
                    rate: rest[0].parse().map_err(|_| bad())?,
                }
            }
            "relu" | "softmax" | "maxpool2d" | "flatten" if rest.is_empty() => match kind {
                "relu" => LayerSpec::Relu,
                "softmax" => LayerSpec::Softmax,
                "maxpool2d" => LayerSpec::MaxPool2d,
                _ => LayerSpec::Flatten,
            },
            _ => return Err(bad()),
        };
        Ok(spec)
    }
}

/// How dropout layers behave during a forward pass.
#[derive(Debug)]
pub enum DropoutMode<'a> {
    /// Deterministic prediction: activations scaled by `1 - rate`.
    Scale,
    /// Training: an independent mask for every example in the batch.
    PerExample(&'a mut Rng),
    /// Monte Carlo draw: one mask per layer, shared by every example, so the
    /// draw acts as a single thinned network.
    Shared(&'a mut Rng),
}

impl DropoutMode<'_> {
    fn reborrow(&mut self) -> DropoutMode<'_> {
        match self {
            DropoutMode::Scale => DropoutMode::Scale,
            DropoutMode::PerExample(r) => DropoutMode::PerExample(r),
            DropoutMode::Shared(r) => DropoutMode::Shared(r),
        }
    }
}

/// Cached activations of a forward pass over a contiguous layer range.
#[derive(Debug, Clone)]
pub struct Trace {
    batch: usize,
    range: Range<usize>,
    /// `acts[i]` is the input of layer `range.start + i`; the last entry is the output.
    acts: Vec<Vec<f64>>,
    aux: Vec<layers::Aux>,
}

impl Trace {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least its input")
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.acts.pop().expect("trace has at least its input")
    }

    /// Input of layer `layer` (absolute index, inside the traced range).
    pub fn layer_input(&self, layer: usize) -> &[f64] {
        &self.acts[layer - self.range.start]
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Same layout as [`Network::params`]; zero outside the traced range.
    pub params: Vec<f64>,
    /// Gradient with respect to the traced range's input, when requested.
    pub input: Option<Vec<f64>>,
}

/// Mean negative log-likelihood and its gradients.
#[derive(Debug, Clone)]
pub struct NllGradients {
    pub loss: f64,
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the per-example input shape of layer `i`; the last entry is the output shape.
    shapes: Vec<Vec<usize>>,
    /// `offsets[i]` is the first parameter of layer `i`; the last entry is the total.
    offsets: Vec<usize>,
    params: Vec<f64>,
}

impl Network {
    /// Validates the layer chain against `input_shape`. Parameters start at zero.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {input_shape:?}")));
        }
        if layers.is_empty() {
            return Err(Error::Config(String::from("network has no layers")));
        }
        let mut shapes = vec![input_shape.clone()];
        let mut offsets = vec![0];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer.output_shape(i, &shapes[i])?;
            shapes.push(next);
            offsets.push(offsets[i] + layer.param_count());
        }
        let total = *offsets.last().unwrap();
        Ok(Self {
            input_shape,
            layers,
            shapes,
            offsets,
            params: vec![0.0; total],
        })
    }

    /// Weights ~ Normal(0, 1/fan_in), biases zero.
    pub fn init(&mut self, rng: &mut Rng) {
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(fan_in) = layer.fan_in() {
                let std = libm::sqrt(1.0 / fan_in as f64);
                let start = self.offsets[i];
                let nw = layer.weight_count();
                for w in &mut self.params[start..start + nw] {
                    *w = std * rng.normal();
                }
                for b in &mut self.params[start + nw..self.offsets[i + 1]] {
                    *b = 0.0;
                }
            }
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().unwrap().iter().product()
    }

    /// Flattened input width of layer `i`.
    pub fn layer_input_dim(&self, i: usize) -> usize {
        self.shapes[i].iter().product()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Parameter span `[weights.., biases..]` of layer `i`.
    pub fn param_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "network has {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Same architecture with a different parameter vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Network> {
        let mut net = Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            offsets: self.offsets.clone(),
            params: Vec::new(),
        };
        net.params = vec![0.0; self.params.len()];
        net.set_params(params)?;
        Ok(net)
    }

    pub fn has_dropout(&self) -> bool {
        self.first_dropout().is_some()
    }

    pub fn first_dropout(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Dropout { rate } if *rate > 0.0))
    }

    /// Index of the final softmax layer, if the network ends in one.
    pub fn softmax_layer(&self) -> Option<usize> {
        match self.layers.last() {
            Some(LayerSpec::Softmax) => Some(self.layers.len() - 1),
            _ => None,
        }
    }

    fn batch_of(&self, layer: usize, x: &[f64]) -> Result<usize> {
        let d = self.layer_input_dim(layer);
        if x.is_empty() || !x.len().is_multiple_of(d) {
            return Err(Error::Dimension {
                layer,
                kind: self.layers.get(layer).map_or("output", |l| l.kind()),
                detail: format!("input of {} values is not a positive multiple of width {d}", x.len()),
            });
        }
        Ok(x.len() / d)
    }

    /// Runs the whole network on an `n × input_dim` batch.
    pub fn forward(&self, x: &Tensor, mode: DropoutMode<'_>) -> Result<Tensor> {
        let trace = self.forward_trace(x, mode)?;
        let n = trace.batch;
        Tensor::matrix(n, self.output_dim(), trace.into_output())
    }

    /// Whole-network forward pass keeping every activation for [`Network::backward`].
    pub fn forward_trace(&self, x: &Tensor, mode: DropoutMode<'_>) -> Result<Trace> {
        if x.row_len() != self.input_dim() {
            return Err(Error::Dimension {
                layer: 0,
                kind: self.layers[0].kind(),
                detail: format!("expects rows of width {}, got {:?}", self.input_dim(), x.shape()),
            });
        }
        self.forward_range(x.data(), 0..self.layers.len(), mode)
    }

    /// Forward pass over `range` given the flattened batch input of `range.start`.
    pub fn forward_range(&self, x: &[f64], range: Range<usize>, mut mode: DropoutMode<'_>) -> Result<Trace> {
        assert!(range.start <= range.end && range.end <= self.layers.len());
        let batch = self.batch_of(range.start, x)?;
        let mut acts = Vec::with_capacity(range.len() + 1);
        let mut aux = Vec::with_capacity(range.len());
        acts.push(x.to_vec());
        for i in range.clone() {
            let input = acts.last().unwrap();
            let (out, a) = layers::forward(self, i, input, batch, mode.reborrow());
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite activation after layer {i} ({})",
                    self.layers[i].kind()
                )));
            }
            acts.push(out);
            aux.push(a);
        }
        Ok(Trace {
            batch,
            range,
            acts,
            aux,
        })
    }

    /// Vector-Jacobian product through the traced layers.
    ///
    /// `grad_out` is the gradient with respect to the output of layer
    /// `end - 1`, where `end <= trace range end`; layers from `end` on are
    /// skipped, which is how the fused softmax/NLL gradient enters below the
    /// softmax.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_out: &[f64],
        end: usize,
        want_params: bool,
        want_input: bool,
    ) -> Gradients {
        assert!(end >= trace.range.start && end <= trace.range.end);
        let start = trace.range.start;
        let batch = trace.batch;
        assert_eq!(grad_out.len(), batch * self.layer_input_dim(end));
        let mut params = if want_params {
            vec![0.0; self.params.len()]
        } else {
            Vec::new()
        };
        let mut grad = grad_out.to_vec();
        for i in (start..end).rev() {
            let need_input = want_input || i > start;
            let pgrad = if want_params && self.layers[i].param_count() > 0 {
                Some(&mut params[self.offsets[i]..self.offsets[i + 1]])
            } else {
                None
            };
            grad = layers::backward(
                self,
                i,
                &trace.acts[i - start],
                &trace.acts[i - start + 1],
                &trace.aux[i - start],
                &grad,
                batch,
                pgrad,
                need_input,
            );
        }
        Gradients {
            params,
            input: want_input.then_some(grad),
        }
    }

    /// Mean negative log-likelihood of `labels` and its gradients with respect
    /// to the parameters and the input batch. The network must end in a softmax.
    pub fn nll_gradients(&self, x: &Tensor, labels: &[usize], mode: DropoutMode<'_>) -> Result<NllGradients> {
        let trace = self.forward_trace(x, mode)?;
        let (loss, dlogits) = self.fused_nll(&trace, labels)?;
        let sm = self.softmax_layer().unwrap();
        let g = self.backward(&trace, &dlogits, sm, true, true);
        Ok(NllGradients {
            loss,
            params: g.params,
            input: g.input.unwrap(),
        })
    }

    /// Mean NLL and its gradient with respect to the softmax input (the logits).
    pub fn fused_nll(&self, trace: &Trace, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let sm = self.softmax_layer().ok_or_else(|| {
            Error::Config(String::from(
                "negative log-likelihood needs a network ending in softmax",
            ))
        })?;
        let batch = trace.batch;
        if labels.len() != batch {
            return Err(Error::Shape(format!("{} labels for a batch of {batch}", labels.len())));
        }
        let c = self.output_dim();
        let logits = trace.layer_input(sm);
        let probs = trace.output();
        let mut loss = 0.0;
        let mut d = probs.to_vec();
        let scale = 1.0 / batch as f64;
        for (b, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Precondition(format!("label {y} out of range for {c} classes")));
            }
            let z = &logits[b * c..(b + 1) * c];
            loss += log_sum_exp(z) - z[y];
            let row = &mut d[b * c..(b + 1) * c];
            row[y] -= 1.0;
            for v in row {
                *v *= scale;
            }
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        Ok((loss, d))
    }

    /// Mean NLL without gradients.
    pub fn nll(&self, x: &Tensor, labels: &[usize], mode: DropoutMode<'_>) -> Result<f64> {
        let trace = self.forward_trace(x, mode)?;
        Ok(self.fused_nll(&trace, labels)?.0)
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(z.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = libm::exp(v - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests;
