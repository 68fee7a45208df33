//! Probabilistic backpropagation for a ReLU MLP classifier.
//!
//! Every weight (bias units included) carries an independent Gaussian
//! `N(m, v)`. Activations are summarised by per-unit means and variances
//! that are pushed through the network in closed form; the output layer's
//! Gaussian is sampled to estimate the softmax likelihood `Z`, and the
//! posterior is moved by assumed-density-filtering updates built from the
//! derivatives of `ln Z`.

use alloc::{format, string::String, vec, vec::Vec};
use core::f64::consts::{FRAC_1_SQRT_2, PI};

use super::train::{check_training_set, TrainReport};
use crate::data::Dataset;
use crate::linalg::{gemm, Op};
use crate::nn::{log_sum_exp, softmax_into, LayerSpec};
use crate::{Error, Result, Rng, Tensor};

/// Smallest variance an ADF update may leave behind.
pub const MIN_VARIANCE: f64 = 1e-12;

/// Per-unit Gaussian summary of a batch of activations, `n × width` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianActivation {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    width: usize,
}

impl GaussianActivation {
    pub fn new(mean: Vec<f64>, var: Vec<f64>, width: usize) -> Result<Self> {
        if width == 0 || mean.len() != var.len() || !mean.len().is_multiple_of(width) {
            return Err(Error::Shape(format!(
                "{} means and {} variances do not form rows of width {width}",
                mean.len(),
                var.len()
            )));
        }
        if let Some(i) = var.iter().position(|v| !(*v >= 0.0)) {
            return Err(Error::Numeric(format!("activation variance {i} is negative or NaN")));
        }
        Ok(Self { mean, var, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        self.mean.len() / self.width
    }

    /// `mean + sqrt(var) ⊙ eps` for row `b`.
    pub fn sample_into(&self, b: usize, eps: &[f64], out: &mut [f64]) {
        let r = b * self.width..(b + 1) * self.width;
        for ((o, (&m, &v)), e) in out
            .iter_mut()
            .zip(self.mean[r.clone()].iter().zip(&self.var[r]))
            .zip(eps)
        {
            *o = m + libm::sqrt(v) * e;
        }
    }
}

fn std_normal_pdf(a: f64) -> f64 {
    libm::exp(-0.5 * a * a) / libm::sqrt(2.0 * PI)
}

fn std_normal_cdf(a: f64) -> f64 {
    0.5 * libm::erfc(-a * FRAC_1_SQRT_2)
}

/// Mean and variance of `max(0, z)` for `z ~ N(m, v)`.
pub fn relu_moments(m: f64, v: f64) -> (f64, f64) {
    if v <= 0.0 {
        return (m.max(0.0), 0.0);
    }
    let s = libm::sqrt(v);
    let a = m / s;
    let (cdf, pdf) = (std_normal_cdf(a), std_normal_pdf(a));
    let mean = m * cdf + s * pdf;
    let second = (m * m + v) * cdf + m * s * pdf;
    (mean, (second - mean * mean).max(0.0))
}

/// Partials `(∂μ/∂m, ∂μ/∂v, ∂σ²/∂m, ∂σ²/∂v)` of [`relu_moments`].
fn relu_moment_partials(m: f64, v: f64) -> (f64, f64, f64, f64) {
    if v <= 0.0 {
        let on = if m > 0.0 { 1.0 } else { 0.0 };
        return (on, 0.0, 0.0, on);
    }
    let s = libm::sqrt(v);
    let a = m / s;
    let (cdf, pdf) = (std_normal_cdf(a), std_normal_pdf(a));
    let mean = m * cdf + s * pdf;
    (cdf, pdf / (2.0 * s), 2.0 * mean * (1.0 - cdf), cdf - mean * pdf / s)
}

/// `ln Z` estimate for output moments `(mean, var)` of one input and its
/// gradient with respect to those moments.
fn output_log_z(mean: &[f64], var: &[f64], label: usize, eps: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let c = mean.len();
    let k = eps.len() / c;
    let mut z = vec![0.0; c];
    let mut probs = vec![0.0; k * c];
    // ln softmax_y per sample; Z is averaged in the log domain so that
    // confident wrong predictions do not underflow it to zero.
    let mut log_py = vec![0.0; k];
    for ((e, p), lp) in eps.chunks_exact(c).zip(probs.chunks_exact_mut(c)).zip(&mut log_py) {
        for j in 0..c {
            z[j] = mean[j] + libm::sqrt(var[j]) * e[j];
        }
        let lse = log_sum_exp(&z);
        *lp = z[label] - lse;
        softmax_into(&z, p);
    }
    let top = log_py.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut g_mean = vec![0.0; c];
    let mut g_var = vec![0.0; c];
    for ((e, p), &lp) in eps.chunks_exact(c).zip(probs.chunks_exact(c)).zip(&log_py) {
        // Relative weight p_y / max p_y of this sample.
        let r = libm::exp(lp - top);
        total += r;
        for j in 0..c {
            let d = r * (if j == label { 1.0 } else { 0.0 } - p[j]);
            g_mean[j] += d;
            if var[j] > 0.0 {
                g_var[j] += d * e[j] / (2.0 * libm::sqrt(var[j]));
            }
        }
    }
    let log_z = top + libm::log(total) - libm::log(k as f64);
    if !log_z.is_finite() || !(log_z <= 0.0) {
        return Err(Error::Numeric(format!("likelihood estimate ln Z = {log_z} is invalid")));
    }
    for g in g_mean.iter_mut().chain(g_var.iter_mut()) {
        *g /= total;
    }
    Ok((log_z, g_mean, g_var))
}

/// One fully connected layer: weights `[fan_out × (fan_in + 1)]`, the last
/// column multiplying a constant bias unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PbpLayer {
    fan_in: usize,
    fan_out: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl PbpLayer {
    pub fn new(fan_in: usize, fan_out: usize, mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let n = fan_out * (fan_in + 1);
        if fan_in == 0 || fan_out == 0 || mean.len() != n || var.len() != n {
            return Err(Error::Shape(format!(
                "layer {fan_in} -> {fan_out} needs {n} means and variances, got {} and {}",
                mean.len(),
                var.len()
            )));
        }
        if let Some(i) = var.iter().position(|v| !(*v >= 0.0)) {
            return Err(Error::Precondition(format!("weight variance {i} is negative or NaN")));
        }
        Ok(Self {
            fan_in,
            fan_out,
            mean,
            var,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.fan_out
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    fn scale(&self) -> f64 {
        libm::sqrt((self.fan_in + 1) as f64)
    }
}

/// Input moments with the bias unit appended: `(m, v, m² + v)`.
fn augment(a: &GaussianActivation) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, w) = (a.rows(), a.width);
    let mut m = Vec::with_capacity(n * (w + 1));
    let mut v = Vec::with_capacity(n * (w + 1));
    for b in 0..n {
        m.extend_from_slice(&a.mean[b * w..(b + 1) * w]);
        m.push(1.0);
        v.extend_from_slice(&a.var[b * w..(b + 1) * w]);
        v.push(0.0);
    }
    let sq = m.iter().zip(&v).map(|(m, v)| m * m + v).collect();
    (m, v, sq)
}

/// Cached moments of a forward pass.
#[derive(Debug, Clone)]
pub struct MomentTrace {
    /// Input moments of each linear layer.
    inputs: Vec<GaussianActivation>,
    /// Output moments of each linear layer; the last is the network output.
    pre: Vec<GaussianActivation>,
}

impl MomentTrace {
    pub fn output(&self) -> &GaussianActivation {
        self.pre.last().expect("at least one layer")
    }

    /// Moments after every linear layer, in order.
    pub fn layer_outputs(&self) -> &[GaussianActivation] {
        &self.pre
    }
}

/// Derivatives of the log-likelihood estimate with respect to every weight's
/// mean and variance, in [`PbpPosterior::layers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogZGradients {
    pub log_z: f64,
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

/// Outcome of one accepted ADF update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdfOutcome {
    pub log_z: f64,
    /// Variances raised to [`MIN_VARIANCE`].
    pub clamped: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PbpPosterior {
    layers: Vec<PbpLayer>,
}

impl PbpPosterior {
    pub fn new(layers: Vec<PbpLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config(String::from("PBP network needs at least one layer")));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(Error::Dimension {
                    layer: i + 1,
                    kind: "dense",
                    detail: format!(
                        "expects {} inputs, previous layer has {}",
                        pair[1].fan_in, pair[0].fan_out
                    ),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Layer widths `sizes[0] → … → sizes[last]` with every weight's mean
    /// drawn from the `N(0, 1)` prior and its variance set to the prior's 1.
    pub fn init(sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(String::from("PBP network needs input and output widths")));
        }
        let layers = sizes
            .windows(2)
            .map(|p| {
                let n = p[1] * (p[0] + 1);
                let mean = (0..n).map(|_| rng.normal()).collect();
                PbpLayer::new(p[0], p[1], mean, vec![1.0; n])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    /// Widths of an MLP given as `dense, relu, dense, …, dense[, softmax]`.
    pub fn sizes_from_specs(specs: &[LayerSpec]) -> Result<Vec<usize>> {
        let body = match specs.last() {
            Some(LayerSpec::Softmax) => &specs[..specs.len() - 1],
            _ => specs,
        };
        let mut sizes = Vec::new();
        for (i, layer) in body.iter().enumerate() {
            match (i % 2, layer) {
                (0, LayerSpec::Dense { fan_in, fan_out }) => {
                    if sizes.is_empty() {
                        sizes.push(*fan_in);
                    }
                    sizes.push(*fan_out);
                }
                (1, LayerSpec::Relu) if i + 1 < body.len() => {}
                _ => {
                    return Err(Error::Config(format!(
                        "PBP supports dense layers separated by ReLU only; layer {i} is {}",
                        layer.kind()
                    )))
                }
            }
        }
        if sizes.is_empty() {
            return Err(Error::Config(String::from(
                "PBP network needs at least one dense layer",
            )));
        }
        Ok(sizes)
    }

    pub fn layers(&self) -> &[PbpLayer] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].fan_in];
        s.extend(self.layers.iter().map(|l| l.fan_out));
        s
    }

    /// The network as layer specs, ending in softmax.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        super::train::mlp(&self.sizes(), 0.0)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.mean.len()).sum()
    }

    pub fn moment_trace(&self, x: &Tensor) -> Result<MomentTrace> {
        if x.row_len() != self.input_dim() {
            return Err(Error::Dimension {
                layer: 0,
                kind: "dense",
                detail: format!("expects rows of width {}, got {:?}", self.input_dim(), x.shape()),
            });
        }
        let n = x.rows();
        let mut a = GaussianActivation::new(x.data().to_vec(), vec![0.0; x.data().len()], self.input_dim())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            if li > 0 {
                let z: &GaussianActivation = pre.last().unwrap();
                let (mut m, mut v) = (vec![0.0; z.mean.len()], vec![0.0; z.mean.len()]);
                for k in 0..z.mean.len() {
                    (m[k], v[k]) = relu_moments(z.mean[k], z.var[k]);
                }
                a = GaussianActivation {
                    mean: m,
                    var: v,
                    width: z.width,
                };
            }
            let (ma, va, sa) = augment(&a);
            let k = layer.fan_in + 1;
            let s = layer.scale();
            let mut mz = vec![0.0; n * layer.fan_out];
            gemm(n, k, layer.fan_out, 1.0, &ma, Op::N, &layer.mean, Op::T, 0.0, &mut mz);
            let m2: Vec<f64> = layer.mean.iter().map(|w| w * w).collect();
            let mut vz = vec![0.0; n * layer.fan_out];
            gemm(n, k, layer.fan_out, 1.0, &va, Op::N, &m2, Op::T, 0.0, &mut vz);
            gemm(n, k, layer.fan_out, 1.0, &sa, Op::N, &layer.var, Op::T, 1.0, &mut vz);
            // Scaling after the products keeps each row's result independent of the batch size.
            mz.iter_mut().for_each(|v| *v /= s);
            vz.iter_mut().for_each(|v| *v = (*v / (s * s)).max(0.0));
            if mz.iter().chain(&vz).any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite moments after layer {li}")));
            }
            inputs.push(a.clone());
            pre.push(GaussianActivation {
                mean: mz,
                var: vz,
                width: layer.fan_out,
            });
        }
        Ok(MomentTrace { inputs, pre })
    }

    /// Output-layer Gaussian `N(m^z, v^z)` for every input row.
    pub fn forward_moments_batch(&self, x: &Tensor) -> Result<GaussianActivation> {
        Ok(self.moment_trace(x)?.pre.pop().unwrap())
    }

    pub fn forward_moments(&self, x: &[f64]) -> Result<GaussianActivation> {
        self.forward_moments_batch(&Tensor::matrix(1, x.len(), x.to_vec())?)
    }

    /// Backpropagates output-moment gradients `(g_mean, g_var)`; returns the
    /// input gradient and, if requested, per-layer weight gradients.
    fn backward(
        &self,
        trace: &MomentTrace,
        g_mean: &[f64],
        g_var: &[f64],
        want_params: bool,
    ) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = trace.output().rows();
        let mut gm = g_mean.to_vec();
        let mut gv = g_var.to_vec();
        let mut pm = vec![Vec::new(); self.layers.len()];
        let mut pv = vec![Vec::new(); self.layers.len()];
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let (out, k) = (layer.fan_out, layer.fan_in + 1);
            let s = layer.scale();
            let (ma, va, sa) = augment(&trace.inputs[li]);
            let m2: Vec<f64> = layer.mean.iter().map(|w| w * w).collect();
            if want_params {
                let mut dm = vec![0.0; out * k];
                gemm(out, n, k, 1.0, &gm, Op::T, &ma, Op::N, 0.0, &mut dm);
                let mut gva = vec![0.0; out * k];
                gemm(out, n, k, 1.0, &gv, Op::T, &va, Op::N, 0.0, &mut gva);
                for ((d, w), g) in dm.iter_mut().zip(&layer.mean).zip(&gva) {
                    *d = *d / s + 2.0 * w * g / (s * s);
                }
                let mut dv = vec![0.0; out * k];
                gemm(out, n, k, 1.0, &gv, Op::T, &sa, Op::N, 0.0, &mut dv);
                dv.iter_mut().for_each(|v| *v /= s * s);
                pm[li] = dm;
                pv[li] = dv;
            }
            // Gradients with respect to the (augmented) input moments.
            let mut dma = vec![0.0; n * k];
            gemm(n, out, k, 1.0, &gm, Op::N, &layer.mean, Op::N, 0.0, &mut dma);
            let mut gvv = vec![0.0; n * k];
            gemm(n, out, k, 1.0, &gv, Op::N, &layer.var, Op::N, 0.0, &mut gvv);
            for ((d, m), g) in dma.iter_mut().zip(&ma).zip(&gvv) {
                *d = *d / s + 2.0 * m * g / (s * s);
            }
            let m2v: Vec<f64> = m2.iter().zip(&layer.var).map(|(a, b)| a + b).collect();
            let mut dva = vec![0.0; n * k];
            gemm(n, out, k, 1.0, &gv, Op::N, &m2v, Op::N, 0.0, &mut dva);
            dva.iter_mut().for_each(|v| *v /= s * s);
            let strip =
                |v: Vec<f64>| -> Vec<f64> { v.chunks_exact(k).flat_map(|r| r[..k - 1].iter().copied()).collect() };
            let (dma, dva) = (strip(dma), strip(dva));
            if li == 0 {
                return (dma, pm, pv);
            }
            let z = &trace.pre[li - 1];
            gm = vec![0.0; dma.len()];
            gv = vec![0.0; dma.len()];
            for i in 0..dma.len() {
                let (mu_m, mu_v, var_m, var_v) = relu_moment_partials(z.mean[i], z.var[i]);
                gm[i] = dma[i] * mu_m + dva[i] * var_m;
                gv[i] = dma[i] * mu_v + dva[i] * var_v;
            }
        }
        unreachable!("loop returns at the first layer")
    }

    /// Input gradient of `Σ g_mean · m^z + Σ g_var · v^z` (output moments).
    pub fn backward_input(&self, trace: &MomentTrace, g_mean: &[f64], g_var: &[f64]) -> Vec<f64> {
        self.backward(trace, g_mean, g_var, false).0
    }

    /// Monte Carlo estimate of `ln Z = ln E[softmax_y(z)]`, `z ~ N(m^z, v^z)`,
    /// using the unit-normal draws `eps` (`K × classes`), and its exact
    /// gradient with respect to every weight mean and variance.
    pub fn log_z_gradients(&self, x: &[f64], label: usize, eps: &[f64]) -> Result<LogZGradients> {
        let c = self.output_dim();
        if label >= c {
            return Err(Error::Precondition(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        if eps.is_empty() || !eps.len().is_multiple_of(c) {
            return Err(Error::Precondition(String::from("need K >= 1 output noise rows")));
        }
        let trace = self.moment_trace(&Tensor::matrix(1, x.len(), x.to_vec())?)?;
        let out = trace.output();
        let (log_z, g_mean, g_var) = output_log_z(&out.mean, &out.var, label, eps)?;
        let (_, mean, var) = self.backward(&trace, &g_mean, &g_var, true);
        Ok(LogZGradients { log_z, mean, var })
    }

    /// `m ← m + v·∂m`, `v ← v − v²·(∂m² − 2∂v)`, variances clamped at
    /// [`MIN_VARIANCE`]. Returns the number of clamps.
    pub fn apply_adf(&mut self, grads: &LogZGradients) -> Result<u64> {
        let finite = grads.mean.iter().chain(&grads.var).flatten().all(|g| g.is_finite());
        if !finite {
            return Err(Error::Numeric(String::from("non-finite log-likelihood gradient")));
        }
        let mut clamped = 0;
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let (gm, gv) = (&grads.mean[li], &grads.var[li]);
            for (((m, v), &a), &b) in layer.mean.iter_mut().zip(layer.var.iter_mut()).zip(gm).zip(gv) {
                let old = *v;
                *m += old * a;
                let nv = old - old * old * (a * a - 2.0 * b);
                if nv < MIN_VARIANCE {
                    *v = MIN_VARIANCE;
                    clamped += 1;
                } else {
                    *v = nv;
                }
            }
        }
        if clamped > 0 {
            log::debug!("ADF update clamped {clamped} variances");
        }
        Ok(clamped)
    }

    /// One ADF step on `(x, label)` with `k` output samples.
    ///
    /// Same result as [`log_z_gradients`](Self::log_z_gradients) followed by
    /// [`apply_adf`](Self::apply_adf), but streams through each weight matrix
    /// a constant number of times instead of materialising the gradients.
    pub fn adf_update(&mut self, x: &[f64], label: usize, k: usize, rng: &mut Rng) -> Result<AdfOutcome> {
        if k == 0 {
            return Err(Error::Precondition(String::from("need K >= 1 inner samples")));
        }
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                layer: 0,
                kind: "dense",
                detail: format!("expects {} inputs, got {}", self.input_dim(), x.len()),
            });
        }
        let c = self.output_dim();
        if label >= c {
            return Err(Error::Precondition(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let mut eps = vec![0.0; k * c];
        rng.fill_normal(&mut eps);

        // Forward: augmented input moments and output moments of every layer.
        let nl = self.layers.len();
        let mut inputs: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(nl);
        let mut pre: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(nl);
        for (li, layer) in self.layers.iter().enumerate() {
            let (mut am, mut av) = match pre.last() {
                None => (x.to_vec(), vec![0.0; x.len()]),
                Some((zm, zv)) => zm.iter().zip(zv).map(|(&m, &v)| relu_moments(m, v)).unzip(),
            };
            am.push(1.0);
            av.push(0.0);
            let sa: Vec<f64> = am.iter().zip(&av).map(|(m, v)| m * m + v).collect();
            let kk = layer.fan_in + 1;
            let s = layer.scale();
            let mut mz = Vec::with_capacity(layer.fan_out);
            let mut vz = Vec::with_capacity(layer.fan_out);
            for (wm, wv) in layer.mean.chunks_exact(kk).zip(layer.var.chunks_exact(kk)) {
                let (mut acc_m, mut acc_v) = (0.0, 0.0);
                for i in 0..kk {
                    acc_m += wm[i] * am[i];
                    acc_v += wm[i] * wm[i] * av[i] + wv[i] * sa[i];
                }
                mz.push(acc_m / s);
                vz.push((acc_v / (s * s)).max(0.0));
            }
            if mz.iter().chain(&vz).any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite moments after layer {li}")));
            }
            inputs.push((am, av));
            pre.push((mz, vz));
        }
        let (zm, zv) = &pre[nl - 1];
        let (log_z, gm, gv) = output_log_z(zm, zv, label, &eps)?;

        // Backward: gradients with respect to every layer's output moments.
        let mut grads = Vec::with_capacity(nl);
        grads.push((gm, gv));
        for li in (1..nl).rev() {
            let layer = &self.layers[li];
            let (gm, gv) = grads.last().unwrap();
            let (kk, s) = (layer.fan_in + 1, layer.scale());
            let mut dm = vec![0.0; layer.fan_in];
            let mut dv = vec![0.0; layer.fan_in];
            let mut tv = vec![0.0; layer.fan_in];
            for (j, (wm, wv)) in layer.mean.chunks_exact(kk).zip(layer.var.chunks_exact(kk)).enumerate() {
                let (g1, g2) = (gm[j] / s, gv[j] / (s * s));
                for i in 0..layer.fan_in {
                    dm[i] += g1 * wm[i];
                    tv[i] += g2 * wv[i];
                    dv[i] += g2 * (wm[i] * wm[i] + wv[i]);
                }
            }
            let am = &inputs[li].0;
            let (zm, zv) = &pre[li - 1];
            let mut next_m = Vec::with_capacity(layer.fan_in);
            let mut next_v = Vec::with_capacity(layer.fan_in);
            for i in 0..layer.fan_in {
                let d_mean = dm[i] + 2.0 * am[i] * tv[i];
                let (mu_m, mu_v, var_m, var_v) = relu_moment_partials(zm[i], zv[i]);
                next_m.push(d_mean * mu_m + dv[i] * var_m);
                next_v.push(d_mean * mu_v + dv[i] * var_v);
            }
            grads.push((next_m, next_v));
        }
        grads.reverse();
        if !grads.iter().all(|(m, v)| m.iter().chain(v).all(|g| g.is_finite())) {
            return Err(Error::Numeric(String::from("non-finite log-likelihood gradient")));
        }

        // Update in place.
        let mut clamped = 0;
        for ((layer, (gm, gv)), (am, av)) in self.layers.iter_mut().zip(&grads).zip(&inputs) {
            let (kk, s) = (layer.fan_in + 1, layer.scale());
            let s2 = s * s;
            for (j, (wm, wv)) in layer
                .mean
                .chunks_exact_mut(kk)
                .zip(layer.var.chunks_exact_mut(kk))
                .enumerate()
            {
                let (g1, g2) = (gm[j], gv[j]);
                for i in 0..kk {
                    let sa = am[i] * am[i] + av[i];
                    let a = g1 * am[i] / s + 2.0 * wm[i] * g2 * av[i] / s2;
                    let b = g2 * sa / s2;
                    let old = wv[i];
                    wm[i] += old * a;
                    let nv = old - old * old * (a * a - 2.0 * b);
                    if nv < MIN_VARIANCE {
                        wv[i] = MIN_VARIANCE;
                        clamped += 1;
                    } else {
                        wv[i] = nv;
                    }
                }
            }
        }
        if clamped > 0 {
            log::debug!("ADF update clamped {clamped} variances");
        }
        Ok(AdfOutcome { log_z, clamped })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PbpConfig {
    /// Passes over the training set.
    pub passes: usize,
    /// Output samples per likelihood estimate.
    pub inner_samples: usize,
}

impl Default for PbpConfig {
    fn default() -> Self {
        Self {
            passes: 1,
            inner_samples: 100,
        }
    }
}

/// ADF passes over `train` in shuffled order. Numerically rejected updates are
/// skipped and counted in the report; the epoch loss is the mean `−ln Z`.
pub fn train_pbp(
    sizes: &[usize],
    train: &Dataset,
    config: &PbpConfig,
    seed: u64,
) -> Result<(PbpPosterior, TrainReport)> {
    if config.passes == 0 || config.inner_samples == 0 {
        return Err(Error::Config(String::from(
            "PBP needs at least one pass and one inner sample",
        )));
    }
    let root = Rng::new(seed);
    let mut post = PbpPosterior::init(sizes, &mut root.derive(0))?;
    let labels = check_training_set(train, post.input_dim())?;
    let mut shuffle = root.derive(1);
    let mut noise = root.derive(2);
    let mut report = TrainReport::default();
    for pass in 0..config.passes {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle.shuffle(&mut order);
        let mut total = 0.0;
        let mut accepted = 0u64;
        for &i in &order {
            match post.adf_update(train.image(i), labels[i], config.inner_samples, &mut noise) {
                Ok(out) => {
                    total -= out.log_z;
                    accepted += 1;
                    report.clamped += out.clamped;
                }
                Err(Error::Numeric(msg)) => {
                    log::warn!("skipped ADF update on example {i}: {msg}");
                    report.skipped += 1;
                }
                Err(e) => return Err(e),
            }
            report.steps += 1;
        }
        let mean = if accepted > 0 {
            total / accepted as f64
        } else {
            f64::NAN
        };
        log::info!(
            "pass {}: mean -ln Z {mean:.5}, {} clamped variances, {} skipped updates",
            pass + 1,
            report.clamped,
            report.skipped
        );
        report.epoch_losses.push(mean);
    }
    Ok((post, report))
}
