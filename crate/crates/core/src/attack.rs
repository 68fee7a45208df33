//! Fast gradient sign attacks on deterministic networks and on Monte Carlo
//! Bayesian models, plus black-box transfer from a surrogate network.

use alloc::{format, string::String, vec, vec::Vec};
use core::fmt;
use core::str::FromStr;

use crate::bnn::Model;
use crate::nn::{DropoutMode, Network};
use crate::uncertainty::argmax;
use crate::{Error, Result, Tensor};

/// Default white-box ε grid.
pub const DEFAULT_EPSILONS: [f64; 7] = [0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Grid with extra resolution at small ε, for models that break early.
pub const FINE_EPSILONS: [f64; 10] = [0.001, 0.0025, 0.005, 0.01, 0.025, 0.05, 0.1, 0.2, 0.3, 0.5];

/// Monte Carlo samples used for gradient estimation unless configured otherwise.
pub const DEFAULT_GRAD_SAMPLES: usize = 100;

/// How per-sample input gradients are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradientVariant {
    /// `Σ p_i(y) ∇J_i / Σ p_i(y)`: the gradient of the NLL of the averaged prediction.
    Weighted,
    /// Plain average `Σ ∇J_i / M` of per-sample NLL gradients.
    ExpectedGradient,
}

impl GradientVariant {
    pub fn name(&self) -> &'static str {
        match self {
            GradientVariant::Weighted => "weighted",
            GradientVariant::ExpectedGradient => "expected_gradient",
        }
    }
}

impl fmt::Display for GradientVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradientVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(GradientVariant::Weighted),
            "expected_gradient" | "expected" => Ok(GradientVariant::ExpectedGradient),
            _ => Err(Error::Config(format!("unknown gradient variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelSource {
    TrueLabel,
    /// The model's own MC-mean prediction, for unlabelled inputs.
    ModelPrediction,
}

impl LabelSource {
    pub fn name(&self) -> &'static str {
        match self {
            LabelSource::TrueLabel => "true_label",
            LabelSource::ModelPrediction => "model_prediction",
        }
    }
}

impl FromStr for LabelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true_label" | "true" => Ok(LabelSource::TrueLabel),
            "model_prediction" | "prediction" => Ok(LabelSource::ModelPrediction),
            _ => Err(Error::Config(format!("unknown label source `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub grad_samples: usize,
    pub variant: GradientVariant,
    pub label_source: LabelSource,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            grad_samples: DEFAULT_GRAD_SAMPLES,
            variant: GradientVariant::Weighted,
            label_source: LabelSource::TrueLabel,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        if self.grad_samples == 0 {
            return Err(Error::Config(String::from(
                "gradient estimation needs at least one sample",
            )));
        }
        Ok(())
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::Config(format!(
            "attack magnitude must be finite and >= 0, got {epsilon}"
        )));
    }
    Ok(())
}

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// An L∞ step `ε · sign(g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    delta: Vec<f64>,
    epsilon: f64,
}

impl Perturbation {
    pub fn from_gradient(gradient: &[f64], epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(Self {
            delta: gradient.iter().map(|&g| epsilon * sign(g)).collect(),
            epsilon,
        })
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `clip(x + Δ, 0, 1)`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.delta)
            .map(|(&a, &d)| step(a, d, self.epsilon))
            .collect()
    }
}

/// `clip(a + d, 0, 1)`, pulled back by rounding ulps so that `|result − a| ≤ ε` holds in floating point.
fn step(a: f64, d: f64, epsilon: f64) -> f64 {
    let mut y = (a + d).clamp(0.0, 1.0);
    while (y - a).abs() > epsilon {
        y = if y > a { y.next_down() } else { y.next_up() };
    }
    y
}

/// Sign step of every row of `x` along the matching row of `gradient`.
pub fn sign_step(x: &Tensor, gradient: &[f64], epsilon: f64) -> Result<Tensor> {
    check_epsilon(epsilon)?;
    if gradient.len() != x.data().len() {
        return Err(Error::Shape(format!(
            "{} gradient entries for {} input values",
            gradient.len(),
            x.data().len()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(gradient)
        .map(|(&a, &g)| step(a, epsilon * sign(g), epsilon))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Standard FGSM on a deterministic network (dropout layers scaled).
pub fn fgsm(net: &Network, x: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    check_epsilon(epsilon)?;
    let g = net.nll_gradients(x, labels, DropoutMode::Scale)?;
    sign_step(x, &g.input, epsilon)
}

/// Combined input gradients of a batch and the per-image bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct BnnGradient {
    /// `n × input_dim`, row `b` for image `b`.
    pub gradients: Vec<f64>,
    /// `Σ_i p_i(y)` per image.
    pub label_mass: Vec<f64>,
    /// Images whose weighted gradient was undefined (`Σ_i p_i(y) = 0`) and
    /// fell back to the unweighted mean.
    pub degenerate: Vec<bool>,
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} inputs", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Precondition(format!(
            "label {y} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn expected_sum(model: &Model, x: &Tensor, labels: &[usize], samples: usize, seed: u64) -> Result<Vec<f64>> {
    model.logit_vjp(x, samples, seed, &mut |b, p, s| {
        s.copy_from_slice(p);
        s[labels[b]] -= 1.0;
    })
}

/// MC input gradient of the NLL for every image of `x` against `labels`.
///
/// Draws are those of [`Model::predictive_samples`] with the same `seed`.
pub fn bnn_gradient(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    samples: usize,
    variant: GradientVariant,
    seed: u64,
) -> Result<BnnGradient> {
    let n = x.rows();
    let d = x.row_len();
    check_labels(labels, n, model.num_classes())?;
    let mut mass = vec![0.0; n];
    let mut gradients = match variant {
        GradientVariant::Weighted => model.logit_vjp(x, samples, seed, &mut |b, p, s| {
            let py = p[labels[b]];
            mass[b] += py;
            for (si, pi) in s.iter_mut().zip(p) {
                *si = py * pi;
            }
            s[labels[b]] -= py;
        })?,
        GradientVariant::ExpectedGradient => model.logit_vjp(x, samples, seed, &mut |b, p, s| {
            mass[b] += p[labels[b]];
            s.copy_from_slice(p);
            s[labels[b]] -= 1.0;
        })?,
    };
    let mut degenerate = vec![false; n];
    match variant {
        GradientVariant::Weighted => {
            let flagged: Vec<usize> = (0..n).filter(|&b| !(mass[b] > 0.0)).collect();
            for b in 0..n {
                if mass[b] > 0.0 {
                    gradients[b * d..(b + 1) * d].iter_mut().for_each(|g| *g /= mass[b]);
                }
            }
            if !flagged.is_empty() {
                log::warn!(
                    "{} images give zero probability to their label under every sample",
                    flagged.len()
                );
                let sub = x.gather_rows(&flagged);
                let sub_labels: Vec<usize> = flagged.iter().map(|&b| labels[b]).collect();
                let fallback = expected_sum(model, &sub, &sub_labels, samples, seed)?;
                for (k, &b) in flagged.iter().enumerate() {
                    degenerate[b] = true;
                    for (g, f) in gradients[b * d..(b + 1) * d]
                        .iter_mut()
                        .zip(&fallback[k * d..(k + 1) * d])
                    {
                        *g = f / samples as f64;
                    }
                }
            }
        }
        GradientVariant::ExpectedGradient => {
            gradients.iter_mut().for_each(|g| *g /= samples as f64);
        }
    }
    Ok(BnnGradient {
        gradients,
        label_mass: mass,
        degenerate,
    })
}

/// The weighted gradient for one image, evaluated literally as
/// `Σ p_i(y) ∇J_i / Σ p_i(y)` from separately computed per-sample gradients.
pub fn weighted_gradient_literal(
    model: &Model,
    x: &[f64],
    label: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (probs, grads) = model.per_sample_nll_gradients(x, label, samples, seed)?;
    let c = model.num_classes();
    let d = x.len();
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    for i in 0..samples {
        let py = probs[i * c + label];
        den += py;
        for (a, g) in num.iter_mut().zip(&grads[i * d..(i + 1) * d]) {
            *a += py * g;
        }
    }
    if !(den > 0.0) {
        return Err(Error::Numeric(String::from(
            "label has zero probability under every sample",
        )));
    }
    num.iter_mut().for_each(|a| *a /= den);
    Ok(num)
}

/// MC-mean predicted class of every input.
pub fn predict(model: &Model, x: &Tensor, samples: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(model
        .predictive_samples(x, samples, seed)?
        .iter()
        .map(|s| argmax(&s.mean()))
        .collect())
}

/// Adversarial batch from [`bnn_fgsm`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutput {
    pub adversarial: Tensor,
    /// Labels the gradient was taken against.
    pub labels: Vec<usize>,
    pub degenerate: Vec<bool>,
}

/// FGSM against a Monte Carlo model: sign step along the combined gradient.
pub fn bnn_fgsm(model: &Model, x: &Tensor, labels: Option<&[usize]>, config: &AttackConfig) -> Result<AttackOutput> {
    config.validate()?;
    let labels: Vec<usize> = match (config.label_source, labels) {
        (LabelSource::TrueLabel, Some(l)) => l.to_vec(),
        (LabelSource::TrueLabel, None) => {
            return Err(Error::Precondition(String::from(
                "true-label attack on unlabelled inputs; use the model's prediction instead",
            )))
        }
        (LabelSource::ModelPrediction, _) => predict(model, x, config.grad_samples, config.seed)?,
    };
    if config.epsilon == 0.0 {
        check_labels(&labels, x.rows(), model.num_classes())?;
        return Ok(AttackOutput {
            adversarial: x.clone(),
            degenerate: vec![false; x.rows()],
            labels,
        });
    }
    let g = bnn_gradient(model, x, &labels, config.grad_samples, config.variant, config.seed)?;
    Ok(AttackOutput {
        adversarial: sign_step(x, &g.gradients, config.epsilon)?,
        labels,
        degenerate: g.degenerate,
    })
}

/// Crafts FGSM examples on `surrogate` and reports the target's MC-mean
/// accuracy on them.
pub fn blackbox_transfer(
    surrogate: &Network,
    target: &Model,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<(Tensor, f64)> {
    let adv = fgsm(surrogate, x, labels, epsilon)?;
    let pred = predict(target, &adv, samples, seed)?;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok((adv, correct as f64 / labels.len() as f64))
}
