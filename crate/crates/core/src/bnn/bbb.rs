//! Bayes by Backprop: a diagonal Gaussian posterior over all network
//! parameters, trained on the reparametrised variational free energy.

use alloc::{format, string::String, vec, vec::Vec};

use super::train::{batch_of, check_training_set, epoch_batches, TrainConfig, TrainReport};
use crate::data::Dataset;
use crate::nn::{Adam, DropoutMode, LayerSpec, Network};
use crate::{Error, Result, Rng, Tensor};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn gaussian_log_density(w: f64, sigma: f64) -> f64 {
    let z = w / sigma;
    -HALF_LN_2PI - libm::log(sigma) - 0.5 * z * z
}

/// `ln(1 + e^ρ)`, exact for large `ρ`.
pub(crate) fn softplus(rho: f64) -> f64 {
    if rho > 30.0 {
        rho
    } else {
        libm::log1p(libm::exp(rho))
    }
}

/// Inverse of [`softplus`] for `sigma > 0`.
pub(crate) fn softplus_inverse(sigma: f64) -> f64 {
    if sigma > 30.0 {
        sigma
    } else {
        libm::log(libm::expm1(sigma))
    }
}

/// `α·N(0, σ₁²) + (1 − α)·N(0, σ₂²)` applied independently to every weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleMixturePrior {
    alpha: f64,
    sigma1: f64,
    sigma2: f64,
    // ln α − ln σ₁ − ½ln 2π and the same for the narrow component.
    log_c1: f64,
    log_c2: f64,
}

impl Default for ScaleMixturePrior {
    fn default() -> Self {
        Self::build(0.5, 1.0, libm::exp(-6.0))
    }
}

impl ScaleMixturePrior {
    pub fn new(alpha: f64, sigma1: f64, sigma2: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("mixture weight must lie in [0, 1], got {alpha}")));
        }
        if !(sigma2 > 0.0 && sigma1 >= sigma2 && sigma1.is_finite()) {
            return Err(Error::Config(format!(
                "need sigma1 >= sigma2 > 0, got sigma1 = {sigma1}, sigma2 = {sigma2}"
            )));
        }
        Ok(Self::build(alpha, sigma1, sigma2))
    }

    fn build(alpha: f64, sigma1: f64, sigma2: f64) -> Self {
        Self {
            alpha,
            sigma1,
            sigma2,
            log_c1: libm::log(alpha) - libm::log(sigma1) - HALF_LN_2PI,
            log_c2: libm::log1p(-alpha) - libm::log(sigma2) - HALF_LN_2PI,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma1(&self) -> f64 {
        self.sigma1
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Log-density of one weight and its derivative with respect to the weight.
    pub fn log_density_and_grad(&self, w: f64) -> (f64, f64) {
        if self.alpha == 1.0 {
            return (gaussian_log_density(w, self.sigma1), -w / (self.sigma1 * self.sigma1));
        }
        if self.alpha == 0.0 {
            return (gaussian_log_density(w, self.sigma2), -w / (self.sigma2 * self.sigma2));
        }
        let a = self.log_c1 - 0.5 * (w / self.sigma1) * (w / self.sigma1);
        let b = self.log_c2 - 0.5 * (w / self.sigma2) * (w / self.sigma2);
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        let t = libm::exp(lo - hi);
        let log_p = hi + libm::log1p(t);
        // Component responsibilities.
        let r_hi = 1.0 / (1.0 + t);
        let (r1, r2) = if a >= b { (r_hi, 1.0 - r_hi) } else { (1.0 - r_hi, r_hi) };
        let grad = -w * (r1 / (self.sigma1 * self.sigma1) + r2 / (self.sigma2 * self.sigma2));
        (log_p, grad)
    }

    pub fn log_density(&self, w: f64) -> f64 {
        self.log_density_and_grad(w).0
    }
}

/// Independent `N(μ, σ²)` per network parameter, `σ = softplus(ρ)`.
///
/// The means live in a [`Network`] so that the mean network is available
/// directly; `ρ` follows the same flat parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWeightPosterior {
    mean: Network,
    rho: Vec<f64>,
}

impl GaussianWeightPosterior {
    pub fn new(mean: Network, rho: Vec<f64>) -> Result<Self> {
        if rho.len() != mean.num_params() {
            return Err(Error::Shape(format!(
                "{} scale parameters for {} weights",
                rho.len(),
                mean.num_params()
            )));
        }
        if let Some(i) = rho.iter().position(|r| !r.is_finite()) {
            return Err(Error::Numeric(format!("non-finite scale parameter at weight {i}")));
        }
        Ok(Self { mean, rho })
    }

    /// Posterior with the given per-weight variances (all must be positive).
    pub fn from_variances(mean: Network, variances: &[f64]) -> Result<Self> {
        if let Some(i) = variances.iter().position(|v| !(*v > 0.0)) {
            return Err(Error::Precondition(format!("variance of weight {i} is not positive")));
        }
        let rho = variances.iter().map(|v| softplus_inverse(libm::sqrt(*v))).collect();
        Self::new(mean, rho)
    }

    pub fn mean_network(&self) -> &Network {
        &self.mean
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.params()
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn num_weights(&self) -> usize {
        self.rho.len()
    }

    /// Trainable values: one mean and one scale parameter per weight.
    pub fn num_variational_params(&self) -> usize {
        2 * self.rho.len()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.rho
            .iter()
            .map(|&r| {
                let s = softplus(r);
                s * s
            })
            .collect()
    }

    /// `μ + σ ⊙ ε` for a given unit-normal vector.
    pub fn params_for(&self, eps: &[f64]) -> Vec<f64> {
        self.mean()
            .iter()
            .zip(&self.rho)
            .zip(eps)
            .map(|((m, &r), e)| m + softplus(r) * e)
            .collect()
    }

    pub fn sample_eps(&self, rng: &mut Rng) -> Vec<f64> {
        let mut eps = vec![0.0; self.num_weights()];
        rng.fill_normal(&mut eps);
        eps
    }

    /// One weight sample as a concrete network.
    pub fn sample_network(&self, rng: &mut Rng) -> Result<Network> {
        let eps = self.sample_eps(rng);
        self.mean.with_params(self.params_for(&eps))
    }

    /// `ln q(w)` of the sample `w = μ + σ ⊙ ε`.
    pub fn log_q(&self, eps: &[f64]) -> f64 {
        self.rho
            .iter()
            .zip(eps)
            .map(|(&r, e)| -HALF_LN_2PI - libm::log(softplus(r)) - 0.5 * e * e)
            .sum()
    }
}

/// Loss and gradients of one minibatch of the variational objective.
#[derive(Debug, Clone)]
pub struct ElboGradients {
    /// `kl_weight · (ln q(w) − ln p(w)) + Σ NLL`.
    pub loss: f64,
    /// Summed negative log-likelihood of the batch.
    pub nll: f64,
    /// Single-sample estimate `ln q(w) − ln p(w)`.
    pub kl: f64,
    pub grad_mean: Vec<f64>,
    pub grad_rho: Vec<f64>,
}

/// Reparametrised single-sample objective for the weight sample `μ + σ ⊙ eps`.
pub fn minibatch_objective(
    post: &GaussianWeightPosterior,
    prior: &ScaleMixturePrior,
    x: &Tensor,
    labels: &[usize],
    kl_weight: f64,
    eps: &[f64],
) -> Result<ElboGradients> {
    if eps.len() != post.num_weights() {
        return Err(Error::Shape(format!(
            "{} noise values for {} weights",
            eps.len(),
            post.num_weights()
        )));
    }
    let n_w = post.num_weights();
    // σ and dσ/dρ, computed once per weight.
    let mut sigma = Vec::with_capacity(n_w);
    let mut dsigma = Vec::with_capacity(n_w);
    let mut w = Vec::with_capacity(n_w);
    let mut log_q = 0.0;
    for ((&rho, &m), &e) in post.rho.iter().zip(post.mean()).zip(eps) {
        let t = libm::exp(-libm::fabs(rho));
        let (s, ds) = if rho > 30.0 {
            (rho, 1.0)
        } else if rho >= 0.0 {
            (rho + libm::log1p(t), 1.0 / (1.0 + t))
        } else {
            (libm::log1p(t), t / (1.0 + t))
        };
        log_q += -HALF_LN_2PI - libm::log(s) - 0.5 * e * e;
        sigma.push(s);
        dsigma.push(ds);
        w.push(m + s * e);
    }
    let net = post.mean.with_params(w)?;
    let g = net.nll_gradients(x, labels, DropoutMode::Scale)?;
    let n = labels.len() as f64;
    let nll = g.loss * n;
    let mut grad_mean = g.params;
    let mut grad_rho = vec![0.0; n_w];
    let mut log_p = 0.0;
    for (i, (gm, gr)) in grad_mean.iter_mut().zip(grad_rho.iter_mut()).enumerate() {
        let (s, e) = (sigma[i], eps[i]);
        let (lp, dlp) = prior.log_density_and_grad(net.params()[i]);
        log_p += lp;
        // d/dw of the whole loss: NLL term (mean gradient times n) plus the
        // weight path of ln q and ln p.
        let g_w = *gm * n + kl_weight * (-e / s - dlp);
        // Direct partials of ln q(w; μ, σ) at fixed w.
        let d_mu = kl_weight * e / s;
        let d_sigma = kl_weight * (-1.0 + e * e) / s;
        *gm = g_w + d_mu;
        *gr = (g_w * e + d_sigma) * dsigma[i];
    }
    let kl = log_q - log_p;
    let loss = kl_weight * kl + nll;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite variational objective {loss}")));
    }
    Ok(ElboGradients {
        loss,
        nll,
        kl,
        grad_mean,
        grad_rho,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BbbConfig {
    pub train: TrainConfig,
    pub prior: ScaleMixturePrior,
    /// Initial `ρ` for every weight.
    pub init_rho: f64,
}

impl Default for BbbConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            prior: ScaleMixturePrior::default(),
            init_rho: -5.0,
        }
    }
}

/// Minibatch Adam on the variational objective with a single weight sample
/// per step and KL weight `1 / num_batches`. The reported epoch loss is the
/// mean per-example objective.
pub fn train_bbb(
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    train: &Dataset,
    config: &BbbConfig,
    seed: u64,
) -> Result<(GaussianWeightPosterior, TrainReport)> {
    config.train.validate()?;
    if !config.init_rho.is_finite() {
        return Err(Error::Config(String::from("initial scale parameter must be finite")));
    }
    if layers
        .iter()
        .any(|l| matches!(l, LayerSpec::Dropout { rate } if *rate > 0.0))
    {
        return Err(Error::Config(String::from("BBB networks do not use dropout")));
    }
    let mut mean = Network::new(input_shape, layers)?;
    let labels = check_training_set(train, mean.input_dim())?;
    let root = Rng::new(seed);
    mean.init(&mut root.derive(0));
    let n = mean.num_params();
    let mut post = GaussianWeightPosterior::new(mean, vec![config.init_rho; n])?;
    let mut shuffle = root.derive(1);
    let mut noise = root.derive(2);
    let mut adam_mean = Adam::new(n, config.train.adam);
    let mut adam_rho = Adam::new(n, config.train.adam);
    let mut report = TrainReport::default();
    let num_batches = train.len().div_ceil(config.train.batch_size);
    let kl_weight = 1.0 / num_batches as f64;
    let mut eps = vec![0.0; n];
    for epoch in 0..config.train.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(train.len(), config.train.batch_size, &mut shuffle) {
            let (x, y) = batch_of(train, labels, &idx)?;
            noise.fill_normal(&mut eps);
            let g = minibatch_objective(&post, &config.prior, &x, &y, kl_weight, &eps).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("step {}: {m}", report.steps + 1)),
                other => other,
            })?;
            adam_mean.step(post.mean.params_mut(), &g.grad_mean)?;
            adam_rho.step(&mut post.rho, &g.grad_rho)?;
            total += g.loss;
            report.steps += 1;
        }
        let mean_loss = total / train.len() as f64;
        log::info!("epoch {}: mean objective per example {mean_loss:.5}", epoch + 1);
        report.epoch_losses.push(mean_loss);
    }
    Ok((post, report))
}
