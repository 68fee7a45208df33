//! Bayesian model families behind one Monte Carlo predictive interface.
//!
//! A model's stochasticity is indexed by a draw number: draw `i` of a call
//! seeded with `seed` always uses `Rng::new(seed).derive(i)`. The same draw
//! applies to every input of a batch (one weight sample, one dropout mask
//! set, one output-noise vector), so results do not depend on how inputs are
//! batched or in which order draws are evaluated.

mod bbb;
mod pbp;
mod train;

use alloc::{format, string::String, vec, vec::Vec};
use core::fmt;
use core::str::FromStr;

pub use bbb::{minibatch_objective, train_bbb, BbbConfig, ElboGradients, GaussianWeightPosterior, ScaleMixturePrior};
pub use pbp::{
    relu_moments, train_pbp, AdfOutcome, GaussianActivation, LogZGradients, MomentTrace, PbpConfig, PbpLayer,
    PbpPosterior,
};
pub use train::{lenet, mlp, train_baseline, train_mc_dropout, TrainConfig, TrainReport};

use crate::nn::{softmax_into, DropoutMode, Network};
use crate::{Error, Result, Rng, Tensor};

/// `M` Monte Carlo class-probability vectors for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSampleSet {
    probs: Vec<f64>,
    classes: usize,
}

impl PredictiveSampleSet {
    /// Row-major `M × classes`; every row must be a distribution (within 1e-9).
    pub fn new(probs: Vec<f64>, classes: usize) -> Result<Self> {
        if classes == 0 || probs.is_empty() || !probs.len().is_multiple_of(classes) {
            return Err(Error::Precondition(String::from(
                "a predictive sample set needs M >= 1 rows of class probabilities",
            )));
        }
        for (i, row) in probs.chunks_exact(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!(
                    "sample row {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(Self { probs, classes })
    }

    pub fn num_samples(&self) -> usize {
        self.probs.len() / self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    /// Monte Carlo estimate of the posterior predictive distribution.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.classes];
        for row in self.probs.chunks_exact(self.classes) {
            for (m, p) in mean.iter_mut().zip(row) {
                *m += p;
            }
        }
        let m = self.num_samples() as f64;
        mean.iter_mut().for_each(|v| *v /= m);
        mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Deterministic,
    McDropout,
    Bbb,
    Pbp,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Deterministic => "deterministic",
            Family::McDropout => "mc_dropout",
            Family::Bbb => "bbb",
            Family::Pbp => "pbp",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" | "baseline" => Ok(Family::Deterministic),
            "mc_dropout" | "mcdropout" | "dropout" => Ok(Family::McDropout),
            "bbb" => Ok(Family::Bbb),
            "pbp" => Ok(Family::Pbp),
            _ => Err(Error::Config(format!("unknown model family `{s}`"))),
        }
    }
}

/// A trained model of any family.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    /// Point-estimate network; dropout layers (if any) are scaled, never sampled.
    Deterministic(Network),
    /// Network whose dropout masks are resampled for every draw.
    McDropout(Network),
    Bbb(GaussianWeightPosterior),
    Pbp(PbpPosterior),
}

/// Per-draw hook used by [`Model::logit_vjp`]: given the image index and the
/// draw's class probabilities, write the gradient seed for that draw's logits.
pub type SeedFn<'a> = dyn FnMut(usize, &[f64], &mut [f64]) + 'a;

impl Model {
    pub fn family(&self) -> Family {
        match self {
            Model::Deterministic(_) => Family::Deterministic,
            Model::McDropout(_) => Family::McDropout,
            Model::Bbb(_) => Family::Bbb,
            Model::Pbp(_) => Family::Pbp,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Deterministic(n) | Model::McDropout(n) => n.input_dim(),
            Model::Bbb(p) => p.mean_network().input_dim(),
            Model::Pbp(p) => p.input_dim(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::Deterministic(n) | Model::McDropout(n) => n.output_dim(),
            Model::Bbb(p) => p.mean_network().output_dim(),
            Model::Pbp(p) => p.output_dim(),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.row_len() != self.input_dim() {
            return Err(Error::Dimension {
                layer: 0,
                kind: "input",
                detail: format!("model expects rows of width {}, got {:?}", self.input_dim(), x.shape()),
            });
        }
        Ok(())
    }

    fn network_split(net: &Network) -> Result<usize> {
        net.softmax_layer()
            .ok_or_else(|| Error::Config(String::from("classifier network must end in softmax")))?;
        Ok(net.first_dropout().unwrap_or(net.layers().len()))
    }

    /// `samples` Monte Carlo class-probability rows for every input in `x`.
    pub fn predictive_samples(&self, x: &Tensor, samples: usize, seed: u64) -> Result<Vec<PredictiveSampleSet>> {
        if samples == 0 {
            return Err(Error::Precondition(String::from(
                "at least one Monte Carlo sample is required",
            )));
        }
        self.check_input(x)?;
        let n = x.rows();
        let c = self.num_classes();
        let mut out = vec![vec![0.0; samples * c]; n];
        let root = Rng::new(seed);
        let mut store = |draw: usize, probs: &[f64]| {
            for (b, row) in probs.chunks_exact(c).enumerate() {
                out[b][draw * c..(draw + 1) * c].copy_from_slice(row);
            }
        };
        match self {
            Model::Deterministic(net) => {
                let p = net.forward(x, DropoutMode::Scale)?;
                for i in 0..samples {
                    store(i, p.data());
                }
            }
            Model::McDropout(net) => {
                let split = Self::network_split(net)?;
                let prefix = net.forward_range(x.data(), 0..split, DropoutMode::Scale)?;
                for i in 0..samples {
                    let mut rng = root.derive(i as u64);
                    let suffix = net.forward_range(
                        prefix.output(),
                        split..net.layers().len(),
                        DropoutMode::Shared(&mut rng),
                    )?;
                    store(i, suffix.output());
                }
            }
            Model::Bbb(post) => {
                for i in 0..samples {
                    let net = post.sample_network(&mut root.derive(i as u64))?;
                    let p = net.forward(x, DropoutMode::Scale)?;
                    store(i, p.data());
                }
            }
            Model::Pbp(post) => {
                let out_moments = post.forward_moments_batch(x)?;
                let mut z = vec![0.0; c];
                let mut p = vec![0.0; n * c];
                for i in 0..samples {
                    let eps = pbp_draw(&root, i, c);
                    for b in 0..n {
                        out_moments.sample_into(b, &eps, &mut z);
                        softmax_into(&z, &mut p[b * c..(b + 1) * c]);
                    }
                    store(i, &p);
                }
            }
        }
        out.into_iter()
            .map(|probs| PredictiveSampleSet::new(probs, c))
            .collect()
    }

    /// Accumulated input gradient `Σ_i Σ_c seed_i[c] · ∂z_i[c]/∂x` over
    /// `samples` draws, where `z_i` are the logits of draw `i` and `seed`
    /// supplies each draw's logit seed from its probabilities.
    ///
    /// Returns an `n × input_dim` buffer. Draws match [`Model::predictive_samples`]
    /// for the same `seed`.
    pub fn logit_vjp(&self, x: &Tensor, samples: usize, seed: u64, seed_fn: &mut SeedFn<'_>) -> Result<Vec<f64>> {
        if samples == 0 {
            return Err(Error::Precondition(String::from(
                "at least one Monte Carlo sample is required",
            )));
        }
        self.check_input(x)?;
        let n = x.rows();
        let c = self.num_classes();
        let root = Rng::new(seed);
        let mut seeds = vec![0.0; n * c];
        let mut acc = vec![0.0; n * c];
        let mut collect = |probs: &[f64], acc: &mut [f64], seeds: &mut [f64]| {
            for b in 0..n {
                seed_fn(b, &probs[b * c..(b + 1) * c], &mut seeds[b * c..(b + 1) * c]);
            }
            for (a, s) in acc.iter_mut().zip(seeds.iter()) {
                *a += s;
            }
        };
        match self {
            Model::Deterministic(net) => {
                let trace = net.forward_trace(x, DropoutMode::Scale)?;
                Self::network_split(net)?;
                let sm = net.layers().len() - 1;
                for _ in 0..samples {
                    collect(trace.output(), &mut acc, &mut seeds);
                }
                Ok(net.backward(&trace, &acc, sm, false, true).input.unwrap())
            }
            Model::McDropout(net) => {
                let split = Self::network_split(net)?;
                let sm = net.layers().len() - 1;
                let prefix = net.forward_range(x.data(), 0..split, DropoutMode::Scale)?;
                let mut at_split = vec![0.0; prefix.output().len()];
                for i in 0..samples {
                    let mut rng = root.derive(i as u64);
                    let suffix = net.forward_range(
                        prefix.output(),
                        split..net.layers().len(),
                        DropoutMode::Shared(&mut rng),
                    )?;
                    acc.fill(0.0);
                    collect(suffix.output(), &mut acc, &mut seeds);
                    let g = net.backward(&suffix, &acc, sm, false, true).input.unwrap();
                    for (a, gi) in at_split.iter_mut().zip(g) {
                        *a += gi;
                    }
                }
                Ok(net.backward(&prefix, &at_split, split, false, true).input.unwrap())
            }
            Model::Bbb(post) => {
                let mut total = vec![0.0; x.data().len()];
                for i in 0..samples {
                    let net = post.sample_network(&mut root.derive(i as u64))?;
                    let trace = net.forward_trace(x, DropoutMode::Scale)?;
                    acc.fill(0.0);
                    collect(trace.output(), &mut acc, &mut seeds);
                    let g = net
                        .backward(&trace, &acc, net.layers().len() - 1, false, true)
                        .input
                        .unwrap();
                    for (t, gi) in total.iter_mut().zip(g) {
                        *t += gi;
                    }
                }
                Ok(total)
            }
            Model::Pbp(post) => {
                let trace = post.moment_trace(x)?;
                let out = trace.output();
                let mut g_mean = vec![0.0; n * c];
                let mut g_var = vec![0.0; n * c];
                let mut z = vec![0.0; c];
                let mut p = vec![0.0; n * c];
                for i in 0..samples {
                    let eps = pbp_draw(&root, i, c);
                    for b in 0..n {
                        out.sample_into(b, &eps, &mut z);
                        softmax_into(&z, &mut p[b * c..(b + 1) * c]);
                    }
                    acc.fill(0.0);
                    collect(&p, &mut acc, &mut seeds);
                    for b in 0..n {
                        for j in 0..c {
                            let k = b * c + j;
                            g_mean[k] += acc[k];
                            let v = out.var[k];
                            if v > 0.0 {
                                g_var[k] += acc[k] * eps[j] / (2.0 * libm::sqrt(v));
                            }
                        }
                    }
                }
                Ok(post.backward_input(&trace, &g_mean, &g_var))
            }
        }
    }

    /// Class probabilities and input gradient of the per-draw NLL `-ln p_i(y)`,
    /// one backward pass per draw. Returns `(probs M×C, grads M×D)` for a
    /// single input; used to cross-check the accumulated gradient paths.
    pub fn per_sample_nll_gradients(
        &self,
        x: &[f64],
        label: usize,
        samples: usize,
        seed: u64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.num_classes();
        if label >= c {
            return Err(Error::Precondition(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let xt = Tensor::matrix(1, x.len(), x.to_vec())?;
        let mut probs = Vec::with_capacity(samples * c);
        let mut grads = Vec::with_capacity(samples * x.len());
        for i in 0..samples {
            let mut p_i = Vec::new();
            let g = self.single_draw_vjp(&xt, i, seed, &mut |_, p, s| {
                p_i = p.to_vec();
                s.copy_from_slice(p);
                s[label] -= 1.0;
            })?;
            probs.extend_from_slice(&p_i);
            grads.extend_from_slice(&g);
        }
        Ok((probs, grads))
    }

    /// [`Model::logit_vjp`] restricted to draw `draw` alone.
    fn single_draw_vjp(&self, x: &Tensor, draw: usize, seed: u64, seed_fn: &mut SeedFn<'_>) -> Result<Vec<f64>> {
        let c = self.num_classes();
        let n = x.rows();
        let root = Rng::new(seed);
        let mut seeds = vec![0.0; n * c];
        match self {
            Model::Deterministic(_) => self.logit_vjp(x, 1, seed, seed_fn),
            Model::McDropout(net) => {
                // Layers before the first dropout draw nothing, so a whole-network
                // pass consumes the draw stream exactly like the split evaluation.
                let mut rng = root.derive(draw as u64);
                let trace = net.forward_trace(x, DropoutMode::Shared(&mut rng))?;
                for b in 0..n {
                    seed_fn(b, &trace.output()[b * c..(b + 1) * c], &mut seeds[b * c..(b + 1) * c]);
                }
                Ok(net
                    .backward(&trace, &seeds, net.layers().len() - 1, false, true)
                    .input
                    .unwrap())
            }
            Model::Bbb(post) => {
                let net = post.sample_network(&mut root.derive(draw as u64))?;
                let trace = net.forward_trace(x, DropoutMode::Scale)?;
                for b in 0..n {
                    seed_fn(b, &trace.output()[b * c..(b + 1) * c], &mut seeds[b * c..(b + 1) * c]);
                }
                Ok(net
                    .backward(&trace, &seeds, net.layers().len() - 1, false, true)
                    .input
                    .unwrap())
            }
            Model::Pbp(post) => {
                let trace = post.moment_trace(x)?;
                let out = trace.output();
                let eps = pbp_draw(&root, draw, c);
                let mut z = vec![0.0; c];
                let mut p = vec![0.0; c];
                let mut g_mean = vec![0.0; n * c];
                let mut g_var = vec![0.0; n * c];
                for b in 0..n {
                    out.sample_into(b, &eps, &mut z);
                    softmax_into(&z, &mut p);
                    seed_fn(b, &p, &mut seeds[b * c..(b + 1) * c]);
                    for j in 0..c {
                        let k = b * c + j;
                        g_mean[k] = seeds[k];
                        if out.var[k] > 0.0 {
                            g_var[k] = seeds[k] * eps[j] / (2.0 * libm::sqrt(out.var[k]));
                        }
                    }
                }
                Ok(post.backward_input(&trace, &g_mean, &g_var))
            }
        }
    }

    /// Network for draw `draw`, for families whose draws are concrete networks
    /// (BBB weight samples). Used by finite-difference checks under frozen draws.
    pub fn bbb_draw_network(&self, draw: usize, seed: u64) -> Option<Result<Network>> {
        match self {
            Model::Bbb(post) => Some(post.sample_network(&mut Rng::new(seed).derive(draw as u64))),
            _ => None,
        }
    }

    /// Probabilities for draw `draw` only, one row per input.
    pub fn draw_probs(&self, x: &Tensor, draw: usize, seed: u64) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let root = Rng::new(seed);
        let c = self.num_classes();
        match self {
            Model::Deterministic(net) => Ok(net.forward(x, DropoutMode::Scale)?.into_data()),
            Model::McDropout(net) => {
                let mut rng = root.derive(draw as u64);
                Ok(net.forward(x, DropoutMode::Shared(&mut rng))?.into_data())
            }
            Model::Bbb(post) => Ok(post
                .sample_network(&mut root.derive(draw as u64))?
                .forward(x, DropoutMode::Scale)?
                .into_data()),
            Model::Pbp(post) => {
                let out = post.forward_moments_batch(x)?;
                let eps = pbp_draw(&root, draw, c);
                let mut z = vec![0.0; c];
                let mut p = vec![0.0; x.rows() * c];
                for b in 0..x.rows() {
                    out.sample_into(b, &eps, &mut z);
                    softmax_into(&z, &mut p[b * c..(b + 1) * c]);
                }
                Ok(p)
            }
        }
    }
}

/// Standard-normal output noise for PBP draw `i`.
fn pbp_draw(root: &Rng, i: usize, classes: usize) -> Vec<f64> {
    let mut eps = vec![0.0; classes];
    root.derive(i as u64).fill_normal(&mut eps);
    eps
}
