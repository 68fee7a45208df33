//! Experiment orchestration: training entry points, perturbed-set
//! construction, sweeps, footprints, distances and detection.
//!
//! Image-level work is split into fixed chunks and spread over a rayon pool.
//! Monte Carlo draws are shared by every image of a call and keyed by draw
//! index, so results do not depend on the chunking or the thread count.

use std::collections::BTreeMap;
use std::ops::Range;

use bnnadv_core::attack::{self, AttackConfig, GradientVariant, LabelSource};
use bnnadv_core::bnn::{
    lenet, mlp, train_baseline, train_bbb, train_mc_dropout, train_pbp, BbbConfig, Family, Model, PbpConfig,
    ScaleMixturePrior, TrainConfig, TrainReport,
};
use bnnadv_core::data::{self, Dataset, DistanceReport, NoiseConfig, NoiseKind};
use bnnadv_core::detect::{self, RocReport};
use bnnadv_core::nn::{AdamConfig, LayerSpec, Network};
use bnnadv_core::uncertainty::{summarize, Metric, UncertaintySummary};
use bnnadv_core::{Rng, Tensor, IMAGE_PIXELS};
use rayon::prelude::*;

use crate::checkpoint::ModelMeta;
use crate::error::{Error, Result};
use crate::records::{FootprintRecord, MeanStd, SetKind, SweepRecord};

/// Default Monte Carlo sample count for prediction and gradients.
pub const DEFAULT_SAMPLES: usize = 100;
pub const DEFAULT_SIGMAS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];
/// Strength of the adversarial and Gaussian footprint sets.
pub const FOOTPRINT_STRENGTH: f64 = 0.5;
/// Size of each synthetic noise set.
pub const DEFAULT_NOISE_SIZE: usize = 2000;
/// Images per work item. Large enough to amortise one weight draw over many
/// images, small enough to bound activation memory.
pub const CHUNK: usize = 1000;

/// Independent seeds for each stochastic stage of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub root: u64,
}

impl Seeds {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    fn stage(&self, key: u64) -> u64 {
        Rng::new(self.root).derive(key).seed()
    }

    /// Weight/mask draws for gradient estimation.
    pub fn attack(&self) -> u64 {
        self.stage(1)
    }

    /// Weight/mask draws for evaluation; distinct from the attack's.
    pub fn predict(&self) -> u64 {
        self.stage(2)
    }

    /// Noise sets and Gaussian perturbations.
    pub fn noise(&self) -> u64 {
        self.stage(3)
    }
}

/// Thread pool plus chunked parallel helpers.
pub struct Harness {
    pool: rayon::ThreadPool,
}

impl Harness {
    /// `threads = 0` uses one thread per core.
    pub fn new(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self { pool })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    fn chunks(&self, n: usize) -> Vec<Range<usize>> {
        let size = n.div_ceil(self.threads()).clamp(1, CHUNK);
        (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect()
    }

    fn map_chunks<T: Send>(&self, n: usize, f: impl Fn(Range<usize>) -> Result<Vec<T>> + Sync) -> Result<Vec<T>> {
        let chunks = self.chunks(n);
        let parts: Vec<Vec<T>> = self
            .pool
            .install(|| chunks.into_par_iter().map(&f).collect::<Result<_>>())?;
        Ok(parts.into_iter().flatten().collect())
    }

    /// Uncertainty summary of every image.
    pub fn summaries(
        &self,
        model: &Model,
        set: &Dataset,
        samples: usize,
        seed: u64,
    ) -> Result<Vec<UncertaintySummary>> {
        self.map_chunks(set.len(), |r| {
            let x = rows(set, r);
            Ok(model
                .predictive_samples(&x, samples, seed)?
                .iter()
                .map(summarize)
                .collect())
        })
    }

    /// White-box attack on every image; returns the adversarial set (labels
    /// kept from `set`) and the number of degenerate gradients.
    pub fn attack(&self, model: &Model, set: &Dataset, config: &AttackConfig) -> Result<(Dataset, usize)> {
        let labels = set.labels();
        let out: Vec<(Vec<f64>, bool)> = self.map_chunks(set.len(), |r| {
            let x = rows(set, r.clone());
            let l = labels.map(|l| &l[r]);
            let a = attack::bnn_fgsm(model, &x, l, config)?;
            let d = x.row_len();
            Ok(a.adversarial
                .data()
                .chunks_exact(d)
                .zip(a.degenerate)
                .map(|(img, deg)| (img.to_vec(), deg))
                .collect())
        })?;
        let degenerate = out.iter().filter(|o| o.1).count();
        let images = out.into_iter().flat_map(|o| o.0).collect();
        Ok((set.with_images(images)?, degenerate))
    }

    /// Standard FGSM on a deterministic network.
    pub fn fgsm(&self, net: &Network, set: &Dataset, epsilon: f64) -> Result<Dataset> {
        let labels = set.require_labels()?;
        let images = self.map_chunks(set.len(), |r| {
            let x = rows(set, r.clone());
            Ok(attack::fgsm(net, &x, &labels[r], epsilon)?.into_data())
        })?;
        Ok(set.with_images(images)?)
    }

    /// Nearest-neighbour distance of every query to `train`.
    pub fn distances(&self, queries: &Dataset, train: &Dataset) -> Result<DistanceReport> {
        let d = self.map_chunks(queries.len(), |r| {
            Ok(data::nearest_distances(&queries.slice(r.start, r.end), train))
        })?;
        Ok(DistanceReport::from_distances(d))
    }
}

fn rows(set: &Dataset, r: Range<usize>) -> Tensor {
    let d = set.dim();
    Tensor::matrix(r.len(), d, set.images()[r.start * d..r.end * d].to_vec()).expect("rows of a dataset")
}

/// MNIST training and test sets.
#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

impl Mnist {
    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let p = crate::idx::MnistPaths::in_dir(dir);
        Ok(Self {
            train: p.train()?,
            test: p.test()?,
        })
    }
}

/// Network architecture for the network-based families.
#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    /// Two conv/pool stages and a 500-unit dense layer.
    Lenet,
    /// Fully connected ReLU network with these hidden widths.
    Mlp(Vec<usize>),
}

impl Arch {
    pub fn parse(text: &str) -> Result<Self> {
        if text == "lenet" {
            return Ok(Arch::Lenet);
        }
        let hidden = text
            .strip_prefix("mlp:")
            .ok_or_else(|| Error::Config(format!("unknown architecture `{text}` (lenet or mlp:W1,W2,..)")))?;
        let widths = hidden
            .split(',')
            .map(|w| w.trim().parse::<usize>().ok().filter(|&w| w > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Config(format!("bad hidden widths `{hidden}`")))?;
        Ok(Arch::Mlp(widths))
    }

    pub fn name(&self) -> String {
        match self {
            Arch::Lenet => "lenet".into(),
            Arch::Mlp(h) => format!("mlp:{}", h.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")),
        }
    }

    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Deterministic | Family::McDropout => Arch::Lenet,
            Family::Bbb => Arch::Mlp(vec![1200, 1200]),
            Family::Pbp => Arch::Mlp(vec![400, 400]),
        }
    }

    fn sizes(hidden: &[usize]) -> Vec<usize> {
        let mut s = vec![IMAGE_PIXELS];
        s.extend_from_slice(hidden);
        s.push(bnnadv_core::NUM_CLASSES);
        s
    }

    fn network(&self, dropout: f64) -> (Vec<usize>, Vec<LayerSpec>) {
        match self {
            Arch::Lenet => lenet(dropout),
            Arch::Mlp(h) => (vec![IMAGE_PIXELS], mlp(&Self::sizes(h), dropout)),
        }
    }
}

/// Everything a training run needs besides the data and the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub family: Family,
    pub arch: Arch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// MC-Dropout rate.
    pub dropout: f64,
    pub prior: ScaleMixturePrior,
    pub init_rho: f64,
    pub passes: usize,
    pub inner_samples: usize,
}

impl TrainOptions {
    pub fn new(family: Family) -> Self {
        let t = TrainConfig::default();
        let b = BbbConfig::default();
        let p = PbpConfig::default();
        Self {
            family,
            arch: Arch::default_for(family),
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            dropout: 0.5,
            prior: b.prior,
            init_rho: b.init_rho,
            passes: p.passes,
            inner_samples: p.inner_samples,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
        }
    }

    /// Hyperparameters as recorded in checkpoints.
    pub fn hyper(&self, train_size: usize) -> BTreeMap<String, String> {
        let mut h = BTreeMap::new();
        h.insert("arch".into(), self.arch.name());
        h.insert("train_size".into(), train_size.to_string());
        match self.family {
            Family::Pbp => {
                h.insert("passes".into(), self.passes.to_string());
                h.insert("inner_samples".into(), self.inner_samples.to_string());
            }
            _ => {
                h.insert("epochs".into(), self.epochs.to_string());
                h.insert("batch_size".into(), self.batch_size.to_string());
                h.insert("optimizer".into(), "adam".into());
                h.insert("lr".into(), self.lr.to_string());
            }
        }
        match self.family {
            Family::McDropout => {
                h.insert("dropout".into(), self.dropout.to_string());
            }
            Family::Bbb => {
                h.insert("prior_alpha".into(), self.prior.alpha().to_string());
                h.insert("prior_sigma1".into(), self.prior.sigma1().to_string());
                h.insert("prior_sigma2".into(), self.prior.sigma2().to_string());
                h.insert("init_rho".into(), self.init_rho.to_string());
            }
            _ => {}
        }
        h
    }
}

/// Trains a model of `options.family` on `train`.
pub fn train_model(train: &Dataset, options: &TrainOptions, seed: u64) -> Result<(Model, ModelMeta, TrainReport)> {
    let meta = ModelMeta {
        seed,
        hyper: options.hyper(train.len()),
    };
    let (model, report) = match options.family {
        Family::Deterministic => {
            let (shape, layers) = options.arch.network(0.0);
            let (net, r) = train_baseline(shape, layers, train, &options.train_config(), seed)?;
            (Model::Deterministic(net), r)
        }
        Family::McDropout => {
            let (shape, layers) = options.arch.network(options.dropout);
            let (net, r) = train_mc_dropout(shape, layers, train, &options.train_config(), seed)?;
            (Model::McDropout(net), r)
        }
        Family::Bbb => {
            let (shape, layers) = options.arch.network(0.0);
            let config = BbbConfig {
                train: options.train_config(),
                prior: options.prior,
                init_rho: options.init_rho,
            };
            let (post, r) = train_bbb(shape, layers, train, &config, seed)?;
            (Model::Bbb(post), r)
        }
        Family::Pbp => {
            let Arch::Mlp(hidden) = &options.arch else {
                return Err(Error::Config("PBP needs an MLP architecture".into()));
            };
            let config = PbpConfig {
                passes: options.passes,
                inner_samples: options.inner_samples,
            };
            let (post, r) = train_pbp(&Arch::sizes(hidden), train, &config, seed)?;
            (Model::Pbp(post), r)
        }
    };
    Ok((model, meta, report))
}

/// Attack settings shared by every adversarial set of an experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackParams {
    pub grad_samples: usize,
    pub variant: GradientVariant,
    pub label_source: LabelSource,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            grad_samples: attack::DEFAULT_GRAD_SAMPLES,
            variant: GradientVariant::Weighted,
            label_source: LabelSource::TrueLabel,
        }
    }
}

/// Inputs for building perturbed sets.
pub struct SetSource<'a> {
    /// Labelled base images (usually a test subset).
    pub base: &'a Dataset,
    /// Needed for pixel/mvn noise and for distances.
    pub train: Option<&'a Dataset>,
    /// Needed for black-box sets.
    pub surrogate: Option<&'a Network>,
    pub attack: AttackParams,
    pub noise_size: usize,
    pub seeds: Seeds,
}

impl SetSource<'_> {
    fn train(&self, kind: SetKind) -> Result<&Dataset> {
        self.train
            .ok_or_else(|| Error::Config(format!("{kind} sets need the training set")))
    }

    /// The set of `kind` at `strength`; white-box sets attack `model`.
    pub fn build(&self, h: &Harness, model: Option<&Model>, kind: SetKind, strength: f64) -> Result<Dataset> {
        let noise = |k: NoiseKind| -> Result<Dataset> {
            let mut c = NoiseConfig::new(k, self.seeds.noise());
            c.sigma = strength;
            Ok(data::gen_noise_set(&c, self.noise_size, self.train(kind)?)?)
        };
        match kind {
            SetKind::Clean => Ok(self.base.clone()),
            SetKind::Gaussian => Ok(data::perturb_gaussian(self.base, strength, self.seeds.noise())?),
            SetKind::Adversarial => {
                let config = AttackConfig {
                    epsilon: strength,
                    grad_samples: self.attack.grad_samples,
                    variant: self.attack.variant,
                    label_source: self.attack.label_source,
                    seed: self.seeds.attack(),
                };
                let model = model.ok_or_else(|| Error::Config("white-box sets need a model".into()))?;
                let (set, degenerate) = h.attack(model, self.base, &config)?;
                if degenerate > 0 {
                    log::warn!("{degenerate} images had a degenerate weighted gradient at eps {strength}");
                }
                Ok(set)
            }
            SetKind::Blackbox => {
                let net = self
                    .surrogate
                    .ok_or_else(|| Error::Config("black-box sets need a surrogate model".into()))?;
                h.fgsm(net, self.base, strength)
            }
            SetKind::Uniform => noise(NoiseKind::Uniform),
            SetKind::Pixel => noise(NoiseKind::Pixel),
            SetKind::Mvn => noise(NoiseKind::Mvn),
        }
    }
}

/// Accuracy of MC-mean predictions, NaN for unlabelled sets.
pub fn accuracy(summaries: &[UncertaintySummary], labels: Option<&[usize]>) -> f64 {
    match labels {
        None => f64::NAN,
        Some(l) => {
            let hit = summaries.iter().zip(l).filter(|(s, &y)| s.predicted_class == y).count();
            hit as f64 / l.len() as f64
        }
    }
}

/// Evaluation settings of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub samples: usize,
    /// Queries (first images of each set) used for the training-set distance;
    /// 0 skips it and reports NaN.
    pub distance_queries: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            distance_queries: 1000,
        }
    }
}

/// Record for an already built set.
pub fn evaluate_set(
    h: &Harness,
    model: &Model,
    model_id: &str,
    kind: SetKind,
    strength: f64,
    set: &Dataset,
    source: &SetSource<'_>,
    options: &SweepOptions,
) -> Result<(SweepRecord, Vec<UncertaintySummary>)> {
    let summaries = h.summaries(model, set, options.samples, source.seeds.predict())?;
    let metric = |m: Metric| MeanStd::of(&summaries.iter().map(|s| m.value(s)).collect::<Vec<_>>());
    let distance_mean = match (options.distance_queries, source.train) {
        (0, _) | (_, None) => f64::NAN,
        (q, Some(train)) => h.distances(&set.take(q.min(set.len())), train)?.mean,
    };
    let record = SweepRecord {
        model_id: model_id.to_string(),
        set_kind: kind,
        strength,
        accuracy: accuracy(&summaries, set.labels()),
        entropy: metric(Metric::Entropy),
        mummi: metric(Metric::Mummi),
        variation_ratio: metric(Metric::VariationRatio),
        distance_mean,
        n: set.len(),
        seed: source.seeds.root,
    };
    Ok((record, summaries))
}

/// One record per strength of `grid` (a single strength-0 record for kinds
/// without a strength axis).
pub fn run_sweep(
    h: &Harness,
    model: &Model,
    model_id: &str,
    kind: SetKind,
    grid: &[f64],
    source: &SetSource<'_>,
    options: &SweepOptions,
) -> Result<Vec<SweepRecord>> {
    let strengths: Vec<f64> = if kind.has_strength() { grid.to_vec() } else { vec![0.0] };
    let mut out = Vec::with_capacity(strengths.len());
    for s in strengths {
        let set = source.build(h, Some(model), kind, s)?;
        let (record, _) = evaluate_set(h, model, model_id, kind, s, &set, source, options)?;
        log::info!(
            "{model_id} {kind} {s}: accuracy {:.4}, mummi {:.4}",
            record.accuracy,
            record.mummi.mean
        );
        out.push(record);
    }
    Ok(out)
}

/// The footprint sets: clean, black-box (white-box without a surrogate) and
/// Gaussian at [`FOOTPRINT_STRENGTH`], plus the three noise sets.
pub fn footprint_sets(h: &Harness, model: &Model, source: &SetSource<'_>) -> Result<Vec<(SetKind, Dataset)>> {
    let attack = if source.surrogate.is_some() {
        SetKind::Blackbox
    } else {
        SetKind::Adversarial
    };
    let mut sets = Vec::new();
    for (kind, s) in [
        (SetKind::Clean, 0.0),
        (attack, FOOTPRINT_STRENGTH),
        (SetKind::Gaussian, FOOTPRINT_STRENGTH),
        (SetKind::Uniform, 0.0),
        (SetKind::Pixel, 0.0),
        (SetKind::Mvn, 0.0),
    ] {
        sets.push((kind, source.build(h, Some(model), kind, s)?));
    }
    Ok(sets)
}

/// One record per image and metric.
pub fn run_footprint(
    h: &Harness,
    model: &Model,
    model_id: &str,
    sets: &[(SetKind, Dataset)],
    samples: usize,
    seeds: Seeds,
) -> Result<Vec<FootprintRecord>> {
    let mut out = Vec::new();
    for (kind, set) in sets {
        let summaries = h.summaries(model, set, samples, seeds.predict())?;
        for (i, s) in summaries.iter().enumerate() {
            for m in Metric::ALL {
                out.push(FootprintRecord {
                    model_id: model_id.to_string(),
                    set_kind: *kind,
                    metric: m.name().to_string(),
                    class_prob: s.class_prob,
                    value: m.value(s),
                    predicted: s.predicted_class,
                    true_class: set.labels().map(|l| l[i]),
                });
            }
        }
    }
    Ok(out)
}

/// Per-metric detector evaluation of clean against attacked scores.
#[derive(Debug, Clone)]
pub struct DetectionResult {
    pub metric: Metric,
    pub roc: RocReport,
    /// Threshold at the calibration quantile of clean scores.
    pub threshold: f64,
    /// Fractions flagged (score above the threshold) in each set.
    pub clean_flagged: f64,
    pub attack_flagged: f64,
}

pub fn detect_scores(
    clean: &[UncertaintySummary],
    attacked: &[UncertaintySummary],
    quantile: f64,
) -> Result<Vec<DetectionResult>> {
    Metric::ALL
        .into_iter()
        .map(|m| {
            let c: Vec<f64> = clean.iter().map(|s| m.value(s)).collect();
            let a: Vec<f64> = attacked.iter().map(|s| m.value(s)).collect();
            let det = detect::DetectorConfig::calibrated(m, &c, quantile)?;
            let flagged = |v: &[f64]| v.iter().filter(|&&x| det.is_adversarial(x)).count() as f64 / v.len() as f64;
            Ok(DetectionResult {
                metric: m,
                roc: detect::roc(&c, &a)?,
                threshold: det.threshold,
                clean_flagged: flagged(&c),
                attack_flagged: flagged(&a),
            })
        })
        .collect()
}
