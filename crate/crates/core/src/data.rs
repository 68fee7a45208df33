//! Image datasets, random perturbations, synthetic noise sets and
//! training-set distance.
//!
//! Every generated or perturbed pixel is clipped to `[0, 1]`. Image `k` of any
//! generated set draws from `Rng::new(seed).derive(k)`, so sets are
//! reproducible and can be produced in any order or in parallel.

use alloc::{format, string::String, vec, vec::Vec};
use core::fmt;
use core::str::FromStr;

use crate::linalg::{gemm, psd_cholesky, Op};
use crate::{Error, Result, Rng, Tensor};

/// Flattened grayscale images in `[0, 1]` with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Option<Vec<usize>>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Option<Vec<usize>>, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || images.is_empty() || !images.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} pixel values do not form a non-empty set of {dim}-pixel images",
                images.len()
            )));
        }
        if let Some(i) = images.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Precondition(format!(
                "pixel {i} = {} is outside [0, 1]",
                images[i]
            )));
        }
        let n = images.len() / dim;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Shape(format!("{} labels for {n} images", l.len())));
            }
            if let Some(bad) = l.iter().find(|&&y| y >= classes) {
                return Err(Error::Precondition(format!("label {bad} is not below {classes}")));
            }
        }
        Ok(Self {
            images,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Labels, or a precondition error for unlabelled sets.
    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| Error::Precondition(String::from("dataset has no labels")))
    }

    /// Images as an `n × dim` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.images.clone()).expect("dataset is non-empty")
    }

    /// Images `range`, keeping labels.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        assert!(start < end && end <= self.len());
        Dataset {
            images: self.images[start * self.dim..end * self.dim].to_vec(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            dim: self.dim,
            classes: self.classes,
        }
    }

    /// The first `n` images (all of them if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        self.slice(0, n.min(self.len()))
    }

    /// Same labels, new pixels (clipped to `[0, 1]`).
    pub fn with_images(&self, mut images: Vec<f64>) -> Result<Dataset> {
        if images.len() != self.images.len() {
            return Err(Error::Shape(format!(
                "replacement has {} values, dataset has {}",
                images.len(),
                self.images.len()
            )));
        }
        clip_unit(&mut images);
        Dataset::new(images, self.labels.clone(), self.dim, self.classes)
    }
}

pub fn clip_unit(values: &mut [f64]) {
    for v in values {
        *v = v.clamp(0.0, 1.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    Gaussian,
    Uniform,
    Pixel,
    Mvn,
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Uniform => "uniform",
            NoiseKind::Pixel => "pixel",
            NoiseKind::Mvn => "mvn",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "uniform" => Ok(NoiseKind::Uniform),
            "pixel" => Ok(NoiseKind::Pixel),
            "mvn" => Ok(NoiseKind::Mvn),
            _ => Err(Error::Config(format!("unknown noise kind `{s}`"))),
        }
    }
}

/// Default ridge for the MVN factorisation; MNIST's pixel covariance is rank deficient.
pub const DEFAULT_RIDGE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    /// Noise standard deviation (gaussian only).
    pub sigma: f64,
    /// Pivot tolerance of the covariance factorisation (mvn only).
    pub ridge: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(kind: NoiseKind, seed: u64) -> Self {
        Self {
            kind,
            sigma: 0.0,
            ridge: DEFAULT_RIDGE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma {} must be finite and >= 0", self.sigma)));
        }
        if !(self.ridge > 0.0 && self.ridge.is_finite()) {
            return Err(Error::Config(format!("ridge {} must be > 0", self.ridge)));
        }
        Ok(())
    }
}

/// Pre-clipping Gaussian offsets `sigma · z` for image `index` of a set seeded with `seed`.
pub fn gaussian_offsets(seed: u64, index: usize, dim: usize, sigma: f64) -> Vec<f64> {
    let mut rng = Rng::new(seed).derive(index as u64);
    let mut z = vec![0.0; dim];
    rng.fill_normal(&mut z);
    for v in &mut z {
        *v *= sigma;
    }
    z
}

/// `clip(x + sigma · z, 0, 1)` with `z` standard normal per pixel.
pub fn perturb_gaussian(x: &Dataset, sigma: f64, seed: u64) -> Result<Dataset> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma {sigma} must be finite and >= 0")));
    }
    let mut images = x.images.clone();
    if sigma > 0.0 {
        for (k, img) in images.chunks_exact_mut(x.dim).enumerate() {
            let z = gaussian_offsets(seed, k, x.dim, sigma);
            for (p, dz) in img.iter_mut().zip(z) {
                *p += dz;
            }
        }
    }
    x.with_images(images)
}

/// Per-pixel mean and standard deviation of a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMoments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PixelMoments {
    pub fn fit(train: &Dataset) -> Self {
        let n = train.len() as f64;
        let mut mean = vec![0.0; train.dim];
        for img in train.images.chunks_exact(train.dim) {
            for (m, v) in mean.iter_mut().zip(img) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; train.dim];
        for img in train.images.chunks_exact(train.dim) {
            for ((s, v), m) in var.iter_mut().zip(img).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| libm::sqrt(s / n)).collect();
        Self { mean, std }
    }
}

/// Joint Gaussian fitted to a training set: mean image plus a lower
/// triangular factor of the pixel covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MvnSampler {
    pub mean: Vec<f64>,
    factor: Vec<f64>,
    dim: usize,
}

impl MvnSampler {
    /// Population covariance, factorised with pivots `<= ridge` dropped.
    pub fn fit(train: &Dataset, ridge: f64) -> Result<Self> {
        let d = train.dim;
        let mean = PixelMoments::fit(train).mean;
        let mut cov = vec![0.0; d * d];
        let chunk = 512;
        let mut centred = Vec::with_capacity(chunk * d);
        for block in train.images.chunks(chunk * d) {
            centred.clear();
            for img in block.chunks_exact(d) {
                centred.extend(img.iter().zip(&mean).map(|(v, m)| v - m));
            }
            let rows = block.len() / d;
            gemm(d, rows, d, 1.0, &centred, Op::T, &centred, Op::N, 1.0, &mut cov);
        }
        let n = train.len() as f64;
        for v in &mut cov {
            *v /= n;
        }
        let factor = psd_cholesky(&cov, d, ridge)?;
        Ok(Self { mean, factor, dim: d })
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let mut z = vec![0.0; self.dim];
        rng.fill_normal(&mut z);
        let mut out = self.mean.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.factor[i * self.dim..i * self.dim + i + 1];
            *o += crate::linalg::dot(row, &z[..=i]);
        }
        out
    }
}

/// Synthetic set of `n` unlabelled images.
///
/// * uniform: i.i.d. `U[0, 1]` pixels;
/// * pixel: independent `Normal(mean_j, std_j)` with moments from `train`;
/// * mvn: joint Normal with the training mean and covariance;
/// * gaussian: `clip(sigma · z)` around a black image.
pub fn gen_noise_set(config: &NoiseConfig, n: usize, train: &Dataset) -> Result<Dataset> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Precondition(String::from("noise set size must be positive")));
    }
    let d = train.dim;
    let root = Rng::new(config.seed);
    let mut images = Vec::with_capacity(n * d);
    match config.kind {
        NoiseKind::Uniform => {
            for k in 0..n {
                let mut rng = root.derive(k as u64);
                images.extend((0..d).map(|_| rng.uniform()));
            }
        }
        NoiseKind::Gaussian => {
            for k in 0..n {
                images.extend(gaussian_offsets(config.seed, k, d, config.sigma));
            }
        }
        NoiseKind::Pixel => {
            let m = PixelMoments::fit(train);
            for k in 0..n {
                let mut rng = root.derive(k as u64);
                images.extend(m.mean.iter().zip(&m.std).map(|(mu, s)| mu + s * rng.normal()));
            }
        }
        NoiseKind::Mvn => {
            let sampler = MvnSampler::fit(train, config.ridge)?;
            for k in 0..n {
                images.extend(sampler.sample(&mut root.derive(k as u64)));
            }
        }
    }
    clip_unit(&mut images);
    Dataset::new(images, None, d, train.classes)
}

/// How "average pixel-wise Euclidean distance" is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceReading {
    /// Nearest neighbour under L2, reported as `‖x − t‖₂ / P`.
    L2PerPixel,
    /// Nearest neighbour under L1, reported as `‖x − t‖₁ / P`.
    MeanAbsolute,
}

pub const DISTANCE_READING: DistanceReading = DistanceReading::L2PerPixel;

/// Distance from `x` to its nearest training image (exhaustive scan).
pub fn training_set_distance(x: &[f64], train: &Dataset) -> f64 {
    training_set_distance_with(x, train, DISTANCE_READING)
}

pub fn training_set_distance_with(x: &[f64], train: &Dataset, reading: DistanceReading) -> f64 {
    assert_eq!(x.len(), train.dim);
    let mut best = f64::INFINITY;
    let mut best_index = 0;
    const BLOCK: usize = 56;
    for (i, t) in train.images.chunks_exact(train.dim).enumerate() {
        let mut acc = 0.0;
        // Partial sums only grow, so a candidate already worse than the best is abandoned.
        for (xb, tb) in x.chunks(BLOCK).zip(t.chunks(BLOCK)) {
            acc += match reading {
                DistanceReading::L2PerPixel => xb.iter().zip(tb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                DistanceReading::MeanAbsolute => xb.iter().zip(tb).map(|(a, b)| libm::fabs(a - b)).sum::<f64>(),
            };
            if acc >= best {
                break;
            }
        }
        if acc < best {
            best = acc;
            best_index = i;
        }
    }
    // Recompute the winner in plain sequential order.
    let t = train.image(best_index);
    let p = train.dim as f64;
    match reading {
        DistanceReading::L2PerPixel => libm::sqrt(x.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()) / p,
        DistanceReading::MeanAbsolute => x.iter().zip(t).map(|(a, b)| libm::fabs(a - b)).sum::<f64>() / p,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub distances: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl DistanceReport {
    pub fn from_distances(distances: Vec<f64>) -> Self {
        let n = distances.len() as f64;
        let mean = distances.iter().sum::<f64>() / n;
        let var = distances.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        Self {
            distances,
            mean,
            std: libm::sqrt(var),
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        self.std / libm::sqrt(self.distances.len() as f64)
    }
}

/// [`training_set_distance`] for every query, with the L2 scan done as a
/// matrix product `‖x‖² + ‖t‖² − 2 x·t`. Candidates within rounding of the
/// best expanded distance are re-scored exactly, so the result equals the
/// exhaustive scan.
pub fn nearest_distances(queries: &Dataset, train: &Dataset) -> Vec<f64> {
    assert_eq!(queries.dim, train.dim);
    if DISTANCE_READING != DistanceReading::L2PerPixel || train.is_empty() {
        return queries
            .images
            .chunks_exact(queries.dim)
            .map(|q| training_set_distance(q, train))
            .collect();
    }
    const QUERY_BLOCK: usize = 32;
    let d = train.dim;
    let n = train.len();
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let t_norm: Vec<f64> = train.images.chunks_exact(d).map(sq).collect();
    let t_max = t_norm.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut out = Vec::with_capacity(queries.len());
    let mut dots = vec![0.0; QUERY_BLOCK * n];
    for block in queries.images.chunks(QUERY_BLOCK * d) {
        let q = block.len() / d;
        gemm(
            q,
            d,
            n,
            1.0,
            block,
            Op::N,
            &train.images,
            Op::T,
            0.0,
            &mut dots[..q * n],
        );
        for (x, row) in block.chunks_exact(d).zip(dots.chunks_exact(n)) {
            let x_norm = sq(x);
            let approx = |j: usize| x_norm + t_norm[j] - 2.0 * row[j];
            let best = (0..n).map(approx).fold(f64::INFINITY, f64::min);
            // Far above the rounding error of a 784-term product.
            let margin = 2e-11 * (x_norm + t_max) + f64::MIN_POSITIVE;
            let exact = (0..n)
                .filter(|&j| approx(j) <= best + 2.0 * margin)
                .map(|j| {
                    x.iter()
                        .zip(train.image(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            out.push(libm::sqrt(exact) / d as f64);
        }
    }
    out
}

pub fn distance_report(queries: &Dataset, train: &Dataset) -> DistanceReport {
    DistanceReport::from_distances(nearest_distances(queries, train))
}
