//! Command-line front end.
//!
//! Option values resolve as: command-line flag, then `--config` file key,
//! then built-in default. Config keys use the long flag name with `_` for `-`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bnnadv_core::attack::{self, GradientVariant, LabelSource};
use bnnadv_core::bnn::{Family, Model};
use bnnadv_core::data::Dataset;
use bnnadv_core::detect;
use bnnadv_core::nn::Network;
use bnnadv_core::uncertainty::Metric;
use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, Checkpoint};
use crate::config::Config;
use crate::error::{io_err, Error, Result};
use crate::harness::{self, Arch, AttackParams, Harness, Seeds, SetSource, SweepOptions, TrainOptions};
use crate::idx::{self, IdxType, MnistPaths};
use crate::records::{self, SetKind};

#[derive(Debug, Parser)]
#[command(
    name = "bnnadv",
    version,
    about = "Adversarial attacks and uncertainty for Bayesian networks on MNIST"
)]
pub struct Cli {
    /// Root seed for every stochastic stage [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core [default: 1]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `key = value` file supplying defaults for unset flags
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for CSV outputs [default: .]
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Craft a white-box (or surrogate black-box) adversarial set
    Attack(AttackArgs),
    /// Write a Gaussian-perturbed or synthetic noise set
    Perturb(PerturbArgs),
    /// Accuracy and uncertainty over a strength grid
    Sweep(SweepArgs),
    /// Per-image (class probability, uncertainty) points
    Footprint(FootprintArgs),
    /// Nearest-neighbour distance of a set to the training images
    Distance(DistanceArgs),
    /// ROC and calibrated threshold of each metric, clean vs attacked
    Detect(DetectArgs),
    /// Convert an IDX image file to the ubyte or double layout
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding the four MNIST IDX files [default: data/mnist]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use only the first N test images
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// baseline, mcdropout, bbb or pbp
    #[arg(long)]
    pub family: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint path to write
    #[arg(long)]
    pub out: PathBuf,
    /// lenet or mlp:W1,W2,.. [default: per family]
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// ADF passes (pbp)
    #[arg(long)]
    pub passes: Option<usize>,
    /// Train on the first N training images
    #[arg(long)]
    pub train_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttackOpts {
    /// Samples per gradient estimate
    #[arg(long)]
    pub grad_samples: Option<usize>,
    /// weighted or expected_gradient
    #[arg(long)]
    pub variant: Option<String>,
    /// true_label or model_prediction
    #[arg(long)]
    pub label_source: Option<String>,
    /// Deterministic surrogate checkpoint for black-box sets
    #[arg(long)]
    pub surrogate: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epsilon: f64,
    #[command(flatten)]
    pub attack: AttackOpts,
    /// Output prefix; writes PREFIX-images.idx, PREFIX-labels.idx, PREFIX.manifest
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    /// gaussian, uniform, pixel or mvn
    #[arg(long)]
    pub kind: String,
    #[command(flatten)]
    pub data: DataArgs,
    /// Noise standard deviation (gaussian)
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Images per noise set
    #[arg(long)]
    pub count: Option<usize>,
    /// Output prefix; writes PREFIX-images.idx (and PREFIX-labels.idx for gaussian)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalOpts {
    /// Monte Carlo samples per prediction
    #[arg(long)]
    pub samples: Option<usize>,
    /// Images per synthetic noise set
    #[arg(long)]
    pub noise_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// clean, adversarial, gaussian, uniform, pixel, mvn or blackbox
    #[arg(long)]
    pub kind: String,
    /// Comma-separated strengths [default: per kind]
    #[arg(long)]
    pub grid: Option<String>,
    /// Use the finer low-epsilon grid
    #[arg(long)]
    pub fine: bool,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub attack: AttackOpts,
    #[command(flatten)]
    pub eval: EvalOpts,
    /// Queries for the training-set distance; 0 skips it
    #[arg(long)]
    pub distance_queries: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FootprintArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub attack: AttackOpts,
    #[command(flatten)]
    pub eval: EvalOpts,
}

#[derive(Debug, Args)]
pub struct DistanceArgs {
    /// IDX image file of query images
    #[arg(long)]
    pub images: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Clean-score quantile for the threshold
    #[arg(long)]
    pub quantile: Option<f64>,
    #[command(flatten)]
    pub attack: AttackOpts,
    #[command(flatten)]
    pub eval: EvalOpts,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// ubyte or double
    #[arg(long)]
    pub format: String,
    /// Output prefix; writes PREFIX-images.idx (and PREFIX-labels.idx)
    #[arg(long)]
    pub out: PathBuf,
}

struct Ctx {
    config: Option<Config>,
    seeds: Seeds,
    harness: Harness,
    out_dir: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let config = cli.config.as_deref().map(Config::load).transpose()?;
        let mut ctx = Self {
            config,
            seeds: Seeds::new(0),
            harness: Harness::new(1)?,
            out_dir: PathBuf::new(),
        };
        ctx.seeds = Seeds::new(ctx.pick(cli.seed, "seed", 0)?);
        ctx.harness = Harness::new(ctx.pick(cli.threads, "threads", 1)?)?;
        ctx.out_dir = ctx.pick(cli.out_dir.clone(), "out_dir", PathBuf::from("."))?;
        Ok(ctx)
    }

    fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match (flag, &self.config) {
            (Some(v), _) => Ok(Some(v)),
            (None, Some(c)) => c.get(key),
            (None, None) => Ok(None),
        }
    }

    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    fn parse<T: FromStr<Err = bnnadv_core::Error>>(&self, flag: Option<String>, key: &str, default: T) -> Result<T> {
        match self.opt(flag, key)? {
            Some(s) => Ok(s.parse()?),
            None => Ok(default),
        }
    }

    fn data_dir(&self, d: &DataArgs) -> Result<PathBuf> {
        self.pick(d.data.clone(), "data", PathBuf::from("data/mnist"))
    }

    fn test_set(&self, d: &DataArgs) -> Result<Dataset> {
        let set = MnistPaths::in_dir(self.data_dir(d)?).test()?;
        Ok(match self.opt(d.limit, "limit")? {
            Some(n) => set.take(n.min(set.len())),
            None => set,
        })
    }

    fn train_set(&self, d: &DataArgs) -> Result<Dataset> {
        MnistPaths::in_dir(self.data_dir(d)?).train()
    }

    fn attack_params(&self, a: &AttackOpts) -> Result<AttackParams> {
        let d = AttackParams::default();
        Ok(AttackParams {
            grad_samples: self.pick(a.grad_samples, "grad_samples", d.grad_samples)?,
            variant: self.parse::<GradientVariant>(a.variant.clone(), "variant", d.variant)?,
            label_source: self.parse::<LabelSource>(a.label_source.clone(), "label_source", d.label_source)?,
        })
    }

    fn surrogate(&self, a: &AttackOpts) -> Result<Option<Network>> {
        let Some(path) = self.opt(a.surrogate.clone(), "surrogate")? else {
            return Ok(None);
        };
        match load_model(&path)?.model {
            Model::Deterministic(net) | Model::McDropout(net) => Ok(Some(net)),
            m => Err(Error::Config(format!(
                "surrogate {} is a {} model; it must be baseline or mcdropout",
                path.display(),
                m.family()
            ))),
        }
    }

    fn out_file(&self, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
        fs::create_dir_all(&self.out_dir).map_err(io_err(&self.out_dir))?;
        let path = self.out_dir.join(name);
        let f = File::create(&path).map_err(io_err(&path))?;
        Ok((path, BufWriter::new(f)))
    }
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    checkpoint::load(path)
}

fn model_id(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn prefixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    prefix.with_file_name(name)
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| *v >= 0.0 && v.is_finite())
                .ok_or_else(|| Error::Config(format!("bad strength `{s}` in grid")))
        })
        .collect()
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let family: Family = ctx.parse(a.family.clone(), "family", Family::Bbb)?;
    let mut o = TrainOptions::new(family);
    if let Some(arch) = ctx.opt(a.arch.clone(), "arch")? {
        o.arch = Arch::parse(&arch)?;
    }
    o.epochs = ctx.pick(a.epochs, "epochs", o.epochs)?;
    o.batch_size = ctx.pick(a.batch_size, "batch_size", o.batch_size)?;
    o.lr = ctx.pick(a.lr, "lr", o.lr)?;
    o.dropout = ctx.pick(a.dropout, "dropout", o.dropout)?;
    o.passes = ctx.pick(a.passes, "passes", o.passes)?;
    let mut data = ctx.train_set(&a.data)?;
    if let Some(n) = ctx.opt(a.train_size, "train_size")? {
        data = data.take(n.min(data.len()));
    }
    log::info!("training {family} on {} images", data.len());
    let (model, meta, report) = harness::train_model(&data, &o, ctx.seeds.root)?;
    if let Some(last) = report.epoch_losses.last() {
        log::info!("final epoch loss {last}");
    }
    checkpoint::save(&a.out, &model, &meta)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn attack(ctx: &Ctx, a: &AttackArgs) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let base = ctx.test_set(&a.data)?;
    let params = ctx.attack_params(&a.attack)?;
    let surrogate = ctx.surrogate(&a.attack)?;
    let (set, degenerate, variant) = match &surrogate {
        Some(net) => (ctx.harness.fgsm(net, &base, a.epsilon)?, 0, "surrogate_fgsm"),
        None => {
            let config = attack::AttackConfig {
                epsilon: a.epsilon,
                grad_samples: params.grad_samples,
                variant: params.variant,
                label_source: params.label_source,
                seed: ctx.seeds.attack(),
            };
            let (set, d) = ctx.harness.attack(&ckpt.model, &base, &config)?;
            (set, d, params.variant.name())
        }
    };
    let images = prefixed(&a.out, "-images.idx");
    let labels = prefixed(&a.out, "-labels.idx");
    idx::save_dataset(&set, &images, Some(&labels), IdxType::F64)?;
    let manifest = prefixed(&a.out, ".manifest");
    let text = format!(
        "model = {}\nmodel_sha256 = {}\nepsilon = {}\nvariant = {}\nlabel_source = {}\ngrad_samples = {}\nseed = {}\ncount = {}\ndegenerate = {}\n",
        a.model.display(),
        ckpt.sha256,
        a.epsilon,
        variant,
        params.label_source.name(),
        params.grad_samples,
        ctx.seeds.root,
        set.len(),
        degenerate
    );
    fs::write(&manifest, text).map_err(io_err(&manifest))?;
    println!(
        "wrote {} ({} images, {degenerate} degenerate)",
        images.display(),
        set.len()
    );
    Ok(())
}

fn perturb(ctx: &Ctx, a: &PerturbArgs) -> Result<()> {
    let kind: SetKind = a.kind.parse()?;
    if matches!(kind, SetKind::Clean | SetKind::Adversarial | SetKind::Blackbox) {
        return Err(Error::Config(format!(
            "perturb makes noise sets, not `{kind}`; see `attack`"
        )));
    }
    let base = ctx.test_set(&a.data)?;
    let train = if kind == SetKind::Gaussian {
        None
    } else {
        Some(ctx.train_set(&a.data)?)
    };
    let source = SetSource {
        base: &base,
        train: train.as_ref(),
        surrogate: None,
        attack: AttackParams::default(),
        noise_size: ctx.pick(a.count, "count", harness::DEFAULT_NOISE_SIZE)?,
        seeds: ctx.seeds,
    };
    let sigma = ctx.pick(a.sigma, "sigma", harness::FOOTPRINT_STRENGTH)?;
    let set = source.build(&ctx.harness, None, kind, sigma)?;
    let images = prefixed(&a.out, "-images.idx");
    let labels = set.labels().map(|_| prefixed(&a.out, "-labels.idx"));
    idx::save_dataset(&set, &images, labels.as_deref(), IdxType::F64)?;
    println!("wrote {} ({} images)", images.display(), set.len());
    Ok(())
}

fn sweep(ctx: &Ctx, a: &SweepArgs) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let kind: SetKind = a.kind.parse()?;
    let grid = match ctx.opt(a.grid.clone(), "grid")? {
        Some(g) => parse_grid(&g)?,
        None => match kind {
            SetKind::Gaussian => harness::DEFAULT_SIGMAS.to_vec(),
            _ if a.fine => attack::FINE_EPSILONS.to_vec(),
            _ => attack::DEFAULT_EPSILONS.to_vec(),
        },
    };
    let base = ctx.test_set(&a.data)?;
    let options = SweepOptions {
        samples: ctx.pick(a.eval.samples, "samples", harness::DEFAULT_SAMPLES)?,
        distance_queries: ctx.pick(a.distance_queries, "distance_queries", 0)?,
    };
    let needs_train = options.distance_queries > 0 || matches!(kind, SetKind::Uniform | SetKind::Pixel | SetKind::Mvn);
    let train = needs_train.then(|| ctx.train_set(&a.data)).transpose()?;
    let surrogate = ctx.surrogate(&a.attack)?;
    let source = SetSource {
        base: &base,
        train: train.as_ref(),
        surrogate: surrogate.as_ref(),
        attack: ctx.attack_params(&a.attack)?,
        noise_size: ctx.pick(a.eval.noise_size, "noise_size", harness::DEFAULT_NOISE_SIZE)?,
        seeds: ctx.seeds,
    };
    let id = model_id(&a.model);
    let rows = harness::run_sweep(&ctx.harness, &ckpt.model, &id, kind, &grid, &source, &options)?;
    let (path, mut w) = ctx.out_file(&format!("sweep-{id}-{kind}.csv"))?;
    records::write_sweep(&mut w, &rows)?;
    w.flush().map_err(io_err(&path))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn footprint(ctx: &Ctx, a: &FootprintArgs) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let base = ctx.test_set(&a.data)?;
    let train = ctx.train_set(&a.data)?;
    let surrogate = ctx.surrogate(&a.attack)?;
    let source = SetSource {
        base: &base,
        train: Some(&train),
        surrogate: surrogate.as_ref(),
        attack: ctx.attack_params(&a.attack)?,
        noise_size: ctx.pick(a.eval.noise_size, "noise_size", harness::DEFAULT_NOISE_SIZE)?,
        seeds: ctx.seeds,
    };
    let samples = ctx.pick(a.eval.samples, "samples", harness::DEFAULT_SAMPLES)?;
    let sets = harness::footprint_sets(&ctx.harness, &ckpt.model, &source)?;
    let id = model_id(&a.model);
    let rows = harness::run_footprint(&ctx.harness, &ckpt.model, &id, &sets, samples, ctx.seeds)?;
    let (path, mut w) = ctx.out_file(&format!("footprint-{id}.csv"))?;
    records::write_footprint(&mut w, &rows)?;
    w.flush().map_err(io_err(&path))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn distance(ctx: &Ctx, a: &DistanceArgs) -> Result<()> {
    let mut queries = idx::load_images(&a.images, None)?;
    if let Some(n) = ctx.opt(a.data.limit, "limit")? {
        queries = queries.take(n.min(queries.len()));
    }
    let train = ctx.train_set(&a.data)?;
    let report = ctx.harness.distances(&queries, &train)?;
    let (path, mut w) = ctx.out_file("distance.csv")?;
    let io = io_err(&path);
    (|| {
        writeln!(w, "index,distance")?;
        for (i, d) in report.distances.iter().enumerate() {
            writeln!(w, "{i},{d}")?;
        }
        w.flush()
    })()
    .map_err(io)?;
    println!(
        "mean {} (std error {}, n {})",
        report.mean,
        report.std_error(),
        report.distances.len()
    );
    Ok(())
}

fn detect(ctx: &Ctx, a: &DetectArgs) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let base = ctx.test_set(&a.data)?;
    let epsilon = ctx.pick(a.epsilon, "epsilon", 0.3)?;
    let quantile = ctx.pick(a.quantile, "quantile", 0.95)?;
    let samples = ctx.pick(a.eval.samples, "samples", harness::DEFAULT_SAMPLES)?;
    let surrogate = ctx.surrogate(&a.attack)?;
    let source = SetSource {
        base: &base,
        train: None,
        surrogate: surrogate.as_ref(),
        attack: ctx.attack_params(&a.attack)?,
        noise_size: 0,
        seeds: ctx.seeds,
    };
    let kind = if surrogate.is_some() {
        SetKind::Blackbox
    } else {
        SetKind::Adversarial
    };
    let attacked = source.build(&ctx.harness, Some(&ckpt.model), kind, epsilon)?;
    let h = &ctx.harness;
    let clean = h.summaries(&ckpt.model, &base, samples, ctx.seeds.predict())?;
    let adv = h.summaries(&ckpt.model, &attacked, samples, ctx.seeds.predict())?;
    let results = harness::detect_scores(&clean, &adv, quantile)?;
    let id = model_id(&a.model);
    let (path, mut w) = ctx.out_file(&format!("detect-{id}.csv"))?;
    let io = io_err(&path);
    (|| {
        writeln!(
            w,
            "model_id,metric,epsilon,auc,threshold,clean_flagged,attack_flagged,n"
        )?;
        for r in &results {
            writeln!(
                w,
                "{id},{},{epsilon},{},{},{},{},{}",
                r.metric,
                r.roc.auc,
                r.threshold,
                r.clean_flagged,
                r.attack_flagged,
                base.len()
            )?;
        }
        w.flush()
    })()
    .map_err(io)?;
    for r in &results {
        let (p, mut rw) = ctx.out_file(&format!("roc-{id}-{}.csv", r.metric))?;
        rw.write_all(detect::roc_csv(&r.roc).as_bytes())
            .and_then(|_| rw.flush())
            .map_err(io_err(&p))?;
    }
    let mummi = results
        .iter()
        .find(|r| r.metric == Metric::Mummi)
        .map_or(f64::NAN, |r| r.roc.auc);
    println!("wrote {} (mummi auc {mummi})", path.display());
    Ok(())
}

fn export(_ctx: &Ctx, a: &ExportArgs) -> Result<()> {
    let kind = match a.format.as_str() {
        "ubyte" => IdxType::U8,
        "double" => IdxType::F64,
        f => return Err(Error::Config(format!("unknown export format `{f}` (ubyte or double)"))),
    };
    let set = idx::load_images(&a.images, a.labels.as_deref())?;
    let images = prefixed(&a.out, "-images.idx");
    let labels = set.labels().map(|_| prefixed(&a.out, "-labels.idx"));
    idx::save_dataset(&set, &images, labels.as_deref(), kind)?;
    println!("wrote {} ({} images)", images.display(), set.len());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Train(a) => train(&ctx, a),
        Command::Attack(a) => attack(&ctx, a),
        Command::Perturb(a) => perturb(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Footprint(a) => footprint(&ctx, a),
        Command::Distance(a) => distance(&ctx, a),
        Command::Detect(a) => detect(&ctx, a),
        Command::Export(a) => export(&ctx, a),
    }
}

/// Parses `std::env::args`, runs, and returns the process exit code:
/// 0 on success, 1 on a runtime failure, 2 on a usage error.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn grids_and_prefixes() {
        assert_eq!(parse_grid("0.1, 0.3,1").unwrap(), vec![0.1, 0.3, 1.0]);
        assert!(parse_grid("0.1,-1").is_err());
        assert!(parse_grid("x").is_err());
        assert_eq!(
            prefixed(Path::new("out/adv"), "-images.idx"),
            PathBuf::from("out/adv-images.idx")
        );
        assert_eq!(model_id(Path::new("runs/bbb.ckpt")), "bbb");
    }
}
