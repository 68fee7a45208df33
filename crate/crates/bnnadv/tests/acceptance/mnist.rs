//! MNIST experiments behind the accuracy, sweep, transfer, distance and
//! detection criteria. Trained checkpoints are cached between runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bnnadv::checkpoint;
use bnnadv::harness::{self, evaluate_set, AttackParams, Harness, Mnist, Seeds, SetSource, SweepOptions, TrainOptions};
use bnnadv::records::{write_sweep, MeanStd, SetKind, SweepRecord};
use bnnadv_core::attack::{DEFAULT_EPSILONS, FINE_EPSILONS};
use bnnadv_core::bnn::{Family, Model};
use bnnadv_core::data::Dataset;
use bnnadv_core::detect;
use bnnadv_core::uncertainty::{Metric, UncertaintySummary};

use super::Verdict;

/// Bump when training code changes so stale cached checkpoints are retrained.
const CACHE_VERSION: u32 = 1;
const TRAIN_SEED: u64 = 17;
const EVAL_SEED: u64 = 23;
const SUBSET: usize = 1000;
const SAMPLES: usize = 100;
const SIGMAS: [f64; 6] = [0.1, 0.25, 0.3, 0.5, 0.75, 1.0];
const BNNS: [Family; 3] = [Family::McDropout, Family::Bbb, Family::Pbp];
const TRAIN_BUDGET_SECS: f64 = 3600.0;

pub struct Point {
    pub record: SweepRecord,
    pub summaries: Vec<UncertaintySummary>,
}

pub struct BnnRun {
    pub family: Family,
    pub train_secs: f64,
    pub full_accuracy: f64,
    pub clean: Point,
    pub adversarial: Vec<Point>,
    pub gaussian: Vec<Point>,
    pub blackbox: Vec<Point>,
    /// Mean training-set distance of each adversarial set, with the clean subset first.
    pub adv_distance: Vec<(f64, f64)>,
}

pub struct Experiments {
    pub runs: Vec<BnnRun>,
    pub gauss_distance: Vec<(f64, f64)>,
}

fn log(msg: &str) {
    eprintln!("  [acceptance] {msg}");
}

fn cached_model(train: &Dataset, options: &TrainOptions, name: &str, dir: &Path) -> Result<(Model, f64), String> {
    let path = dir.join(format!("acceptance-v{CACHE_VERSION}-{name}.ckpt"));
    let secs_path = path.with_extension("secs");
    let retrain = std::env::var_os("BNNADV_RETRAIN").is_some();
    if !retrain && path.exists() {
        if let Ok(c) = checkpoint::load(&path) {
            let secs = fs::read_to_string(&secs_path)
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or(f64::NAN);
            log(&format!("loaded cached {name} ({})", path.display()));
            return Ok((c.model, secs));
        }
    }
    log(&format!("training {name} on {} images", train.len()));
    let t = Instant::now();
    let (model, meta, _) =
        harness::train_model(train, options, TRAIN_SEED).map_err(|e| format!("training {name}: {e}"))?;
    let secs = t.elapsed().as_secs_f64();
    log(&format!("trained {name} in {secs:.0}s"));
    checkpoint::save(&path, &model, &meta).map_err(|e| e.to_string())?;
    fs::write(&secs_path, secs.to_string()).map_err(|e| e.to_string())?;
    Ok((model, secs))
}

fn metric_of(summaries: &[UncertaintySummary], m: Metric) -> MeanStd {
    MeanStd::of(&summaries.iter().map(|s| m.value(s)).collect::<Vec<_>>())
}

impl Point {
    pub fn metric(&self, m: Metric) -> MeanStd {
        metric_of(&self.summaries, m)
    }
}

pub fn run(dir: &Path, cache: &Path) -> Result<Experiments, String> {
    let start = Instant::now();
    let mnist = Mnist::load(dir).map_err(|e| format!("MNIST not available: {e}"))?;
    let h = Harness::new(0).map_err(|e| e.to_string())?;
    let seeds = Seeds::new(EVAL_SEED);
    let subset = mnist.test.take(SUBSET);
    let options = SweepOptions {
        samples: SAMPLES,
        distance_queries: 0,
    };

    let (surrogate, _) = cached_model(
        &mnist.train,
        &TrainOptions::new(Family::Deterministic),
        "surrogate",
        cache,
    )?;
    let Model::Deterministic(surrogate) = surrogate else {
        return Err("surrogate checkpoint has the wrong family".into());
    };
    let source = SetSource {
        base: &subset,
        train: Some(&mnist.train),
        surrogate: Some(&surrogate),
        attack: AttackParams::default(),
        noise_size: 0,
        seeds,
    };
    let err = |e: bnnadv::Error| e.to_string();

    let clean_distance = h.distances(&subset, &mnist.train).map_err(err)?.mean;
    let mut gauss_sets = Vec::new();
    let mut gauss_distance = vec![(0.0, clean_distance)];
    for s in SIGMAS {
        let set = source.build(&h, None, SetKind::Gaussian, s).map_err(err)?;
        gauss_distance.push((s, h.distances(&set, &mnist.train).map_err(err)?.mean));
        gauss_sets.push((s, set));
    }
    let mut bb_sets = Vec::new();
    for e in DEFAULT_EPSILONS {
        bb_sets.push((e, source.build(&h, None, SetKind::Blackbox, e).map_err(err)?));
    }

    let mut runs = Vec::new();
    let mut all_records = Vec::new();
    for family in BNNS {
        let (model, train_secs) = cached_model(&mnist.train, &TrainOptions::new(family), family.name(), cache)?;
        let id = family.name();
        let eval = |kind: SetKind, strength: f64, set: &Dataset| -> Result<Point, String> {
            let (record, summaries) =
                evaluate_set(&h, &model, id, kind, strength, set, &source, &options).map_err(err)?;
            Ok(Point { record, summaries })
        };
        let t = Instant::now();
        let full = h
            .summaries(&model, &mnist.test, SAMPLES, seeds.predict())
            .map_err(err)?;
        let full_accuracy = harness::accuracy(&full, mnist.test.labels());
        log(&format!(
            "{id}: clean accuracy {full_accuracy:.4} on {} images",
            mnist.test.len()
        ));
        let clean = eval(SetKind::Clean, 0.0, &subset)?;

        let grid: &[f64] = if family == Family::Pbp {
            &FINE_EPSILONS
        } else {
            &DEFAULT_EPSILONS
        };
        let mut adversarial = Vec::new();
        let mut adv_distance = vec![(0.0, clean_distance)];
        for &e in grid {
            let set = source.build(&h, Some(&model), SetKind::Adversarial, e).map_err(err)?;
            adv_distance.push((e, h.distances(&set, &mnist.train).map_err(err)?.mean));
            let p = eval(SetKind::Adversarial, e, &set)?;
            log(&format!("{id}: adversarial {e}: accuracy {:.4}", p.record.accuracy));
            adversarial.push(p);
        }
        let gaussian = gauss_sets
            .iter()
            .map(|(s, set)| eval(SetKind::Gaussian, *s, set))
            .collect::<Result<Vec<_>, _>>()?;
        let blackbox = bb_sets
            .iter()
            .map(|(e, set)| eval(SetKind::Blackbox, *e, set))
            .collect::<Result<Vec<_>, _>>()?;
        log(&format!("{id}: evaluated in {:.0}s", t.elapsed().as_secs_f64()));
        all_records.push(clean.record.clone());
        for p in adversarial.iter().chain(&gaussian).chain(&blackbox) {
            all_records.push(p.record.clone());
        }
        runs.push(BnnRun {
            family,
            train_secs,
            full_accuracy,
            clean,
            adversarial,
            gaussian,
            blackbox,
            adv_distance,
        });
    }
    let csv: PathBuf = cache.join("acceptance-sweeps.csv");
    if let Ok(f) = fs::File::create(&csv) {
        let _ = write_sweep(f, &all_records);
        log(&format!("sweep records written to {}", csv.display()));
    }
    log(&format!(
        "experiments finished in {:.0}s",
        start.elapsed().as_secs_f64()
    ));
    Ok(Experiments { runs, gauss_distance })
}

fn at(points: &[Point], strength: f64) -> &Point {
    points
        .iter()
        .find(|p| p.record.strength == strength)
        .expect("strength on grid")
}

/// First step where a metric mean falls; with `tolerance`, falls smaller
/// than the larger standard error of the two points are allowed.
fn first_decrease(clean: &Point, points: &[Point], tolerance: bool) -> Option<String> {
    let n = clean.summaries.len();
    let seq: Vec<&Point> = std::iter::once(clean).chain(points).collect();
    for m in Metric::ALL {
        for w in seq.windows(2) {
            let (a, b) = (w[0].metric(m), w[1].metric(m));
            let slack = if tolerance {
                a.std_error(n).max(b.std_error(n))
            } else {
                0.0
            };
            if b.mean < a.mean - slack {
                return Some(format!(
                    "{m} falls {:.4} -> {:.4} between {} and {}",
                    a.mean, b.mean, w[0].record.strength, w[1].record.strength
                ));
            }
        }
    }
    None
}

fn per_model(e: &Experiments, check: impl Fn(&BnnRun) -> (bool, String)) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in &e.runs {
        let (pass, detail) = check(r);
        ok &= pass;
        parts.push(format!("{}: {detail}", r.family));
    }
    Verdict::new(ok, parts.join("; "))
}

pub fn clean_accuracy(e: &Experiments) -> Verdict {
    let total: f64 = e.runs.iter().map(|r| r.train_secs).sum();
    let mut v = per_model(e, |r| {
        let target = match r.family {
            Family::McDropout => 0.97,
            Family::Bbb => 0.95,
            _ => 0.90,
        };
        (
            r.full_accuracy >= target,
            format!("{:.4} (>= {target})", r.full_accuracy),
        )
    });
    // NaN (unknown training time) fails the budget check.
    let within = total <= TRAIN_BUDGET_SECS;
    v.pass &= within;
    v.detail
        .push_str(&format!("; training {total:.0}s (budget {TRAIN_BUDGET_SECS:.0}s)"));
    v
}

pub fn white_box_sweep(e: &Experiments) -> Verdict {
    per_model(e, |r| {
        let clean = &r.clean;
        let p = at(&r.adversarial, 0.3);
        let acc_ok = p.record.accuracy < 0.4 * clean.record.accuracy;
        let mut ratios = Vec::new();
        let mut ratio_ok = true;
        for m in Metric::ALL {
            let ratio = p.metric(m).mean / clean.metric(m).mean;
            ratio_ok &= ratio >= 2.0;
            ratios.push(format!("{m} x{ratio:.2}"));
        }
        let mono = first_decrease(clean, &r.adversarial, true);
        (
            acc_ok && ratio_ok && mono.is_none(),
            format!(
                "accuracy {:.3} -> {:.3}, {}{}",
                clean.record.accuracy,
                p.record.accuracy,
                ratios.join(" "),
                mono.map(|m| format!(", {m}")).unwrap_or_default()
            ),
        )
    })
}

pub fn gaussian_sweep(e: &Experiments) -> Verdict {
    per_model(e, |r| {
        let g = at(&r.gaussian, 0.3).record.accuracy;
        let a = at(&r.adversarial, 0.3).record.accuracy;
        let mono = first_decrease(&r.clean, &r.gaussian, false);
        (
            g > a && mono.is_none(),
            format!(
                "accuracy at 0.3 gaussian {g:.3} vs adversarial {a:.3}{}",
                mono.map(|m| format!(", {m}")).unwrap_or_default()
            ),
        )
    })
}

pub fn transfer(e: &Experiments) -> Verdict {
    per_model(e, |r| {
        let drop = r.clean.record.accuracy - at(&r.blackbox, 0.3).record.accuracy;
        let mono = first_decrease(&r.clean, &r.blackbox, true);
        (
            drop >= 0.30 && mono.is_none(),
            format!(
                "drop {:.1} points{}",
                100.0 * drop,
                mono.map(|m| format!(", {m}")).unwrap_or_default()
            ),
        )
    })
}

fn strictly_increasing(points: &[(f64, f64)]) -> Option<String> {
    points.windows(2).find(|w| w[1].1 <= w[0].1).map(|w| {
        format!(
            "{:.6} at {} then change {:+.2e} at {}",
            w[0].1,
            w[0].0,
            w[1].1 - w[0].1,
            w[1].0
        )
    })
}

pub fn distances(e: &Experiments) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    let g = strictly_increasing(&e.gauss_distance);
    ok &= g.is_none();
    parts.push(format!(
        "sigma grid {:.5} -> {:.5}{}",
        e.gauss_distance[0].1,
        e.gauss_distance.last().unwrap().1,
        g.map(|m| format!(" ({m})")).unwrap_or_default()
    ));
    for r in &e.runs {
        let a = strictly_increasing(&r.adv_distance);
        ok &= a.is_none();
        parts.push(format!(
            "{} eps grid {:.5} -> {:.5}{}",
            r.family,
            r.adv_distance[0].1,
            r.adv_distance.last().unwrap().1,
            a.map(|m| format!(" ({m})")).unwrap_or_default()
        ));
    }
    Verdict::new(ok, parts.join("; "))
}

pub fn detection(e: &Experiments) -> Verdict {
    let mut passing = 0;
    let mut parts = Vec::new();
    for r in &e.runs {
        let scores = |p: &Point| p.summaries.iter().map(|s| s.mummi).collect::<Vec<_>>();
        match detect::roc(&scores(&r.clean), &scores(at(&r.adversarial, 0.3))) {
            Ok(roc) => {
                passing += usize::from(roc.auc >= 0.85);
                parts.push(format!("{} AUC {:.3}", r.family, roc.auc));
            }
            Err(err) => parts.push(format!("{}: {err}", r.family)),
        }
    }
    Verdict::new(passing >= 2, format!("{} ({passing} of 3 >= 0.85)", parts.join(", ")))
}
