//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The process always exits 0 so that a genuinely unmet criterion is
//! reported rather than hidden behind a red test run; read the lines.
//!
//! MNIST is read from `BNNADV_MNIST_DIR` (default `<workspace>/data/mnist`).
//! Trained models are cached under the cargo target tmp dir; set
//! `BNNADV_RETRAIN=1` to ignore the cache. A cold run trains four models and
//! takes roughly an hour on one core.

mod analytic;
mod mnist;

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Self::new(false, detail.into())
    }
}

fn report(name: &str, limit_secs: Option<f64>, f: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let mut v = match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::fail(format!("panicked: {msg}"))
        }
    };
    let secs = t.elapsed().as_secs_f64();
    if let Some(limit) = limit_secs {
        if secs > limit {
            v.pass = false;
            v.detail.push_str(&format!("; over the {limit:.0}s runtime limit"));
        }
    }
    println!(
        "{} {name}: {} [{secs:.1}s]",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail
    );
    v.pass
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("BNNADV_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist"))
}

/// Runs a small train/attack/sweep/detect pipeline twice with one thread and
/// compares every output byte.
fn determinism(data: &Path) -> Verdict {
    let bin = env!("CARGO_BIN_EXE_bnnadv");
    let data = data.to_str().unwrap_or_default().to_string();
    let steps: Vec<Vec<&str>> = vec![
        vec![
            "train",
            "--family",
            "bbb",
            "--arch",
            "mlp:32",
            "--epochs",
            "1",
            "--train-size",
            "3000",
            "--out",
            "m.ckpt",
        ],
        vec![
            "train",
            "--family",
            "pbp",
            "--arch",
            "mlp:16",
            "--train-size",
            "1000",
            "--out",
            "p.ckpt",
        ],
        vec![
            "attack",
            "--model",
            "m.ckpt",
            "--epsilon",
            "0.2",
            "--limit",
            "100",
            "--grad-samples",
            "20",
            "--out",
            "adv",
        ],
        vec![
            "sweep",
            "--model",
            "m.ckpt",
            "--kind",
            "adversarial",
            "--grid",
            "0.1,0.3",
            "--limit",
            "100",
            "--samples",
            "20",
            "--grad-samples",
            "20",
            "--distance-queries",
            "20",
        ],
        vec![
            "sweep",
            "--model",
            "p.ckpt",
            "--kind",
            "gaussian",
            "--limit",
            "100",
            "--samples",
            "20",
        ],
        vec![
            "detect",
            "--model",
            "p.ckpt",
            "--limit",
            "100",
            "--samples",
            "20",
            "--grad-samples",
            "20",
        ],
        vec!["perturb", "--kind", "mvn", "--count", "20", "--out", "mvn"],
    ];
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = match tempfile::tempdir() {
            Ok(d) => d,
            Err(e) => return Verdict::fail(e.to_string()),
        };
        for step in &steps {
            let out = Command::new(bin)
                .current_dir(dir.path())
                .args(["--seed", "11", "--threads", "1", "--out-dir", "out"])
                .args(&step[..1])
                .args(["--data", &data])
                .args(&step[1..])
                .output();
            match out {
                Ok(o) if o.status.success() => {}
                Ok(o) => {
                    return Verdict::fail(format!(
                        "`{}` failed: {}",
                        step[0],
                        String::from_utf8_lossy(&o.stderr).trim()
                    ))
                }
                Err(e) => return Verdict::fail(e.to_string()),
            }
        }
        let mut files: Vec<(PathBuf, Vec<u8>)> = walk(dir.path())
            .into_iter()
            .map(|p| {
                let bytes = std::fs::read(&p).unwrap_or_default();
                (p.strip_prefix(dir.path()).unwrap().to_path_buf(), bytes)
            })
            .collect();
        files.sort();
        outputs.push(files);
    }
    let same = outputs[0] == outputs[1];
    let n = outputs[0].len();
    let bytes: usize = outputs[0].iter().map(|f| f.1.len()).sum();
    let detail = if same {
        format!("{n} output files ({bytes} bytes) identical across two runs")
    } else {
        let diff: Vec<String> = outputs[0]
            .iter()
            .zip(&outputs[1])
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.0.display().to_string())
            .collect();
        format!("outputs differ: {}", diff.join(", "))
    };
    Verdict::new(same, detail)
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = std::fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
    }
    out
}

fn main() {
    println!("acceptance suite");
    let mut passed = 0;
    let mut total = 0;
    let mut tally = |ok: bool| {
        total += 1;
        passed += usize::from(ok);
    };
    tally(report("gradient correctness", Some(60.0), analytic::gradients));
    tally(report("metric identities", Some(10.0), analytic::metric_identities));
    tally(report("moment propagation", Some(300.0), analytic::moment_propagation));
    tally(report("weighted gradient identity", None, analytic::gradient_identity));

    let data = mnist_dir();
    let cache = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let experiments = mnist::run(&data, &cache);
    let criteria: [(&str, fn(&mnist::Experiments) -> Verdict); 6] = [
        ("clean accuracy", mnist::clean_accuracy),
        ("white-box sweep", mnist::white_box_sweep),
        ("gaussian sweep", mnist::gaussian_sweep),
        ("black-box transfer", mnist::transfer),
        ("training-set distance", mnist::distances),
        ("mummi detection", mnist::detection),
    ];
    for (name, check) in criteria {
        let ok = match &experiments {
            Ok(e) => report(name, None, || check(e)),
            Err(msg) => report(name, None, || Verdict::fail(msg.clone())),
        };
        tally(ok);
    }
    tally(report("determinism", None, || determinism(&data)));
    println!("{passed} of {total} criteria passed");
}
