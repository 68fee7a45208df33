//! Tabular outputs shared with the plotting scripts.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which image set a record describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SetKind {
    Clean,
    /// White-box FGSM on the evaluated model.
    Adversarial,
    Gaussian,
    Uniform,
    Pixel,
    Mvn,
    /// FGSM crafted on a separately trained surrogate.
    Blackbox,
}

impl SetKind {
    pub const ALL: [SetKind; 7] = [
        SetKind::Clean,
        SetKind::Adversarial,
        SetKind::Gaussian,
        SetKind::Uniform,
        SetKind::Pixel,
        SetKind::Mvn,
        SetKind::Blackbox,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SetKind::Clean => "clean",
            SetKind::Adversarial => "adversarial",
            SetKind::Gaussian => "gaussian",
            SetKind::Uniform => "uniform",
            SetKind::Pixel => "pixel",
            SetKind::Mvn => "mvn",
            SetKind::Blackbox => "blackbox",
        }
    }

    /// Whether the set has a strength axis (ε or σ).
    pub fn has_strength(&self) -> bool {
        matches!(self, SetKind::Adversarial | SetKind::Gaussian | SetKind::Blackbox)
    }

    /// Synthetic sets carry no labels.
    pub fn is_labelled(&self) -> bool {
        !matches!(self, SetKind::Uniform | SetKind::Pixel | SetKind::Mvn)
    }
}

impl fmt::Display for SetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown set kind `{s}`")))
    }
}

pub const SWEEP_HEADER: [&str; 13] = [
    "model_id",
    "set_kind",
    "strength",
    "accuracy",
    "entropy_mean",
    "entropy_std",
    "mummi_mean",
    "mummi_std",
    "vr_mean",
    "vr_std",
    "distance_mean",
    "n",
    "seed",
];

pub const FOOTPRINT_HEADER: [&str; 7] = [
    "model_id",
    "set_kind",
    "metric",
    "class_prob",
    "value",
    "predicted",
    "true",
];

pub const ROC_HEADER: [&str; 3] = ["fpr", "tpr", "threshold"];

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }

    pub fn std_error(&self, n: usize) -> f64 {
        self.std / (n as f64).sqrt()
    }
}

/// One row of a sweep: accuracy and uncertainty at one strength.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub model_id: String,
    pub set_kind: SetKind,
    pub strength: f64,
    /// NaN for unlabelled sets.
    pub accuracy: f64,
    pub entropy: MeanStd,
    pub mummi: MeanStd,
    pub variation_ratio: MeanStd,
    /// Mean nearest-neighbour distance to the training set; NaN when not computed.
    pub distance_mean: f64,
    pub n: usize,
    pub seed: u64,
}

/// One point of an uncertainty footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct FootprintRecord {
    pub model_id: String,
    pub set_kind: SetKind,
    pub metric: String,
    pub class_prob: f64,
    pub value: f64,
    pub predicted: usize,
    pub true_class: Option<usize>,
}

fn float(v: f64) -> String {
    // Shortest representation that parses back to the same bits.
    format!("{v}")
}

pub fn write_sweep<W: Write>(out: W, records: &[SweepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for r in records {
        w.write_record([
            r.model_id.clone(),
            r.set_kind.to_string(),
            float(r.strength),
            float(r.accuracy),
            float(r.entropy.mean),
            float(r.entropy.std),
            float(r.mummi.mean),
            float(r.mummi.std),
            float(r.variation_ratio.mean),
            float(r.variation_ratio.std),
            float(r.distance_mean),
            r.n.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn write_footprint<W: Write>(out: W, records: &[FootprintRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FOOTPRINT_HEADER)?;
    for r in records {
        w.write_record([
            r.model_id.clone(),
            r.set_kind.to_string(),
            r.metric.clone(),
            float(r.class_prob),
            float(r.value),
            r.predicted.to_string(),
            r.true_class.map(|t| t.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

fn field<T: FromStr>(row: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    row.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| {
        Error::Config(format!(
            "bad `{name}` field in row {:?}",
            row.position().map(|p| p.line())
        ))
    })
}

fn check_header<R: Read>(r: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let header = r.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Config(format!("unexpected CSV header {header:?}")));
    }
    Ok(())
}

pub fn read_sweep<R: Read>(input: R) -> Result<Vec<SweepRecord>> {
    let mut r = csv::Reader::from_reader(input);
    check_header(&mut r, &SWEEP_HEADER)?;
    r.records()
        .map(|row| {
            let row = row?;
            let ms = |i: usize, name: &str| -> Result<MeanStd> {
                Ok(MeanStd {
                    mean: field(&row, i, name)?,
                    std: field(&row, i + 1, name)?,
                })
            };
            Ok(SweepRecord {
                model_id: field(&row, 0, "model_id")?,
                set_kind: field(&row, 1, "set_kind")?,
                strength: field(&row, 2, "strength")?,
                accuracy: field(&row, 3, "accuracy")?,
                entropy: ms(4, "entropy")?,
                mummi: ms(6, "mummi")?,
                variation_ratio: ms(8, "vr")?,
                distance_mean: field(&row, 10, "distance_mean")?,
                n: field(&row, 11, "n")?,
                seed: field(&row, 12, "seed")?,
            })
        })
        .collect()
}

pub fn read_footprint<R: Read>(input: R) -> Result<Vec<FootprintRecord>> {
    let mut r = csv::Reader::from_reader(input);
    check_header(&mut r, &FOOTPRINT_HEADER)?;
    r.records()
        .map(|row| {
            let row = row?;
            Ok(FootprintRecord {
                model_id: field(&row, 0, "model_id")?,
                set_kind: field(&row, 1, "set_kind")?,
                metric: field(&row, 2, "metric")?,
                class_prob: field(&row, 3, "class_prob")?,
                value: field(&row, 4, "value")?,
                predicted: field(&row, 5, "predicted")?,
                true_class: match row.get(6) {
                    Some("") | None => None,
                    Some(_) => Some(field(&row, 6, "true")?),
                },
            })
        })
        .collect()
}
