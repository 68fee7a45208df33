//! Uncertainty summaries of a Monte Carlo predictive sample set.
//!
//! All entropies are in nats.

use alloc::{format, string::String, vec, vec::Vec};
use core::fmt;
use core::str::FromStr;

use crate::bnn::PredictiveSampleSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintySummary {
    /// Argmax of the Monte Carlo mean distribution (lowest index on ties).
    pub predicted_class: usize,
    /// Mean probability of `predicted_class`.
    pub class_prob: f64,
    /// Entropy of the mean distribution.
    pub entropy: f64,
    /// Mutual information between prediction and weights: `entropy` minus
    /// the mean per-sample entropy.
    pub mummi: f64,
    /// `1 - mode_frequency / M`.
    pub variation_ratio: f64,
    /// Number of samples voting for the modal class.
    pub mode_frequency: usize,
}

/// Which summary a detector or footprint reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Entropy,
    Mummi,
    VariationRatio,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Entropy, Metric::Mummi, Metric::VariationRatio];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Entropy => "entropy",
            Metric::Mummi => "mummi",
            Metric::VariationRatio => "variation_ratio",
        }
    }

    pub fn value(&self, s: &UncertaintySummary) -> f64 {
        match self {
            Metric::Entropy => s.entropy,
            Metric::Mummi => s.mummi,
            Metric::VariationRatio => s.variation_ratio,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Metric::Entropy),
            "mummi" => Ok(Metric::Mummi),
            "variation_ratio" | "vr" => Ok(Metric::VariationRatio),
            _ => Err(Error::Config(format!("unknown metric `{s}`"))),
        }
    }
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
///
/// Terms are summed in sorted order, so the result does not depend on the
/// order of the classes.
pub fn entropy(p: &[f64]) -> f64 {
    let terms: Vec<f64> = p.iter().filter(|&&v| v > 0.0).map(|&v| v * libm::log(v)).collect();
    -ordered_sum(terms)
}

/// Sum of `values` taken in ascending order: invariant under permutation.
fn ordered_sum(mut values: Vec<f64>) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn summarize(samples: &PredictiveSampleSet) -> UncertaintySummary {
    summarize_rows(samples.probs(), samples.num_classes()).expect("sample set invariants hold")
}

/// [`summarize`] on a raw row-major `M × classes` probability matrix.
pub fn summarize_rows(probs: &[f64], classes: usize) -> Result<UncertaintySummary> {
    if classes == 0 || probs.is_empty() || !probs.len().is_multiple_of(classes) {
        return Err(Error::Precondition(String::from(
            "summary needs at least one sample row of class probabilities",
        )));
    }
    let m = probs.len() / classes;
    let rows = || probs.chunks_exact(classes);
    let first = &probs[..classes];
    let collapsed = rows().all(|r| r == first);
    let mean: Vec<f64> = if collapsed {
        first.to_vec()
    } else {
        (0..classes)
            .map(|c| ordered_sum(rows().map(|r| r[c]).collect()) / m as f64)
            .collect()
    };
    let mut votes = vec![0usize; classes];
    for row in rows() {
        votes[argmax(row)] += 1;
    }
    let mean_row_entropy = if collapsed {
        entropy(first)
    } else {
        ordered_sum(rows().map(entropy).collect()) / m as f64
    };
    let predicted_class = argmax(&mean);
    let h = entropy(&mean);
    let mode_frequency = *votes.iter().max().unwrap();
    Ok(UncertaintySummary {
        predicted_class,
        class_prob: mean[predicted_class],
        entropy: h,
        mummi: (h - mean_row_entropy).clamp(0.0, h),
        variation_ratio: 1.0 - mode_frequency as f64 / m as f64,
        mode_frequency,
    })
}

/// Largest attainable variation ratio for `m` samples over `classes` classes:
/// votes split as evenly as possible leave a mode of `ceil(m / classes)`.
pub fn max_variation_ratio(m: usize, classes: usize) -> f64 {
    1.0 - m.div_ceil(classes) as f64 / m as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use core::f64::consts::LN_2;

    fn set(rows: &[&[f64]]) -> PredictiveSampleSet {
        let c = rows[0].len();
        PredictiveSampleSet::new(rows.iter().flat_map(|r| r.iter().copied()).collect(), c).unwrap()
    }

    #[test]
    fn identical_rows_have_no_model_uncertainty() {
        let s = summarize(&set(&[&[0.9, 0.1][..]; 5]));
        let h = -0.9 * libm::log(0.9) - 0.1 * libm::log(0.1);
        assert!((s.entropy - h).abs() < 1e-15);
        assert!((s.entropy - 0.3251).abs() < 1e-4);
        assert_eq!(s.mummi, 0.0);
        assert_eq!(s.variation_ratio, 0.0);
        assert_eq!(s.predicted_class, 0);
        assert_eq!(s.mode_frequency, 5);
    }

    #[test]
    fn opposed_one_hot_rows() {
        let s = summarize(&set(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert!((s.entropy - LN_2).abs() < 1e-15);
        assert!((s.mummi - LN_2).abs() < 1e-15);
        assert_eq!(s.variation_ratio, 0.5);
        assert_eq!(s.predicted_class, 0, "tie goes to the lowest index");
        assert_eq!(s.class_prob, 0.5);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(summarize_rows(&[], 3), Err(Error::Precondition(_))));
        assert!(matches!(
            summarize_rows(&[0.5, 0.5, 0.0], 2),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn max_variation_ratio_even_split() {
        assert_eq!(max_variation_ratio(10, 10), 0.9);
        assert!((max_variation_ratio(100, 10) - 0.9).abs() < 1e-15);
        assert!((max_variation_ratio(7, 3) - (1.0 - 3.0 / 7.0)).abs() < 1e-15);
        // one vote per class for the first 7 rows reaches the bound
        let rows: Vec<f64> = (0..7)
            .flat_map(|i| {
                let mut r = vec![0.0; 3];
                r[i % 3] = 1.0;
                r
            })
            .collect();
        let s = summarize_rows(&rows, 3).unwrap();
        assert!((s.variation_ratio - max_variation_ratio(7, 3)).abs() < 1e-15);
    }

    #[test]
    fn metric_names_parse() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("bald".parse::<Metric>().is_err());
    }
}
