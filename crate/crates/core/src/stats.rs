//! ROC analysis, a paired sign-flip permutation test and descriptive summaries.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Default number of random sign-flip permutations.
pub const DEFAULT_PERMUTATIONS: usize = 10_000;

/// ROC curve of a score against binary labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// Distinct scores, descending; point `i` classifies `score >= thresholds[i]` as positive.
    pub thresholds: Vec<f64>,
    /// Starts at (0, 0) and ends at (1, 1); one entry more than `thresholds`.
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
}

/// Area under the ROC curve via the rank-sum (Mann-Whitney) statistic with midranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Degenerate("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(format!(
            "need both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // midranks over tie groups, ascending
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    let area = u / (p * n);

    // curve: sweep tie groups from the highest score down
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut thresholds = Vec::new();
    let mut tpr = vec![0.0];
    let mut fpr = vec![0.0];
    let mut k = order.len();
    while k > 0 {
        let s = scores[order[k - 1]];
        while k > 0 && scores[order[k - 1]] == s {
            if labels[order[k - 1]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            k -= 1;
        }
        thresholds.push(s);
        tpr.push(tp as f64 / p);
        fpr.push(fp as f64 / n);
    }
    Ok(RocResult {
        thresholds,
        tpr,
        fpr,
        auc: area,
    })
}

/// Two-sided paired permutation test of `mean(x - y) = 0` by random sign flips.
///
/// The identity permutation is always counted, so the smallest attainable
/// p-value is `1 / (n_perm + 1)`.
pub fn paired_permutation_test(x: &[f64], y: &[f64], n_perm: usize, seed: u64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "paired samples have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Degenerate("need at least two pairs".into()));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let n = diffs.len() as f64;
    let observed = (diffs.iter().sum::<f64>() / n).abs();
    // relative slack so that exact ties (e.g. all-zero differences) count as extreme
    let tol = 1e-12 * diffs.iter().map(|d| d.abs()).sum::<f64>().max(1e-300) / n;
    let mut rng = seed::rng(seed, &[0x7065_726d]);
    let mut extreme = 1usize;
    for _ in 0..n_perm {
        let mut total = 0.0;
        for &d in &diffs {
            total += if rng.random::<bool>() { d } else { -d };
        }
        if (total / n).abs() >= observed - tol {
            extreme += 1;
        }
    }
    Ok(extreme as f64 / (n_perm + 1) as f64)
}

/// Descriptive summary with population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Summary {
    /// `mean ± std` to three decimals.
    pub fn display(&self) -> String {
        format!("{:.3} ± {:.3}", self.mean, self.std)
    }

    /// Same as [`Summary::display`] with values expressed as percentages.
    pub fn display_percent(&self) -> String {
        format!("{:.1}% ± {:.1}%", 100.0 * self.mean, 100.0 * self.std)
    }
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Degenerate("cannot summarize an empty sample".into()));
    }
    let mut stats = RunningStats::default();
    for &v in values {
        stats.push(v);
    }
    Ok(Summary {
        mean: stats.mean,
        std: (stats.m2 / stats.count as f64).max(0.0).sqrt(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        n: values.len(),
    })
}

/// Welford accumulator.
#[derive(Debug, Clone, Copy, Default)]
struct RunningStats {
    count: usize,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }
}
