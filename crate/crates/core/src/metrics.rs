//! Generative-model metrics over feature matrices and downstream classifier scores.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{mean_covariance, symmetric_eigen, sqrt_psd, trace};
use crate::math::{exp, ln, sqrt};
use crate::{Error, Result};

/// `n × d` feature rows tagged with the extractor that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    pub extractor: String,
}

impl FeatureSet {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>, extractor: impl Into<String>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::shape(format!("{rows}x{dim}"), format!("{} values", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { location: "feature set".into(), reason: "non-finite feature".into() });
        }
        Ok(Self { rows, dim, data, extractor: extractor.into() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// One row of a generation-quality report.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub fid: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub precision: f64,
    pub recall: f64,
    pub real_count: usize,
    pub fake_count: usize,
    pub extractor: String,
    pub config_hash: String,
}

impl MetricReport {
    /// FID and k-NN precision/recall on features, IS on the fake class probabilities.
    pub fn compute(
        real: &FeatureSet,
        fake: &FeatureSet,
        fake_probs: &[f64],
        classes: usize,
        k: usize,
        splits: usize,
        config_hash: impl Into<String>,
    ) -> Result<Self> {
        if real.extractor != fake.extractor {
            return Err(Error::invalid("extractor", format!("{} against {}", real.extractor, fake.extractor)));
        }
        let (precision, recall) = precision_recall(real, fake, k)?;
        let (is_mean, is_std) = inception_score(fake_probs, fake.rows, classes, splits)?;
        Ok(Self {
            fid: fid(real, fake)?,
            is_mean,
            is_std,
            precision,
            recall,
            real_count: real.rows,
            fake_count: fake.rows,
            extractor: real.extractor.clone(),
            config_hash: config_hash.into(),
        })
    }
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(real: &FeatureSet, fake: &FeatureSet) -> Result<f64> {
    if real.dim != fake.dim {
        return Err(Error::shape(format!("feature width {}", real.dim), format!("{}", fake.dim)));
    }
    if real.rows < 2 || fake.rows < 2 {
        return Err(Error::invalid("features", "covariance needs at least 2 rows per set"));
    }
    let d = real.dim;
    let (mu_r, cov_r) = mean_covariance(&real.data, real.rows, d);
    let (mu_f, cov_f) = mean_covariance(&fake.data, fake.rows, d);
    let mean_term: f64 = mu_r.iter().zip(&mu_f).map(|(a, b)| (a - b) * (a - b)).sum();
    let cross = trace_sqrt_product(&cov_r, &cov_f, d)?;
    let value = mean_term + trace(&cov_r, d) + trace(&cov_f, d) - 2.0 * cross;
    Ok(value.max(0.0))
}

/// `Tr((A·B)^{1/2})` for PSD `A`, `B`, via the symmetric form `A^{1/2}·B·A^{1/2}`.
pub fn trace_sqrt_product(a: &[f64], b: &[f64], d: usize) -> Result<f64> {
    let ra = sqrt_psd(a, d);
    let sym = crate::linalg::matmul(&crate::linalg::matmul(&ra, b, d), &ra, d);
    let (vals, _) = symmetric_eigen(&sym, d);
    let top = vals.iter().fold(0.0f64, |m, v| m.max(crate::math::abs(*v)));
    let floor = 1e-10 * top.max(f64::MIN_POSITIVE);
    let (mut real, mut imag) = (0.0, 0.0);
    for v in vals {
        if v >= -floor {
            real += sqrt(v.max(0.0));
        } else {
            imag += sqrt(-v);
        }
    }
    if imag > 1e-6 * real.max(f64::MIN_POSITIVE) {
        return Err(Error::Numeric {
            location: "matrix square root".into(),
            reason: format!("imaginary component {imag:e} against real {real:e}"),
        });
    }
    Ok(real)
}

/// Exponentiated mean KL between per-sample and marginal class distributions,
/// averaged over `splits` contiguous chunks. Returns `(mean, std)`.
pub fn inception_score(probs: &[f64], rows: usize, classes: usize, splits: usize) -> Result<(f64, f64)> {
    if probs.len() != rows * classes || classes == 0 {
        return Err(Error::shape(format!("{rows}x{classes}"), format!("{} values", probs.len())));
    }
    if splits == 0 || splits > rows {
        return Err(Error::invalid("splits", format!("{splits} is outside [1, {rows}]")));
    }
    for (i, row) in probs.chunks(classes).enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|p| !(*p >= 0.0)) || crate::math::abs(s - 1.0) > 1e-6 {
            return Err(Error::invalid("probs", format!("row {i} is not a probability vector (sum {s})")));
        }
    }
    let mut scores = Vec::with_capacity(splits);
    for k in 0..splits {
        let start = k * rows / splits;
        let end = (k + 1) * rows / splits;
        let chunk = &probs[start * classes..end * classes];
        let n = (end - start) as f64;
        let mut marginal = vec![0.0; classes];
        for row in chunk.chunks(classes) {
            marginal.iter_mut().zip(row).for_each(|(m, p)| *m += p / n);
        }
        let mut kl = 0.0;
        for row in chunk.chunks(classes) {
            for (p, m) in row.iter().zip(&marginal) {
                if *p > 0.0 {
                    kl += p * (ln(*p) - ln(*m));
                }
            }
        }
        scores.push(exp(kl / n));
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok((mean, sqrt(var)))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each row to its `k`-th nearest other row.
fn knn_radii(set: &FeatureSet, k: usize) -> Vec<f64> {
    let mut scratch = Vec::with_capacity(set.rows);
    (0..set.rows)
        .map(|i| {
            scratch.clear();
            scratch.extend((0..set.rows).filter(|&j| j != i).map(|j| sq_dist(set.row(i), set.row(j))));
            let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            *kth
        })
        .collect()
}

fn coverage(manifold: &FeatureSet, radii: &[f64], probes: &FeatureSet) -> f64 {
    let hits = (0..probes.rows)
        .filter(|&i| (0..manifold.rows).any(|j| sq_dist(probes.row(i), manifold.row(j)) <= radii[j]))
        .count();
    hits as f64 / probes.rows as f64
}

/// k-NN manifold precision and recall.
pub fn precision_recall(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    if real.dim != fake.dim {
        return Err(Error::shape(format!("feature width {}", real.dim), format!("{}", fake.dim)));
    }
    if k == 0 || k >= real.rows || k >= fake.rows {
        return Err(Error::invalid("k", format!("{k} must be in [1, min(n_real, n_fake) - 1]")));
    }
    let real_radii = knn_radii(real, k);
    let fake_radii = knn_radii(fake, k);
    Ok((coverage(real, &real_radii, fake), coverage(fake, &fake_radii, real)))
}

/// ROC AUC via the rank-sum statistic; tied scores share their average rank.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::shape(format!("{} labels", scores.len()), format!("{}", positive.len())));
    }
    let pos = positive.iter().filter(|p| **p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("labels", "AUC needs both positive and negative examples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&o| positive[o]).count() as f64 * avg;
        i = j + 1;
    }
    Ok((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

/// One-vs-rest AUC averaged over classes present among the labels.
pub fn mean_auc(probs: &[f64], labels: &[usize], classes: usize) -> Result<f64> {
    if probs.len() != labels.len() * classes {
        return Err(Error::shape(format!("{}x{classes}", labels.len()), format!("{} values", probs.len())));
    }
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..classes {
        let positive: Vec<bool> = labels.iter().map(|l| *l == c).collect();
        if positive.iter().all(|p| *p) || !positive.iter().any(|p| *p) {
            continue;
        }
        let scores: Vec<f64> = probs.chunks(classes).map(|r| r[c]).collect();
        total += roc_auc(&scores, &positive)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid("labels", "no class has both positives and negatives"));
    }
    Ok(total / used as f64)
}

/// Macro-averaged F1 of argmax predictions.
pub fn macro_f1(predicted: &[usize], labels: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..classes {
        let tp = predicted.iter().zip(labels).filter(|(p, l)| **p == c && **l == c).count() as f64;
        let fp = predicted.iter().zip(labels).filter(|(p, l)| **p == c && **l != c).count() as f64;
        let fn_ = predicted.iter().zip(labels).filter(|(p, l)| **p != c && **l == c).count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        total += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    total / classes.max(1) as f64
}
