//! Rank-correlation and classification metrics for predicted-vs-true quality.
//!
//! Tie conventions: average ranks for SRCC, tau-b for KTC, ½ credit for tied
//! positive/negative pairs in AUC, and strict `>` against the median when
//! binarizing.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::AttentionStack;
use crate::error::{bail, Error, Result};
use crate::rng::Rng;

/// Anything that maps an attention stack to a scalar quality prediction.
pub trait Predictor {
    fn predict(&self, stack: &AttentionStack) -> Result<f64>;
}

impl<F: Fn(&AttentionStack) -> Result<f64>> Predictor for F {
    fn predict(&self, stack: &AttentionStack) -> Result<f64> {
        self(stack)
    }
}

/// Negated dispersion: the training-free baseline predictor.
#[derive(Debug, Clone, Copy, Default)]
pub struct DispersionBaseline;

impl Predictor for DispersionBaseline {
    fn predict(&self, stack: &AttentionStack) -> Result<f64> {
        Ok(-crate::stats::dispersion_score(stack)?)
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        bail!(Argument, "length mismatch: {} vs {}", a.len(), b.len());
    }
    if a.len() < 3 {
        bail!(Argument, "need at least 3 paired values, got {}", a.len());
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        bail!(Domain, "non-finite value in metric input");
    }
    Ok(())
}

/// Pearson correlation of raw values.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(a, b)
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("correlation of a constant vector".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn srcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Kendall tau-b.
pub fn ktc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len();
    let (mut concordant, mut discordant, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i].total_cmp(&a[j]) as i64;
            let db = b[i].total_cmp(&b[j]) as i64;
            if da == 0 {
                ties_a += 1;
            }
            if db == 0 {
                ties_b += 1;
            }
            match da * db {
                1 => concordant += 1,
                -1 => discordant += 1,
                _ => {}
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    let denom = (((pairs - ties_a) * (pairs - ties_b)) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Undefined("all pairs tied".into()));
    }
    Ok(((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0))
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        bail!(Argument, "median of empty list");
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Ok(if s.len() % 2 == 0 { (s[m - 1] + s[m]) / 2.0 } else { s[m] })
}

/// Labels each value 1 if strictly above the median; returns the median.
pub fn binarize_median(q: &[f64]) -> Result<(Vec<bool>, f64)> {
    if q.len() < 2 {
        bail!(Argument, "need at least 2 values to binarize, got {}", q.len());
    }
    let threshold = median(q)?;
    Ok((q.iter().map(|&v| v > threshold).collect(), threshold))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        bail!(Argument, "length mismatch: {} scores, {} labels", scores.len(), labels.len());
    }
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        bail!(Domain, "non-finite score");
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// The four agreement metrics between predictions and ground truth.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct EvalReport {
    pub srcc: f64,
    pub ktc: f64,
    pub pcc: f64,
    pub auc_roc: f64,
    pub n: usize,
    pub binarization_threshold: f64,
    pub metric_name: String,
}

/// Scores `predicted` against `truth` with median binarization for AUC.
pub fn evaluate_predictions(predicted: &[f64], truth: &[f64], metric_name: &str) -> Result<EvalReport> {
    check_pair(predicted, truth)?;
    let (labels, threshold) = binarize_median(truth)?;
    Ok(EvalReport {
        srcc: srcc(predicted, truth)?,
        ktc: ktc(predicted, truth)?,
        pcc: pcc(predicted, truth)?,
        auc_roc: auc_roc(predicted, &labels)?,
        n: truth.len(),
        binarization_threshold: threshold,
        metric_name: metric_name.into(),
    })
}

/// Runs `predictor` on each `(stack, truth)` pair and scores the result.
pub fn evaluate_probe<'a, P, I>(predictor: &P, records: I, metric_name: &str) -> Result<EvalReport>
where
    P: Predictor + ?Sized,
    I: IntoIterator<Item = (&'a AttentionStack, f64)>,
{
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    for (stack, q) in records {
        predicted.push(predictor.predict(stack)?);
        truth.push(q);
    }
    evaluate_predictions(&predicted, &truth, metric_name)
}

/// Picks a subset whose labels cover the label range more evenly.
///
/// Splits `[min, max]` into `bins` equal-width bins and samples up to
/// `per_bin` members of each without replacement. Returns sorted indices.
pub fn balance_testset(labels: &[f64], bins: usize, per_bin: usize, seed: u64) -> Result<Vec<usize>> {
    if bins < 2 {
        bail!(Argument, "need at least 2 bins, got {bins}");
    }
    if labels.iter().any(|v| !v.is_finite()) {
        bail!(Domain, "non-finite label");
    }
    let lo = labels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if labels.is_empty() || hi <= lo {
        bail!(Domain, "label range is degenerate");
    }
    let width = (hi - lo) / bins as f64;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (i, &v) in labels.iter().enumerate() {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        members[b].push(i);
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for bin in members {
        if bin.len() <= per_bin {
            out.extend(bin);
        } else {
            out.extend(rng.sample_indices(bin.len(), per_bin).into_iter().map(|k| bin[k]));
        }
    }
    out.sort_unstable();
    Ok(out)
}
