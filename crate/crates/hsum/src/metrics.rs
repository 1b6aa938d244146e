//! Evaluation measures: summary F1 (single- and multi-annotator), rank
//! correlations (tie-corrected Kendall tau and Spearman rho), average
//! precision at a positive fraction, ROUGE text overlap, and a mean-of-max
//! cosine score for visual summaries, plus the aggregated report.

use crate::error::{HsumError, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;

/// How multi-annotator F1 values are collapsed into one number per video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Aggregate {
    Mean,
    Max,
}

impl fmt::Display for F1Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            F1Aggregate::Mean => write!(f, "mean"),
            F1Aggregate::Max => write!(f, "max"),
        }
    }
}

fn check_binary(name: &str, values: &[u8]) -> Result<()> {
    if let Some(&bad) = values.iter().find(|&&v| v > 1) {
        return Err(HsumError::Range(format!(
            "{name} must be 0/1, found {bad}"
        )));
    }
    Ok(())
}

/// F1 between two binary selections. Both sides empty of positives scores 1;
/// predicted positives against an all-negative reference score 0.
pub fn f1_binary(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(HsumError::DimensionMismatch {
            what: "f1 prediction vs reference".into(),
            expected: gt.len(),
            got: pred.len(),
        });
    }
    check_binary("prediction", pred)?;
    check_binary("reference", gt)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Per-annotator F1, collapsed by mean or max.
pub fn f1_summary(pred: &[u8], gts: &[Vec<u8>], aggregate: F1Aggregate) -> Result<f64> {
    if gts.is_empty() {
        return Err(HsumError::Invariant("no reference annotations".into()));
    }
    let scores: Vec<f64> = gts
        .iter()
        .map(|gt| f1_binary(pred, gt))
        .collect::<Result<_>>()?;
    Ok(match aggregate {
        F1Aggregate::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        F1Aggregate::Max => scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s)),
    })
}

fn check_pair(name: &str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(HsumError::DimensionMismatch {
            what: name.into(),
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(HsumError::Invariant(format!(
            "{name}: need at least two observations, got {}",
            a.len()
        )));
    }
    if let Some(bad) = a.iter().chain(b).find(|v| !v.is_finite()) {
        return Err(HsumError::Range(format!("{name}: non-finite value {bad}")));
    }
    Ok(())
}

fn is_constant(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

/// Tie-corrected Kendall correlation (the tau-b variant): concordant minus
/// discordant pairs over the geometric mean of tie-adjusted pair counts.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("kendall tau", a, b)?;
    if is_constant(a) || is_constant(b) {
        return Err(HsumError::Degenerate(
            "kendall tau of a constant sequence".into(),
        ));
    }
    let n = a.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_a = 0i64;
    let mut ties_b = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 {
                ties_a += 1;
            }
            if db == 0.0 {
                ties_b += 1;
            }
            if da == 0.0 || db == 0.0 {
                continue;
            }
            if (da > 0.0) == (db > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = (((n0 - ties_a) as f64) * ((n0 - ties_b) as f64)).sqrt();
    if denom == 0.0 {
        return Err(HsumError::Degenerate(
            "kendall tau: all pairs tied".into(),
        ));
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// Ranks with ties assigned the average of the positions they occupy.
fn tie_average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // Positions start..end hold equal values; 1-based ranks average.
        let avg = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of tie-averaged ranks.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("spearman rho", a, b)?;
    if is_constant(a) || is_constant(b) {
        return Err(HsumError::Degenerate(
            "spearman rho of a constant sequence".into(),
        ));
    }
    let ra = tie_average_ranks(a);
    let rb = tie_average_ranks(b);
    let n = ra.len() as f64;
    let mean_a = ra.iter().sum::<f64>() / n;
    let mean_b = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in ra.iter().zip(&rb) {
        cov += (x - mean_a) * (y - mean_b);
        var_a += (x - mean_a).powi(2);
        var_b += (y - mean_b).powi(2);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(HsumError::Degenerate(
            "spearman rho: zero rank variance".into(),
        ));
    }
    Ok(cov / (var_a * var_b).sqrt())
}

/// Indices ordered by descending score, earlier index first on ties.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .expect("finite scores")
            .then(i.cmp(&j))
    });
    order
}

/// Average precision of the predicted ranking against positives defined as
/// the top `floor(rho * n)` items by reference score.
pub fn map_at_rho(pred_scores: &[f64], gt_scores: &[f64], rho: f64) -> Result<f64> {
    if pred_scores.len() != gt_scores.len() {
        return Err(HsumError::DimensionMismatch {
            what: "average precision pred vs reference".into(),
            expected: gt_scores.len(),
            got: pred_scores.len(),
        });
    }
    let n = pred_scores.len();
    if n == 0 {
        return Err(HsumError::Invariant("average precision of nothing".into()));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(HsumError::Range(format!(
            "positive fraction must be in (0, 1], got {rho}"
        )));
    }
    let k = ((rho * n as f64).floor() as usize).min(n);
    if k == 0 {
        return Err(HsumError::Degenerate(format!(
            "fraction {rho} of {n} items yields no positives"
        )));
    }
    let mut positive = vec![false; n];
    for &idx in descending_order(gt_scores).iter().take(k) {
        positive[idx] = true;
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank0, &idx) in descending_order(pred_scores).iter().enumerate() {
        if positive[idx] {
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / k as f64)
}

/// ROUGE F-measures for a predicted text summary against a reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
}

fn tokenize<S: AsRef<str>>(sentences: &[S]) -> Vec<String> {
    sentences
        .iter()
        .flat_map(|s| {
            s.as_ref()
                .to_lowercase()
                .split_whitespace()
                .map(str::to_string)
                .collect::<Vec<_>>()
        })
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            let key: Vec<&str> = window.iter().map(String::as_str).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

fn f_measure(overlap: usize, pred_total: usize, gt_total: usize) -> f64 {
    if overlap == 0 || pred_total == 0 || gt_total == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred_total as f64;
    let r = overlap as f64 / gt_total as f64;
    2.0 * p * r / (p + r)
}

fn ngram_f(pred: &[String], gt: &[String], n: usize) -> f64 {
    let pc = ngram_counts(pred, n);
    let gc = ngram_counts(gt, n);
    let overlap: usize = gc
        .iter()
        .map(|(gram, &g)| g.min(pc.get(gram).copied().unwrap_or(0)))
        .sum();
    let pred_total = pred.len().saturating_sub(n - 1);
    let gt_total = gt.len().saturating_sub(n - 1);
    f_measure(overlap, pred_total, gt_total)
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1, ROUGE-2 and ROUGE-L (balanced F-measures) on the lowercased,
/// whitespace-tokenized concatenation of each side's sentences.
pub fn rouge_scores<S: AsRef<str>, T: AsRef<str>>(
    pred_sentences: &[S],
    gt_sentences: &[T],
) -> Result<RougeScores> {
    let gt = tokenize(gt_sentences);
    if gt.is_empty() {
        return Err(HsumError::Invariant(
            "rouge requires a non-empty reference summary".into(),
        ));
    }
    let pred = tokenize(pred_sentences);
    let lcs = lcs_length(&pred, &gt);
    Ok(RougeScores {
        rouge_1: ngram_f(&pred, &gt, 1),
        rouge_2: ngram_f(&pred, &gt, 2),
        rouge_l: f_measure(lcs, pred.len(), gt.len()),
    })
}

/// Mean over reference frames of the best cosine similarity to any predicted
/// frame. Zero-norm rows on either side are skipped; similarities are
/// clamped below at 0 so orthogonal-or-worse matches score 0.
pub fn cosine_sim_metric(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    if pred.ncols() != gt.ncols() {
        return Err(HsumError::DimensionMismatch {
            what: "cosine metric feature width".into(),
            expected: gt.ncols(),
            got: pred.ncols(),
        });
    }
    if pred.nrows() == 0 || gt.nrows() == 0 {
        return Err(HsumError::Invariant(
            "cosine metric needs at least one frame on each side".into(),
        ));
    }
    const EPS: f64 = 1e-12;
    let pred_rows: Vec<_> = pred
        .rows()
        .into_iter()
        .filter_map(|row| {
            let norm = row.dot(&row).sqrt();
            (norm > EPS).then(|| (row, norm))
        })
        .collect();
    if pred_rows.is_empty() {
        return Err(HsumError::Degenerate(
            "cosine metric: every predicted frame has zero norm".into(),
        ));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for row in gt.rows() {
        let norm = row.dot(&row).sqrt();
        if norm <= EPS {
            continue;
        }
        let best = pred_rows
            .iter()
            .map(|(p, pn)| row.dot(p) / (norm * pn))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best.max(0.0);
        counted += 1;
    }
    if counted == 0 {
        return Err(HsumError::Degenerate(
            "cosine metric: every reference frame has zero norm".into(),
        ));
    }
    Ok(total / counted as f64)
}

/// One video's evaluation row. Rank correlations are `None` when undefined
/// (constant scores); optional metrics are `None` when not computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEval {
    pub video_id: String,
    pub f1: f64,
    pub kendall_tau: Option<f64>,
    pub spearman_rho: Option<f64>,
    /// Average precision per configured fraction, parallel to
    /// `EvalReport::map_rhos`; `None` where the fraction yields no positives.
    pub map: Vec<Option<f64>>,
    pub rouge: Option<RougeScores>,
    pub cosine: Option<f64>,
}

/// Aggregated evaluation over a video set: per-video rows plus means, with
/// the protocol choices recorded alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1_aggregate: F1Aggregate,
    pub map_rhos: Vec<f64>,
    pub mean_f1: f64,
    pub mean_kendall_tau: Option<f64>,
    pub mean_spearman_rho: Option<f64>,
    pub mean_map: Vec<Option<f64>>,
    pub mean_rouge: Option<RougeScores>,
    pub mean_cosine: Option<f64>,
    /// Videos whose rank correlations were undefined and skipped.
    pub undefined_rank_videos: usize,
    pub videos: Vec<VideoEval>,
}

fn mean_of_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

impl EvalReport {
    /// Aggregate per-video rows; every mean is over the defined values only.
    pub fn from_videos(
        videos: Vec<VideoEval>,
        f1_aggregate: F1Aggregate,
        map_rhos: Vec<f64>,
    ) -> Result<Self> {
        if videos.is_empty() {
            return Err(HsumError::Invariant("no videos to evaluate".into()));
        }
        for v in &videos {
            if v.map.len() != map_rhos.len() {
                return Err(HsumError::DimensionMismatch {
                    what: format!("map columns for {}", v.video_id),
                    expected: map_rhos.len(),
                    got: v.map.len(),
                });
            }
        }
        let n = videos.len() as f64;
        let mean_f1 = videos.iter().map(|v| v.f1).sum::<f64>() / n;
        let mean_kendall_tau = mean_of_defined(videos.iter().map(|v| v.kendall_tau));
        let mean_spearman_rho = mean_of_defined(videos.iter().map(|v| v.spearman_rho));
        let mean_map = (0..map_rhos.len())
            .map(|c| mean_of_defined(videos.iter().map(|v| v.map[c])))
            .collect();
        let rouge_rows: Vec<&RougeScores> =
            videos.iter().filter_map(|v| v.rouge.as_ref()).collect();
        let mean_rouge = (!rouge_rows.is_empty()).then(|| {
            let k = rouge_rows.len() as f64;
            RougeScores {
                rouge_1: rouge_rows.iter().map(|r| r.rouge_1).sum::<f64>() / k,
                rouge_2: rouge_rows.iter().map(|r| r.rouge_2).sum::<f64>() / k,
                rouge_l: rouge_rows.iter().map(|r| r.rouge_l).sum::<f64>() / k,
            }
        });
        let mean_cosine = mean_of_defined(videos.iter().map(|v| v.cosine));
        let undefined_rank_videos = videos
            .iter()
            .filter(|v| v.kendall_tau.is_none() || v.spearman_rho.is_none())
            .count();
        Ok(EvalReport {
            f1_aggregate,
            map_rhos,
            mean_f1,
            mean_kendall_tau,
            mean_spearman_rho,
            mean_map,
            mean_rouge,
            mean_cosine,
            undefined_rank_videos,
            videos,
        })
    }

    /// Per-video table for plotting; empty cells for undefined values.
    pub fn csv(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut header = vec![
            "video_id".to_string(),
            "f1".to_string(),
            "kendall_tau".to_string(),
            "spearman_rho".to_string(),
        ];
        for rho in &self.map_rhos {
            header.push(format!("map@{rho}"));
        }
        header.extend([
            "rouge_1".into(),
            "rouge_2".into(),
            "rouge_l".into(),
            "cosine".into(),
        ]);
        let mut out = header.join(",");
        out.push('\n');
        for v in &self.videos {
            let mut row = vec![
                v.video_id.clone(),
                format!("{:.6}", v.f1),
                fmt_opt(v.kendall_tau),
                fmt_opt(v.spearman_rho),
            ];
            for cell in &v.map {
                row.push(fmt_opt(*cell));
            }
            match &v.rouge {
                Some(r) => row.extend([
                    format!("{:.6}", r.rouge_1),
                    format!("{:.6}", r.rouge_2),
                    format!("{:.6}", r.rouge_l),
                ]),
                None => row.extend([String::new(), String::new(), String::new()]),
            }
            row.push(fmt_opt(v.cosine));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}
