//! Turning frame scores into a summary: exact 0/1 knapsack over shots under
//! a frame budget, or plain top-fraction frame selection, plus sentence
//! selection by thresholding.

use crate::dataset::VideoSample;
use crate::error::{HsumError, Result};
use crate::network::{forward, ModelParams, TrainMode};
use crate::segmentation::{frame_to_shot_scores, kts_segment, ShotBoundaries};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Threshold above which a sentence joins the text summary.
pub const SENTENCE_THRESHOLD: f64 = 0.5;

/// Default fraction of frames a knapsack summary may use.
pub const DEFAULT_BUDGET_RATIO: f64 = 0.15;

/// Default fraction of frames kept by top-k selection.
pub const DEFAULT_TOPK_FRACTION: f64 = 0.55;

/// How frame scores become a binary selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryMode {
    /// Shot-level selection under a frame budget.
    Knapsack,
    /// Top `budget_ratio` fraction of frames by score.
    Topk,
}

impl fmt::Display for SummaryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SummaryMode::Knapsack => write!(f, "knapsack"),
            SummaryMode::Topk => write!(f, "topk"),
        }
    }
}

/// A finished summary: binary masks plus the scores they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarySelection {
    pub mode: SummaryMode,
    pub budget_ratio: f64,
    /// Per-frame 0/1 selection, length `N`.
    pub selected_frames: Vec<u8>,
    /// Per-sentence 0/1 selection, length `M`.
    pub selected_sentences: Vec<u8>,
    /// Per-shot 0/1 selection (knapsack mode only).
    pub selected_shots: Option<Vec<u8>>,
    /// Shot start frames backing `selected_shots` (knapsack mode only).
    pub shot_boundaries: Option<Vec<usize>>,
    /// Raw frame scores the selection was computed from.
    pub frame_scores: Vec<f64>,
    /// Raw sentence scores.
    pub sentence_scores: Vec<f64>,
}

/// Exact 0/1 knapsack: maximize total score subject to total length within
/// `budget`. Among maximum-score selections the lexicographically smallest
/// index set wins, so earlier shots are preferred (and an empty selection
/// beats any zero-gain addition).
pub fn knapsack_select(
    shot_scores: &[f64],
    shot_lengths: &[usize],
    budget: usize,
) -> Result<Vec<u8>> {
    if shot_scores.len() != shot_lengths.len() {
        return Err(HsumError::DimensionMismatch {
            what: "knapsack scores vs lengths".into(),
            expected: shot_lengths.len(),
            got: shot_scores.len(),
        });
    }
    if let Some(pos) = shot_lengths.iter().position(|&l| l == 0) {
        return Err(HsumError::Range(format!(
            "shot {pos} has zero length; shot lengths must be positive"
        )));
    }
    if let Some(bad) = shot_scores.iter().find(|s| !s.is_finite()) {
        return Err(HsumError::Range(format!("non-finite shot score {bad}")));
    }
    let n = shot_scores.len();
    // dp[i][w]: best total score using shots i.. with capacity w. Suffix
    // orientation makes the greedy front-to-back reconstruction direct.
    let mut dp = vec![vec![0.0f64; budget + 1]; n + 1];
    for i in (0..n).rev() {
        for w in 0..=budget {
            let skip = dp[i + 1][w];
            let take = if shot_lengths[i] <= w {
                shot_scores[i] + dp[i + 1][w - shot_lengths[i]]
            } else {
                f64::NEG_INFINITY
            };
            dp[i][w] = skip.max(take);
        }
    }
    let mut selected = vec![0u8; n];
    let mut w = budget;
    for i in 0..n {
        if shot_lengths[i] > w {
            continue;
        }
        let take = shot_scores[i] + dp[i + 1][w - shot_lengths[i]];
        if take == dp[i][w] {
            // Taking shot i is optimal. The skip branch only produces a
            // lexicographically smaller selection when its optimum is the
            // empty suffix selection, i.e. worth exactly zero.
            if dp[i + 1][w] == dp[i][w] && dp[i + 1][w] == 0.0 {
                continue;
            }
            selected[i] = 1;
            w -= shot_lengths[i];
        }
    }
    Ok(selected)
}

/// Select exactly `floor(fraction * N)` frames with the highest scores,
/// earlier index winning ties.
pub fn topk_select(frame_scores: &[f64], fraction: f64) -> Result<Vec<u8>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(HsumError::Range(format!(
            "selection fraction must be in (0, 1], got {fraction}"
        )));
    }
    if let Some(bad) = frame_scores.iter().find(|s| !s.is_finite()) {
        return Err(HsumError::Range(format!("non-finite frame score {bad}")));
    }
    let n = frame_scores.len();
    let k = ((fraction * n as f64).floor() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        frame_scores[j]
            .partial_cmp(&frame_scores[i])
            .expect("finite scores")
            .then(i.cmp(&j))
    });
    let mut selected = vec![0u8; n];
    for &idx in order.iter().take(k) {
        selected[idx] = 1;
    }
    Ok(selected)
}

/// Build a summary from precomputed scores. Knapsack mode segments with the
/// sample's stored shot table when present (otherwise change-point detection
/// on the frame features), pools scores per shot, and selects shots under a
/// budget of `floor(budget_ratio * N)` frames. Topk mode treats
/// `budget_ratio` as the selection fraction. Sentences join the summary when
/// their score reaches [`SENTENCE_THRESHOLD`].
pub fn select_summary(
    frame_scores: &[f64],
    sentence_scores: &[f64],
    sample: &VideoSample,
    mode: SummaryMode,
    budget_ratio: f64,
) -> Result<SummarySelection> {
    let n = sample.n_frames();
    if frame_scores.len() != n {
        return Err(HsumError::DimensionMismatch {
            what: "summary frame scores".into(),
            expected: n,
            got: frame_scores.len(),
        });
    }
    if !(budget_ratio > 0.0 && budget_ratio <= 1.0) {
        return Err(HsumError::Range(format!(
            "budget ratio must be in (0, 1], got {budget_ratio}"
        )));
    }
    let selected_sentences: Vec<u8> = sentence_scores
        .iter()
        .map(|&s| u8::from(s >= SENTENCE_THRESHOLD))
        .collect();

    let (selected_frames, selected_shots, shot_boundaries) = match mode {
        SummaryMode::Topk => (topk_select(frame_scores, budget_ratio)?, None, None),
        SummaryMode::Knapsack => {
            let shots = match &sample.shot_boundaries {
                Some(points) => ShotBoundaries::new(points.clone(), n)?,
                None if n == 1 => ShotBoundaries::new(vec![0], 1)?,
                None => {
                    let features = Array2::from_shape_fn(
                        (n, sample.frame_features.ncols()),
                        |(i, j)| f64::from(sample.frame_features[[i, j]]),
                    );
                    // Cap auto-detected shots so each averages a few frames.
                    let max_cp = (n / 4).clamp(1, n - 1);
                    kts_segment(&features, max_cp, 1.0)?
                }
            };
            let shot_scores = frame_to_shot_scores(frame_scores, &shots)?;
            let lengths = shots.lengths();
            let budget = (budget_ratio * n as f64).floor() as usize;
            let picked = knapsack_select(&shot_scores, &lengths, budget)?;
            let mut frames = vec![0u8; n];
            for (shot, (start, end)) in shots.segments().iter().enumerate() {
                if picked[shot] == 1 {
                    for f in frames.iter_mut().take(*end).skip(*start) {
                        *f = 1;
                    }
                }
            }
            (frames, Some(picked), Some(shots.change_points().to_vec()))
        }
    };

    Ok(SummarySelection {
        mode,
        budget_ratio,
        selected_frames,
        selected_sentences,
        selected_shots,
        shot_boundaries,
        frame_scores: frame_scores.to_vec(),
        sentence_scores: sentence_scores.to_vec(),
    })
}

/// Run the encoder on a sample (child mode, subtitle-level text) and build
/// the summary from its scores.
pub fn summarize_video(
    params: &ModelParams,
    sample: &VideoSample,
    mode: SummaryMode,
    budget_ratio: f64,
) -> Result<SummarySelection> {
    let outputs = forward(params, sample, TrainMode::Child)?;
    select_summary(
        &outputs.frame_scores,
        &outputs.sentence_scores,
        sample,
        mode,
        budget_ratio,
    )
}
