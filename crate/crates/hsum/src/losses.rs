//! Training objectives: focal classification, replay-score regression, and
//! the two contrastive terms (cross-sample and within-sample with mined hard
//! negatives), plus the mode-dependent weighted total.
//!
//! Every loss exists in two forms: a tape-level builder used by the trainer
//! (so gradients flow through the whole graph) and a plain-value wrapper for
//! evaluation and tests. The wrappers run the same tape code.

use crate::error::{HsumError, Result};
use crate::network::{self, Dropout, TapedOutputs, TapedParams, TrainMode};
use crate::dataset::VideoSample;
use crate::tape::{Tape, Var};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Probability clamp applied before any logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

/// Weights and shape parameters of the combined objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the replay-score regression term.
    pub alpha_mse: f64,
    /// Weight of the cross-sample contrastive term.
    pub beta: f64,
    /// Weight of the within-sample contrastive term.
    pub lambda_intra: f64,
    /// Positive-class weight inside the focal loss.
    pub focal_alpha: f64,
    /// Focusing exponent of the focal loss.
    pub focal_gamma: f64,
    /// Softmax temperature shared by both contrastive terms.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_mse: 1.0,
            beta: 0.1,
            lambda_intra: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            temperature: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_mse", self.alpha_mse),
            ("beta", self.beta),
            ("lambda_intra", self.lambda_intra),
            ("focal_gamma", self.focal_gamma),
        ] {
            if !(v >= 0.0) {
                return Err(HsumError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(HsumError::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(HsumError::Config(format!(
                "focal_alpha must be inside (0, 1), got {}",
                self.focal_alpha
            )));
        }
        Ok(())
    }
}

/// Hard-negative mining knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    /// Minimum index distance from every positive for a negative to qualify.
    pub exclusion_window: usize,
    /// How many hard negatives to keep; `None` means "as many as positives".
    pub top_k: Option<usize>,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            exclusion_window: 2,
            top_k: None,
        }
    }
}

/// Index sets feeding the within-sample contrastive term.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContrastiveSampleSets {
    pub positive_frames: Vec<usize>,
    pub positive_sentences: Vec<usize>,
    pub hard_negative_frames: Vec<usize>,
    pub hard_negative_sentences: Vec<usize>,
}

/// One modality's mined indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MinedIndices {
    pub positives: Vec<usize>,
    pub hard_negatives: Vec<usize>,
}

/// Select hard negatives: wrongly-confident negatives far enough from every
/// positive. Candidates have label 0 and index distance strictly greater than
/// `exclusion_window` from all positives; the `top_k` highest-scoring
/// candidates are kept (earlier index wins ties).
pub fn mine_hard_negatives(
    scores: &[f64],
    labels: &[u8],
    exclusion_window: usize,
    top_k: usize,
) -> Result<MinedIndices> {
    if scores.len() != labels.len() {
        return Err(HsumError::DimensionMismatch {
            what: "hard-negative mining scores vs labels".into(),
            expected: labels.len(),
            got: scores.len(),
        });
    }
    let positives: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l == 1).then_some(i))
        .collect();
    let mut candidates: Vec<usize> = (0..labels.len())
        .filter(|&i| {
            labels[i] == 0
                && positives
                    .iter()
                    .all(|&p| p.abs_diff(i) > exclusion_window)
        })
        .collect();
    candidates.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be comparable")
            .then(a.cmp(&b))
    });
    candidates.truncate(top_k);
    candidates.sort_unstable();
    Ok(MinedIndices {
        positives,
        hard_negatives: candidates,
    })
}

impl ContrastiveSampleSets {
    /// Mine both modalities with the same config; `top_k` defaults to the
    /// modality's positive count.
    pub fn mine(
        frame_scores: &[f64],
        frame_labels: &[u8],
        sentence_scores: &[f64],
        sentence_labels: &[u8],
        config: &MiningConfig,
    ) -> Result<Self> {
        let k_frames = config.top_k.unwrap_or_else(|| {
            frame_labels.iter().filter(|&&l| l == 1).count()
        });
        let k_sentences = config.top_k.unwrap_or_else(|| {
            sentence_labels.iter().filter(|&&l| l == 1).count()
        });
        let frames =
            mine_hard_negatives(frame_scores, frame_labels, config.exclusion_window, k_frames)?;
        let sentences = mine_hard_negatives(
            sentence_scores,
            sentence_labels,
            config.exclusion_window,
            k_sentences,
        )?;
        Ok(ContrastiveSampleSets {
            positive_frames: frames.positives,
            positive_sentences: sentences.positives,
            hard_negative_frames: frames.hard_negatives,
            hard_negative_sentences: sentences.hard_negatives,
        })
    }
}

fn targets_column(tape: &Tape, y: &[u8]) -> Var {
    tape.input(Array2::from_shape_fn((y.len(), 1), |(i, _)| f64::from(y[i])))
}

fn column_input(tape: &Tape, values: &[f64]) -> Var {
    tape.input(Array2::from_shape_fn((values.len(), 1), |(i, _)| values[i]))
}

/// Focal loss on the tape. `p` is an `n x 1` column of probabilities.
pub fn focal_loss_on_tape(
    tape: &Tape,
    p: Var,
    y: &[u8],
    focal_alpha: f64,
    focal_gamma: f64,
) -> Result<Var> {
    let (n, cols) = tape.shape(p);
    if cols != 1 || n != y.len() {
        return Err(HsumError::DimensionMismatch {
            what: "focal loss predictions vs targets".into(),
            expected: y.len(),
            got: n * cols.max(1),
        });
    }
    let yv = targets_column(tape, y);
    let y_neg = tape.affine(yv, -1.0, 1.0);
    let pc = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let one_minus_p = tape.affine(pc, -1.0, 1.0);

    // y = 1: -alpha * (1-p)^gamma * ln(p)
    let pos = tape.mul_elem(
        yv,
        tape.mul_elem(tape.pow_const(one_minus_p, focal_gamma), tape.ln(pc)),
    );
    // y = 0: -(1-alpha) * p^gamma * ln(1-p)
    let neg = tape.mul_elem(
        y_neg,
        tape.mul_elem(tape.pow_const(pc, focal_gamma), tape.ln(one_minus_p)),
    );
    let combined = tape.add(
        tape.scale(pos, -focal_alpha),
        tape.scale(neg, -(1.0 - focal_alpha)),
    );
    Ok(tape.mean_all(combined))
}

/// Focal loss over plain values.
pub fn focal_loss(p: &[f64], y: &[u8], focal_alpha: f64, focal_gamma: f64) -> Result<f64> {
    let tape = Tape::new();
    let pv = column_input(&tape, p);
    let loss = focal_loss_on_tape(&tape, pv, y, focal_alpha, focal_gamma)?;
    Ok(tape.scalar(loss))
}

/// Mean squared error against replay scores, on the tape.
pub fn mse_loss_on_tape(tape: &Tape, pred: Var, target: &[f64]) -> Result<Var> {
    let (n, cols) = tape.shape(pred);
    if cols != 1 || n != target.len() {
        return Err(HsumError::DimensionMismatch {
            what: "replay regression predictions vs targets".into(),
            expected: target.len(),
            got: n * cols.max(1),
        });
    }
    let tv = column_input(tape, target);
    Ok(tape.mean_all(tape.pow_const(tape.sub(pred, tv), 2.0)))
}

/// Mean squared error over plain values.
pub fn mse_replay_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let pv = column_input(&tape, pred);
    let loss = mse_loss_on_tape(&tape, pv, target)?;
    Ok(tape.scalar(loss))
}

/// Cross-sample contrastive loss on the tape: symmetric cross-entropy over
/// the `B x B` cosine matrix of paired video/text embeddings. Rows are
/// defensively renormalized, so callers may pass unnormalized embeddings.
pub fn inter_contrastive_on_tape(
    tape: &Tape,
    cls_video: Var,
    cls_text: Var,
    temperature: f64,
) -> Result<Var> {
    let (b, d) = tape.shape(cls_video);
    if tape.shape(cls_text) != (b, d) {
        return Err(HsumError::Shape(format!(
            "cross-sample loss: video {:?} vs text {:?}",
            (b, d),
            tape.shape(cls_text)
        )));
    }
    let v = tape.l2_normalize_rows(cls_video, 1e-12);
    let t = tape.l2_normalize_rows(cls_text, 1e-12);
    let sims = tape.scale(tape.matmul_nt(v, t), 1.0 / temperature);

    let video_to_text = tape.mean_all(tape.sub(tape.logsumexp_rows(sims), tape.diag_part(sims)));
    let sims_t = tape.transpose(sims);
    let text_to_video =
        tape.mean_all(tape.sub(tape.logsumexp_rows(sims_t), tape.diag_part(sims_t)));
    Ok(tape.scale(tape.add(video_to_text, text_to_video), 0.5))
}

/// Cross-sample contrastive loss over plain `B x D` arrays.
pub fn inter_contrastive(
    cls_video: &Array2<f64>,
    cls_text: &Array2<f64>,
    temperature: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let v = tape.input(cls_video.clone());
    let t = tape.input(cls_text.clone());
    let loss = inter_contrastive_on_tape(&tape, v, t, temperature)?;
    Ok(tape.scalar(loss))
}

fn check_token_indices(sets: &ContrastiveSampleSets, n_frames: usize, n_text: usize) -> Result<()> {
    for (what, indices, bound) in [
        ("positive frames", &sets.positive_frames, n_frames),
        ("hard-negative frames", &sets.hard_negative_frames, n_frames),
        ("positive sentences", &sets.positive_sentences, n_text),
        ("hard-negative sentences", &sets.hard_negative_sentences, n_text),
    ] {
        if let Some(&bad) = indices.iter().find(|&&i| i >= bound) {
            return Err(HsumError::Range(format!(
                "{what}: index {bad} out of range {bound}"
            )));
        }
    }
    Ok(())
}

/// One direction of the within-sample term: each anchor against the pooled
/// opposite-modality positive and its own modality's hard negatives.
fn intra_direction(
    tape: &Tape,
    encoded: Var,
    anchor_rows: &[usize],
    pooled_rows: &[usize],
    negative_rows: &[usize],
    temperature: f64,
) -> Var {
    let anchors = tape.l2_normalize_rows(tape.gather_rows(encoded, anchor_rows), 1e-12);
    let pooled = tape.l2_normalize_rows(
        tape.mean_rows(tape.gather_rows(encoded, pooled_rows)),
        1e-12,
    );
    let pos_sims = tape.matmul_nt(anchors, pooled);
    let logits = if negative_rows.is_empty() {
        pos_sims
    } else {
        let negatives = tape.l2_normalize_rows(tape.gather_rows(encoded, negative_rows), 1e-12);
        let neg_sims = tape.matmul_nt(anchors, negatives);
        tape.concat_cols(&[pos_sims, neg_sims])
    };
    let scaled = tape.scale(logits, 1.0 / temperature);
    let per_anchor = tape.sub(tape.logsumexp_rows(scaled), tape.slice_cols(scaled, 0, 1));
    tape.mean_all(per_anchor)
}

/// Within-sample contrastive loss on the tape over one sample's encoded
/// tokens. Frame anchors pull toward the pooled positive sentences against
/// hard-negative frames, and symmetrically for sentence anchors; the two
/// terms add. Returns an exact zero when either positive set is empty.
pub fn intra_contrastive_on_tape(
    tape: &Tape,
    outputs: &TapedOutputs,
    sets: &ContrastiveSampleSets,
    temperature: f64,
) -> Result<Var> {
    let layout = outputs.layout;
    check_token_indices(sets, layout.n_frames, layout.n_text)?;
    if sets.positive_frames.is_empty() || sets.positive_sentences.is_empty() {
        return Ok(tape.scalar_input(0.0));
    }
    let frame_rows: Vec<usize> = sets.positive_frames.iter().map(|&i| layout.frame(i)).collect();
    let sent_rows: Vec<usize> = sets.positive_sentences.iter().map(|&j| layout.text(j)).collect();
    let hnf_rows: Vec<usize> = sets
        .hard_negative_frames
        .iter()
        .map(|&i| layout.frame(i))
        .collect();
    let hns_rows: Vec<usize> = sets
        .hard_negative_sentences
        .iter()
        .map(|&j| layout.text(j))
        .collect();

    let frame_term = intra_direction(
        tape,
        outputs.encoded,
        &frame_rows,
        &sent_rows,
        &hnf_rows,
        temperature,
    );
    let sentence_term = intra_direction(
        tape,
        outputs.encoded,
        &sent_rows,
        &frame_rows,
        &hns_rows,
        temperature,
    );
    Ok(tape.add(frame_term, sentence_term))
}

/// Within-sample contrastive loss over a plain token matrix laid out like an
/// encoder output (`2 + N + M` rows).
pub fn intra_contrastive(
    token_embeddings: &Array2<f64>,
    layout: crate::alignment::TokenLayout,
    sets: &ContrastiveSampleSets,
    temperature: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let encoded = tape.input(token_embeddings.clone());
    check_token_indices(sets, layout.n_frames, layout.n_text)?;
    if sets.positive_frames.is_empty() || sets.positive_sentences.is_empty() {
        return Ok(0.0);
    }
    let outputs_stub = TapedOutputs {
        layout,
        encoded,
        frame_scores: encoded,
        sentence_scores: encoded,
        replay_pred: encoded,
        cls_video: encoded,
        cls_text: encoded,
    };
    let loss = intra_contrastive_on_tape(&tape, &outputs_stub, sets, temperature)?;
    Ok(tape.scalar(loss))
}

/// Raw (unweighted) values of every loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls_video: f64,
    pub cls_text: f64,
    pub mse: f64,
    pub inter: f64,
    pub intra: f64,
}

/// Weighted total plus the raw terms, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mode: TrainMode,
    pub total: f64,
    pub parts: LossParts,
}

/// Combine precomputed terms into the mode's weighted total. Child mode uses
/// every term; parent mode keeps only video classification, regression and
/// the cross-sample term.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, mode: TrainMode) -> Result<LossBreakdown> {
    weights.validate()?;
    let total = match mode {
        TrainMode::Child => {
            parts.cls_video
                + parts.cls_text
                + weights.alpha_mse * parts.mse
                + weights.beta * parts.inter
                + weights.lambda_intra * parts.intra
        }
        TrainMode::Parent => {
            parts.cls_video + weights.alpha_mse * parts.mse + weights.beta * parts.inter
        }
    };
    Ok(LossBreakdown {
        mode,
        total,
        parts: *parts,
    })
}

/// Everything the trainer needs from one differentiable batch pass.
pub struct BatchLoss {
    /// Scalar node to backpropagate.
    pub total: Var,
    /// Raw term values (batch means), matching `total` under the weights.
    pub breakdown: LossBreakdown,
}

/// Build the full batch objective on one tape: a forward pass per sample,
/// per-sample supervised terms, one cross-sample term over the batch of
/// [CLS] pairs, and the weighted, mode-dependent sum of batch means.
///
/// Samples missing replay scores simply contribute no regression term;
/// child-mode samples missing sentence labels contribute no text
/// classification or within-sample term.
pub fn batch_loss_on_tape(
    tape: &Tape,
    taped: &TapedParams,
    samples: &[&VideoSample],
    mode: TrainMode,
    weights: &LossWeights,
    mining: &MiningConfig,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchLoss> {
    weights.validate()?;
    if samples.is_empty() {
        return Err(HsumError::Invariant("empty training batch".into()));
    }
    let b = samples.len() as f64;
    let dropout_p = taped.config.dropout;

    let mut cls_video_rows = Vec::with_capacity(samples.len());
    let mut cls_text_rows = Vec::with_capacity(samples.len());
    let mut cls_video_terms = Vec::new();
    let mut cls_text_terms = Vec::new();
    let mut mse_terms = Vec::new();
    let mut intra_terms = Vec::new();

    for sample in samples {
        let dropout = match &mut dropout_rng {
            Some(rng) if dropout_p > 0.0 => Some(Dropout { rng, p: dropout_p }),
            _ => None,
        };
        let out = network::forward_on_tape(tape, taped, sample, mode, dropout)?;
        cls_video_rows.push(out.cls_video);
        cls_text_rows.push(out.cls_text);

        let frame_targets = sample.frame_targets()?;
        cls_video_terms.push(focal_loss_on_tape(
            tape,
            out.frame_scores,
            &frame_targets,
            weights.focal_alpha,
            weights.focal_gamma,
        )?);

        if let Some(replay) = &sample.replay_scores {
            let targets: Vec<f64> = replay.iter().map(|&v| f64::from(v)).collect();
            mse_terms.push(mse_loss_on_tape(tape, out.replay_pred, &targets)?);
        }

        if mode == TrainMode::Child {
            if let Some(sentence_labels) = &sample.sentence_labels {
                cls_text_terms.push(focal_loss_on_tape(
                    tape,
                    out.sentence_scores,
                    sentence_labels,
                    weights.focal_alpha,
                    weights.focal_gamma,
                )?);
                let frame_scores = tape.value(out.frame_scores).column(0).to_vec();
                let sentence_scores = tape.value(out.sentence_scores).column(0).to_vec();
                let sets = ContrastiveSampleSets::mine(
                    &frame_scores,
                    &frame_targets,
                    &sentence_scores,
                    sentence_labels,
                    mining,
                )?;
                intra_terms.push(intra_contrastive_on_tape(
                    tape,
                    &out,
                    &sets,
                    weights.temperature,
                )?);
            }
        }
    }

    let mean_of = |tape: &Tape, terms: &[Var], denom: f64| -> Var {
        match terms {
            [] => tape.scalar_input(0.0),
            _ => tape.scale(
                terms[1..]
                    .iter()
                    .fold(terms[0], |acc, &t| tape.add(acc, t)),
                1.0 / denom,
            ),
        }
    };

    let cls_video_term = mean_of(tape, &cls_video_terms, b);
    let cls_text_term = mean_of(tape, &cls_text_terms, cls_text_terms.len().max(1) as f64);
    let mse_term = mean_of(tape, &mse_terms, mse_terms.len().max(1) as f64);
    let intra_term = mean_of(tape, &intra_terms, intra_terms.len().max(1) as f64);

    let cls_video_mat = tape.concat_rows(&cls_video_rows);
    let cls_text_mat = tape.concat_rows(&cls_text_rows);
    let inter_term =
        inter_contrastive_on_tape(tape, cls_video_mat, cls_text_mat, weights.temperature)?;

    let total = match mode {
        TrainMode::Child => {
            let a = tape.add(cls_video_term, cls_text_term);
            let bsum = tape.add(a, tape.scale(mse_term, weights.alpha_mse));
            let c = tape.add(bsum, tape.scale(inter_term, weights.beta));
            tape.add(c, tape.scale(intra_term, weights.lambda_intra))
        }
        TrainMode::Parent => {
            let a = tape.add(cls_video_term, tape.scale(mse_term, weights.alpha_mse));
            tape.add(a, tape.scale(inter_term, weights.beta))
        }
    };

    let parts = LossParts {
        cls_video: tape.scalar(cls_video_term),
        cls_text: tape.scalar(cls_text_term),
        mse: tape.scalar(mse_term),
        inter: tape.scalar(inter_term),
        intra: tape.scalar(intra_term),
    };
    Ok(BatchLoss {
        total,
        breakdown: total_loss(&parts, weights, mode)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::TokenLayout;
    use crate::network::{init_params, ModelConfig};
    use ndarray::{array, Array1};
    use rand::{RngExt, SeedableRng};

    #[test]
    fn focal_perfect_predictions_vanish() {
        assert!(focal_loss(&[1.0 - 1e-7], &[1], 0.25, 2.0).unwrap() <= 1e-12);
        assert!(focal_loss(&[1e-7], &[0], 0.25, 2.0).unwrap() <= 1e-12);
    }

    #[test]
    fn focal_half_probability_positive() {
        // -0.25 * (0.5)^2 * ln(0.5) = 0.25 * 0.25 * 0.693147.. = 0.0433216..
        let loss = focal_loss(&[0.5], &[1], 0.25, 2.0).unwrap();
        assert!((loss - 0.043321698784).abs() < 1e-9, "got {loss}");
    }

    #[test]
    fn focal_reduces_to_scaled_bce() {
        // gamma = 0, alpha = 0.5 halves the plain cross-entropy.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..20).map(|_| rng.random_range(0.05..0.95)).collect();
        let y: Vec<u8> = (0..20).map(|_| u8::from(rng.random::<bool>())).collect();
        let focal = focal_loss(&p, &y, 0.5, 0.0).unwrap();
        let bce = p
            .iter()
            .zip(&y)
            .map(|(&pi, &yi)| {
                if yi == 1 {
                    -pi.ln()
                } else {
                    -(1.0 - pi).ln()
                }
            })
            .sum::<f64>()
            / p.len() as f64;
        assert!((focal - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_rejects_length_mismatch() {
        assert!(focal_loss(&[0.5, 0.5], &[1], 0.25, 2.0).is_err());
    }

    #[test]
    fn mse_scalar_cases() {
        assert_eq!(mse_replay_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(mse_replay_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mse_replay_loss(&[0.5], &[0.0]).unwrap(), 0.25);
        assert!(mse_replay_loss(&[0.5], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn inter_single_pair_is_zero() {
        let v = array![[1.0, 0.0]];
        let t = array![[0.0, 1.0]];
        assert!(inter_contrastive(&v, &t, 0.07).unwrap().abs() < 1e-12);
    }

    #[test]
    fn inter_identical_embeddings_uniform_softmax() {
        let v = array![[1.0, 0.0], [1.0, 0.0]];
        let loss = inter_contrastive(&v, &v.clone(), 0.07).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn inter_separated_pairs_vanish_at_low_temperature() {
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let loss = inter_contrastive(&v, &t, 0.01).unwrap();
        assert!(loss < 1e-12, "got {loss}");
    }

    #[test]
    fn inter_renormalizes_scaled_rows() {
        let v = array![[0.3, 0.4], [-0.5, 0.1]];
        let t = array![[0.2, -0.9], [0.8, 0.7]];
        let loss_raw = inter_contrastive(&v, &t, 0.07).unwrap();
        let loss_scaled = inter_contrastive(&(&v * 3.0), &(&t * 0.1), 0.07).unwrap();
        assert!((loss_raw - loss_scaled).abs() < 1e-12);
    }

    #[test]
    fn inter_invariant_under_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 6;
        let v = Array2::from_shape_fn((4, d), |_| rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((4, d), |_| rng.random_range(-1.0..1.0));

        // Random orthogonal matrix via Gram-Schmidt.
        let mut q = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            let mut col: Array1<f64> =
                Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
            for j in 0..i {
                let proj = col.dot(&q.row(j));
                col = &col - &(&q.row(j) * proj);
            }
            let norm = col.dot(&col).sqrt();
            q.row_mut(i).assign(&(&col / norm));
        }

        let base = inter_contrastive(&v, &t, 0.07).unwrap();
        let rotated = inter_contrastive(&v.dot(&q), &t.dot(&q), 0.07).unwrap();
        assert!((base - rotated).abs() < 1e-6);
    }

    #[test]
    fn mining_hand_example() {
        let mined = mine_hard_negatives(&[0.9, 0.8, 0.1, 0.7, 0.2], &[1, 0, 0, 0, 0], 1, 1).unwrap();
        assert_eq!(mined.positives, vec![0]);
        assert_eq!(mined.hard_negatives, vec![3]);
    }

    #[test]
    fn mining_degenerate_cases() {
        let all_pos = mine_hard_negatives(&[0.1, 0.2], &[1, 1], 1, 2).unwrap();
        assert!(all_pos.hard_negatives.is_empty());

        let wide_window = mine_hard_negatives(&[0.9, 0.8, 0.7], &[1, 0, 0], 5, 2).unwrap();
        assert!(wide_window.hard_negatives.is_empty());

        let no_pos = mine_hard_negatives(&[0.9, 0.8], &[0, 0], 2, 1).unwrap();
        assert_eq!(no_pos.hard_negatives, vec![0]);
    }

    #[test]
    fn mining_invariant_to_score_shift() {
        let scores = [0.3, 0.9, 0.2, 0.8, 0.1, 0.6];
        let labels = [0, 1, 0, 0, 0, 0];
        let shifted: Vec<f64> = scores.iter().map(|s| s + 17.5).collect();
        let a = mine_hard_negatives(&scores, &labels, 1, 2).unwrap();
        let b = mine_hard_negatives(&shifted, &labels, 1, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mining_tie_prefers_earlier_index() {
        let mined = mine_hard_negatives(&[0.5, 0.4, 0.4, 0.4], &[0, 0, 0, 0], 0, 2).unwrap();
        assert_eq!(mined.hard_negatives, vec![0, 1]);
    }

    fn token_matrix(rows: &[[f64; 4]]) -> Array2<f64> {
        Array2::from_shape_fn((rows.len(), 4), |(i, j)| rows[i][j])
    }

    #[test]
    fn intra_empty_sets_are_zero() {
        // Layout: N=2, M=1 -> 5 tokens.
        let layout = TokenLayout::new(2, 1);
        let tokens = token_matrix(&[
            [0.1, 0.2, 0.3, 0.4]; 5
        ]);
        let empty = ContrastiveSampleSets::default();
        assert_eq!(intra_contrastive(&tokens, layout, &empty, 0.07).unwrap(), 0.0);

        let no_sentences = ContrastiveSampleSets {
            positive_frames: vec![0],
            ..Default::default()
        };
        assert_eq!(
            intra_contrastive(&tokens, layout, &no_sentences, 0.07).unwrap(),
            0.0
        );
    }

    #[test]
    fn intra_singleton_softmax_is_zero() {
        let layout = TokenLayout::new(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tokens = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let sets = ContrastiveSampleSets {
            positive_frames: vec![0],
            positive_sentences: vec![0],
            hard_negative_frames: vec![],
            hard_negative_sentences: vec![],
        };
        let loss = intra_contrastive(&tokens, layout, &sets, 0.07).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn intra_orthogonal_negative_scalar_case() {
        // Anchor frame equals the positive sentence; one orthogonal negative
        // frame; tau = 1. Both directions give ln(1 + e^-1)... the frame
        // direction: positive sim 1, negative sim 0 -> ln(e + 1) - 1.
        // The sentence direction has no hard negatives -> 0.
        let layout = TokenLayout::new(2, 1);
        // rows: [CLSV, f0, f1, CLST, s0]
        let tokens = token_matrix(&[
            [9.0, 9.0, 9.0, 9.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [9.0, 9.0, 9.0, 9.0],
            [1.0, 0.0, 0.0, 0.0],
        ]);
        let sets = ContrastiveSampleSets {
            positive_frames: vec![0],
            positive_sentences: vec![0],
            hard_negative_frames: vec![1],
            hard_negative_sentences: vec![],
        };
        let loss = intra_contrastive(&tokens, layout, &sets, 1.0).unwrap();
        let expected = ((1f64.exp() + 1.0).ln() - 1.0) + 0.0;
        assert!((loss - expected).abs() < 1e-12, "got {loss} want {expected}");
        assert!((expected - 0.3132616875).abs() < 1e-9);
    }

    #[test]
    fn intra_rejects_out_of_range_indices() {
        let layout = TokenLayout::new(2, 1);
        let tokens = Array2::zeros((5, 4));
        let sets = ContrastiveSampleSets {
            positive_frames: vec![2],
            positive_sentences: vec![0],
            ..Default::default()
        };
        assert!(intra_contrastive(&tokens, layout, &sets, 0.07).is_err());
    }

    #[test]
    fn total_weighting_arithmetic() {
        let parts = LossParts {
            cls_video: 0.6,
            cls_text: 0.4,
            mse: 0.2,
            inter: 0.3,
            intra: 0.4,
        };
        let weights = LossWeights {
            alpha_mse: 1.0,
            beta: 0.1,
            lambda_intra: 1.0,
            ..LossWeights::default()
        };
        let child = total_loss(&parts, &weights, TrainMode::Child).unwrap();
        assert!((child.total - 1.63).abs() < 1e-12);

        let parent = total_loss(&parts, &weights, TrainMode::Parent).unwrap();
        assert!((parent.total - (0.6 + 0.2 + 0.03)).abs() < 1e-12);
    }

    #[test]
    fn total_ignores_text_term_in_parent_mode() {
        let weights = LossWeights::default();
        let mut parts = LossParts {
            cls_video: 1.0,
            cls_text: 0.0,
            mse: 0.1,
            inter: 0.2,
            intra: 0.3,
        };
        let base = total_loss(&parts, &weights, TrainMode::Parent).unwrap();
        parts.cls_text = 5.0;
        parts.intra = 7.0;
        let bumped = total_loss(&parts, &weights, TrainMode::Parent).unwrap();
        assert_eq!(base.total, bumped.total);
    }

    #[test]
    fn total_zero_weights_leave_classification() {
        let parts = LossParts {
            cls_video: 0.7,
            cls_text: 0.2,
            mse: 9.0,
            inter: 9.0,
            intra: 9.0,
        };
        let weights = LossWeights {
            alpha_mse: 0.0,
            beta: 0.0,
            lambda_intra: 0.0,
            ..LossWeights::default()
        };
        let child = total_loss(&parts, &weights, TrainMode::Child).unwrap();
        assert!((child.total - 0.9).abs() < 1e-12);
    }

    #[test]
    fn total_rejects_negative_weights() {
        let weights = LossWeights {
            beta: -0.1,
            ..LossWeights::default()
        };
        assert!(total_loss(&LossParts::default(), &weights, TrainMode::Child).is_err());
    }

    /// Finite-difference check of one loss built on top of a raw input.
    fn gradcheck_loss(x0: &Array2<f64>, build: impl Fn(&Tape, Var) -> Var) {
        let tape = Tape::new();
        let x = tape.input(x0.clone());
        let loss = build(&tape, x);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(x, x0.dim());
        let h = 1e-6;
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let eval = |delta: f64| {
                    let mut xp = x0.clone();
                    xp[[i, j]] += delta;
                    let t = Tape::new();
                    let v = t.input(xp);
                    t.scalar(build(&t, v))
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[[i, j]];
                let denom = a.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "({i}, {j}): analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn grad_focal_through_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Array2::from_shape_fn((7, 1), |_| rng.random_range(-2.0..2.0));
        let y: Vec<u8> = (0..7).map(|i| u8::from(i % 2 == 0)).collect();
        gradcheck_loss(&x0, move |tape, x| {
            let p = tape.sigmoid(x);
            focal_loss_on_tape(tape, p, &y, 0.25, 2.0).unwrap()
        });
    }

    #[test]
    fn grad_mse_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Array2::from_shape_fn((6, 1), |_| rng.random_range(0.0..1.0));
        let target: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        gradcheck_loss(&x0, move |tape, x| {
            mse_loss_on_tape(tape, x, &target).unwrap()
        });
    }

    #[test]
    fn grad_inter_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v0 = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
        let t0 = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
        let t_fixed = t0.clone();
        gradcheck_loss(&v0, move |tape, v| {
            let t = tape.input(t_fixed.clone());
            inter_contrastive_on_tape(tape, v, t, 0.2).unwrap()
        });
        let v_fixed = v0;
        gradcheck_loss(&t0, move |tape, t| {
            let v = tape.input(v_fixed.clone());
            inter_contrastive_on_tape(tape, v, t, 0.2).unwrap()
        });
    }

    #[test]
    fn grad_intra_over_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layout = TokenLayout::new(4, 2);
        let x0 = Array2::from_shape_fn((layout.total(), 6), |_| rng.random_range(-1.0..1.0));
        let sets = ContrastiveSampleSets {
            positive_frames: vec![0, 2],
            positive_sentences: vec![1],
            hard_negative_frames: vec![3],
            hard_negative_sentences: vec![0],
        };
        gradcheck_loss(&x0, move |tape, x| {
            let outputs = TapedOutputs {
                layout,
                encoded: x,
                frame_scores: x,
                sentence_scores: x,
                replay_pred: x,
                cls_video: x,
                cls_text: x,
            };
            intra_contrastive_on_tape(tape, &outputs, &sets, 0.2).unwrap()
        });
    }

    #[test]
    fn batch_loss_matches_total_arithmetic() {
        let config = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 24,
            dropout: 0.0,
            d_v: 8,
            d_t: 6,
            max_frames: 16,
            max_text: 8,
        };
        let params = init_params(&config, 11).unwrap();
        let s1 = crate::network::tests::toy_sample(20, 9, 3, config.d_v, config.d_t);
        let s2 = crate::network::tests::toy_sample(21, 12, 4, config.d_v, config.d_t);
        let weights = LossWeights::default();

        let tape = Tape::new();
        let taped = TapedParams::stage(&tape, &params);
        let batch = batch_loss_on_tape(
            &tape,
            &taped,
            &[&s1, &s2],
            TrainMode::Child,
            &weights,
            &MiningConfig::default(),
            None,
        )
        .unwrap();
        let recomputed = total_loss(&batch.breakdown.parts, &weights, TrainMode::Child).unwrap();
        assert!((tape.scalar(batch.total) - recomputed.total).abs() < 1e-12);
        assert!(batch.breakdown.total > 0.0);

        // Backward must run cleanly over the whole graph.
        assert!(tape.backward(batch.total).is_ok());
    }

    #[test]
    fn parent_batch_ignores_sentence_supervision() {
        let config = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 24,
            dropout: 0.0,
            d_v: 8,
            d_t: 6,
            max_frames: 16,
            max_text: 8,
        };
        let params = init_params(&config, 12).unwrap();
        let sample = crate::network::tests::toy_sample(22, 8, 2, config.d_v, config.d_t);
        let weights = LossWeights::default();

        let tape = Tape::new();
        let taped = TapedParams::stage(&tape, &params);
        let batch = batch_loss_on_tape(
            &tape,
            &taped,
            &[&sample],
            TrainMode::Parent,
            &weights,
            &MiningConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(batch.breakdown.parts.cls_text, 0.0);
        assert_eq!(batch.breakdown.parts.intra, 0.0);

        // The sentence head gets no gradient from a parent step.
        let grads = tape.backward(batch.total).unwrap();
        let head_var = taped
            .leaves()
            .iter()
            .find(|(name, _)| name == "head_sentence_w")
            .unwrap()
            .1;
        assert!(grads.try_get(head_var).is_none());
    }
}
