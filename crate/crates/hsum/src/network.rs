//! The shared scoring model: modality projections, an alignment-masked
//! pre-norm transformer encoder, and three sigmoid heads.
//!
//! The same parameter set serves both training modes. Child mode fuses frames
//! with the per-subtitle features; parent mode replaces the text side with the
//! single global-description token spanning the whole video. The forward pass
//! is built on the autodiff [`Tape`](crate::tape::Tape) so the trainer can
//! differentiate straight through it; evaluation extracts plain values from
//! the same graph construction.

use crate::alignment::{self, AlignmentMask, FusedSequence, TokenLayout};
use crate::dataset::VideoSample;
use crate::error::{HsumError, Result};
use crate::tape::{Tape, Var};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Which text side the fused sequence carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Subtitle-level text tokens, one per subtitle.
    Child,
    /// One global-description token spanning every frame.
    Parent,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::Child => write!(f, "child"),
            TrainMode::Parent => write!(f, "parent"),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Common embedding width D.
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of the position-wise feed-forward blocks.
    pub ffn_dim: usize,
    /// Dropout probability on the residual branches during training.
    pub dropout: f64,
    /// Input frame feature dimension.
    pub d_v: usize,
    /// Input text feature dimension.
    pub d_t: usize,
    /// Largest frame count the position table accommodates.
    pub max_frames: usize,
    /// Largest text token count the position/segment tables accommodate.
    pub max_text: usize,
}

impl ModelConfig {
    /// Defaults for a given input feature geometry.
    pub fn new(d_v: usize, d_t: usize) -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 512,
            dropout: 0.1,
            d_v,
            d_t,
            max_frames: 512,
            max_text: 128,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Longest fused sequence this config supports.
    pub fn max_tokens(&self) -> usize {
        2 + self.max_frames + self.max_text
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("max_frames", self.max_frames),
            ("max_text", self.max_text),
        ] {
            if v == 0 {
                return Err(HsumError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(HsumError::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HsumError::Config(format!(
                "dropout {} must be in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// One encoder layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Array2<f64>,
    pub ln1_beta: Array2<f64>,
    pub attn_q_w: Array2<f64>,
    pub attn_q_b: Array2<f64>,
    pub attn_k_w: Array2<f64>,
    pub attn_k_b: Array2<f64>,
    pub attn_v_w: Array2<f64>,
    pub attn_v_b: Array2<f64>,
    pub attn_out_w: Array2<f64>,
    pub attn_out_b: Array2<f64>,
    pub ln2_gamma: Array2<f64>,
    pub ln2_beta: Array2<f64>,
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array2<f64>,
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array2<f64>,
}

/// All trainable arrays, with a stable named iteration order used by the
/// optimizer and the checkpoint format.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub proj_video_w: Array2<f64>,
    pub proj_video_b: Array2<f64>,
    pub proj_text_w: Array2<f64>,
    pub proj_text_b: Array2<f64>,
    pub cls_video: Array2<f64>,
    pub cls_text: Array2<f64>,
    /// Sequence-position table, `(2 + max_frames + max_text) x D`.
    pub pos_embed: Array2<f64>,
    /// Segment table, `(1 + max_text) x D`; row 0 marks "no segment".
    pub seg_embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_ln_gamma: Array2<f64>,
    pub final_ln_beta: Array2<f64>,
    pub head_frame_w: Array2<f64>,
    pub head_frame_b: Array2<f64>,
    pub head_sentence_w: Array2<f64>,
    pub head_sentence_b: Array2<f64>,
    pub head_replay_w: Array2<f64>,
    pub head_replay_b: Array2<f64>,
}

impl ModelParams {
    /// Visit every parameter array in the canonical order. `visit_mut` and
    /// `TapedParams::stage` must list parameters in exactly this order; a
    /// unit test keeps the three in sync.
    pub fn visit(&self, mut f: impl FnMut(&str, &Array2<f64>)) {
        f("proj_video_w", &self.proj_video_w);
        f("proj_video_b", &self.proj_video_b);
        f("proj_text_w", &self.proj_text_w);
        f("proj_text_b", &self.proj_text_b);
        f("cls_video", &self.cls_video);
        f("cls_text", &self.cls_text);
        f("pos_embed", &self.pos_embed);
        f("seg_embed", &self.seg_embed);
        for (i, layer) in self.layers.iter().enumerate() {
            f(&format!("layer{i}.ln1_gamma"), &layer.ln1_gamma);
            f(&format!("layer{i}.ln1_beta"), &layer.ln1_beta);
            f(&format!("layer{i}.attn_q_w"), &layer.attn_q_w);
            f(&format!("layer{i}.attn_q_b"), &layer.attn_q_b);
            f(&format!("layer{i}.attn_k_w"), &layer.attn_k_w);
            f(&format!("layer{i}.attn_k_b"), &layer.attn_k_b);
            f(&format!("layer{i}.attn_v_w"), &layer.attn_v_w);
            f(&format!("layer{i}.attn_v_b"), &layer.attn_v_b);
            f(&format!("layer{i}.attn_out_w"), &layer.attn_out_w);
            f(&format!("layer{i}.attn_out_b"), &layer.attn_out_b);
            f(&format!("layer{i}.ln2_gamma"), &layer.ln2_gamma);
            f(&format!("layer{i}.ln2_beta"), &layer.ln2_beta);
            f(&format!("layer{i}.ffn_w1"), &layer.ffn_w1);
            f(&format!("layer{i}.ffn_b1"), &layer.ffn_b1);
            f(&format!("layer{i}.ffn_w2"), &layer.ffn_w2);
            f(&format!("layer{i}.ffn_b2"), &layer.ffn_b2);
        }
        f("final_ln_gamma", &self.final_ln_gamma);
        f("final_ln_beta", &self.final_ln_beta);
        f("head_frame_w", &self.head_frame_w);
        f("head_frame_b", &self.head_frame_b);
        f("head_sentence_w", &self.head_sentence_w);
        f("head_sentence_b", &self.head_sentence_b);
        f("head_replay_w", &self.head_replay_w);
        f("head_replay_b", &self.head_replay_b);
    }

    /// Mutable visit, same order as [`ModelParams::visit`].
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<f64>)) {
        f("proj_video_w", &mut self.proj_video_w);
        f("proj_video_b", &mut self.proj_video_b);
        f("proj_text_w", &mut self.proj_text_w);
        f("proj_text_b", &mut self.proj_text_b);
        f("cls_video", &mut self.cls_video);
        f("cls_text", &mut self.cls_text);
        f("pos_embed", &mut self.pos_embed);
        f("seg_embed", &mut self.seg_embed);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.ln1_gamma"), &mut layer.ln1_gamma);
            f(&format!("layer{i}.ln1_beta"), &mut layer.ln1_beta);
            f(&format!("layer{i}.attn_q_w"), &mut layer.attn_q_w);
            f(&format!("layer{i}.attn_q_b"), &mut layer.attn_q_b);
            f(&format!("layer{i}.attn_k_w"), &mut layer.attn_k_w);
            f(&format!("layer{i}.attn_k_b"), &mut layer.attn_k_b);
            f(&format!("layer{i}.attn_v_w"), &mut layer.attn_v_w);
            f(&format!("layer{i}.attn_v_b"), &mut layer.attn_v_b);
            f(&format!("layer{i}.attn_out_w"), &mut layer.attn_out_w);
            f(&format!("layer{i}.attn_out_b"), &mut layer.attn_out_b);
            f(&format!("layer{i}.ln2_gamma"), &mut layer.ln2_gamma);
            f(&format!("layer{i}.ln2_beta"), &mut layer.ln2_beta);
            f(&format!("layer{i}.ffn_w1"), &mut layer.ffn_w1);
            f(&format!("layer{i}.ffn_b1"), &mut layer.ffn_b1);
            f(&format!("layer{i}.ffn_w2"), &mut layer.ffn_w2);
            f(&format!("layer{i}.ffn_b2"), &mut layer.ffn_b2);
        }
        f("final_ln_gamma", &mut self.final_ln_gamma);
        f("final_ln_beta", &mut self.final_ln_beta);
        f("head_frame_w", &mut self.head_frame_w);
        f("head_frame_b", &mut self.head_frame_b);
        f("head_sentence_w", &mut self.head_sentence_w);
        f("head_sentence_b", &mut self.head_sentence_b);
        f("head_replay_w", &mut self.head_replay_w);
        f("head_replay_b", &mut self.head_replay_b);
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(|_, a| n += a.len());
        n
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, sigma).unwrap();
    Array2::from_shape_fn((rows, cols), |_| loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * sigma {
            break v;
        }
    })
}

/// Deterministically initialize parameters: truncated normal (sigma 0.02) for
/// weights and embeddings, zeros for biases, ones/zeros for layer norms.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let sigma = 0.02;
    let mut tn = |r, c| truncated_normal(&mut rng, r, c, sigma);

    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerParams {
            ln1_gamma: Array2::ones((1, d)),
            ln1_beta: Array2::zeros((1, d)),
            attn_q_w: tn(d, d),
            attn_q_b: Array2::zeros((1, d)),
            attn_k_w: tn(d, d),
            attn_k_b: Array2::zeros((1, d)),
            attn_v_w: tn(d, d),
            attn_v_b: Array2::zeros((1, d)),
            attn_out_w: tn(d, d),
            attn_out_b: Array2::zeros((1, d)),
            ln2_gamma: Array2::ones((1, d)),
            ln2_beta: Array2::zeros((1, d)),
            ffn_w1: tn(d, config.ffn_dim),
            ffn_b1: Array2::zeros((1, config.ffn_dim)),
            ffn_w2: tn(config.ffn_dim, d),
            ffn_b2: Array2::zeros((1, d)),
        });
    }

    Ok(ModelParams {
        proj_video_w: tn(config.d_v, d),
        proj_video_b: Array2::zeros((1, d)),
        proj_text_w: tn(config.d_t, d),
        proj_text_b: Array2::zeros((1, d)),
        cls_video: tn(1, d),
        cls_text: tn(1, d),
        pos_embed: tn(config.max_tokens(), d),
        seg_embed: tn(1 + config.max_text, d),
        layers,
        final_ln_gamma: Array2::ones((1, d)),
        final_ln_beta: Array2::zeros((1, d)),
        head_frame_w: tn(d, 1),
        head_frame_b: Array2::zeros((1, 1)),
        head_sentence_w: tn(d, 1),
        head_sentence_b: Array2::zeros((1, 1)),
        head_replay_w: tn(d, 1),
        head_replay_b: Array2::zeros((1, 1)),
        config: config.clone(),
    })
}

/// Tape handles for every parameter, staged once per tape so several forward
/// passes (a whole batch) share the same leaves.
pub struct TapedParams {
    pub config: ModelConfig,
    leaves: Vec<(String, Var)>,
    vars: TapedVars,
}

struct TapedLayerVars {
    ln1_gamma: Var,
    ln1_beta: Var,
    attn_q_w: Var,
    attn_q_b: Var,
    attn_k_w: Var,
    attn_k_b: Var,
    attn_v_w: Var,
    attn_v_b: Var,
    attn_out_w: Var,
    attn_out_b: Var,
    ln2_gamma: Var,
    ln2_beta: Var,
    ffn_w1: Var,
    ffn_b1: Var,
    ffn_w2: Var,
    ffn_b2: Var,
}

struct TapedVars {
    proj_video_w: Var,
    proj_video_b: Var,
    proj_text_w: Var,
    proj_text_b: Var,
    cls_video: Var,
    cls_text: Var,
    pos_embed: Var,
    seg_embed: Var,
    layers: Vec<TapedLayerVars>,
    final_ln_gamma: Var,
    final_ln_beta: Var,
    head_frame_w: Var,
    head_frame_b: Var,
    head_sentence_w: Var,
    head_sentence_b: Var,
    head_replay_w: Var,
    head_replay_b: Var,
}

impl TapedParams {
    /// Put every parameter on the tape as a leaf, in canonical order.
    pub fn stage(tape: &Tape, params: &ModelParams) -> Self {
        let mut leaves = Vec::new();
        let mut stage_one = |name: &str, value: &Array2<f64>| -> Var {
            let var = tape.input(value.clone());
            leaves.push((name.to_string(), var));
            var
        };

        let proj_video_w = stage_one("proj_video_w", &params.proj_video_w);
        let proj_video_b = stage_one("proj_video_b", &params.proj_video_b);
        let proj_text_w = stage_one("proj_text_w", &params.proj_text_w);
        let proj_text_b = stage_one("proj_text_b", &params.proj_text_b);
        let cls_video = stage_one("cls_video", &params.cls_video);
        let cls_text = stage_one("cls_text", &params.cls_text);
        let pos_embed = stage_one("pos_embed", &params.pos_embed);
        let seg_embed = stage_one("seg_embed", &params.seg_embed);
        let mut layers = Vec::with_capacity(params.layers.len());
        for (i, layer) in params.layers.iter().enumerate() {
            layers.push(TapedLayerVars {
                ln1_gamma: stage_one(&format!("layer{i}.ln1_gamma"), &layer.ln1_gamma),
                ln1_beta: stage_one(&format!("layer{i}.ln1_beta"), &layer.ln1_beta),
                attn_q_w: stage_one(&format!("layer{i}.attn_q_w"), &layer.attn_q_w),
                attn_q_b: stage_one(&format!("layer{i}.attn_q_b"), &layer.attn_q_b),
                attn_k_w: stage_one(&format!("layer{i}.attn_k_w"), &layer.attn_k_w),
                attn_k_b: stage_one(&format!("layer{i}.attn_k_b"), &layer.attn_k_b),
                attn_v_w: stage_one(&format!("layer{i}.attn_v_w"), &layer.attn_v_w),
                attn_v_b: stage_one(&format!("layer{i}.attn_v_b"), &layer.attn_v_b),
                attn_out_w: stage_one(&format!("layer{i}.attn_out_w"), &layer.attn_out_w),
                attn_out_b: stage_one(&format!("layer{i}.attn_out_b"), &layer.attn_out_b),
                ln2_gamma: stage_one(&format!("layer{i}.ln2_gamma"), &layer.ln2_gamma),
                ln2_beta: stage_one(&format!("layer{i}.ln2_beta"), &layer.ln2_beta),
                ffn_w1: stage_one(&format!("layer{i}.ffn_w1"), &layer.ffn_w1),
                ffn_b1: stage_one(&format!("layer{i}.ffn_b1"), &layer.ffn_b1),
                ffn_w2: stage_one(&format!("layer{i}.ffn_w2"), &layer.ffn_w2),
                ffn_b2: stage_one(&format!("layer{i}.ffn_b2"), &layer.ffn_b2),
            });
        }
        let final_ln_gamma = stage_one("final_ln_gamma", &params.final_ln_gamma);
        let final_ln_beta = stage_one("final_ln_beta", &params.final_ln_beta);
        let head_frame_w = stage_one("head_frame_w", &params.head_frame_w);
        let head_frame_b = stage_one("head_frame_b", &params.head_frame_b);
        let head_sentence_w = stage_one("head_sentence_w", &params.head_sentence_w);
        let head_sentence_b = stage_one("head_sentence_b", &params.head_sentence_b);
        let head_replay_w = stage_one("head_replay_w", &params.head_replay_w);
        let head_replay_b = stage_one("head_replay_b", &params.head_replay_b);

        TapedParams {
            config: params.config.clone(),
            leaves,
            vars: TapedVars {
                proj_video_w,
                proj_video_b,
                proj_text_w,
                proj_text_b,
                cls_video,
                cls_text,
                pos_embed,
                seg_embed,
                layers,
                final_ln_gamma,
                final_ln_beta,
                head_frame_w,
                head_frame_b,
                head_sentence_w,
                head_sentence_b,
                head_replay_w,
                head_replay_b,
            },
        }
    }

    /// `(name, leaf)` pairs in the same order as [`ModelParams::visit`].
    pub fn leaves(&self) -> &[(String, Var)] {
        &self.leaves
    }
}

/// Per-sample dropout source for training forwards.
pub struct Dropout<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub p: f64,
}

/// Tape handles for one sample's forward pass.
pub struct TapedOutputs {
    pub layout: TokenLayout,
    /// Encoder output after the final layer norm, `(2+N+M) x D`.
    pub encoded: Var,
    /// `N x 1` frame importance probabilities.
    pub frame_scores: Var,
    /// `M x 1` sentence importance probabilities (length 1 in parent mode).
    pub sentence_scores: Var,
    /// `N x 1` replay-relevance regression in `(0, 1)`.
    pub replay_pred: Var,
    /// `1 x D`, L2-normalized video summary embedding.
    pub cls_video: Var,
    /// `1 x D`, L2-normalized text summary embedding.
    pub cls_text: Var,
}

fn text_inputs(sample: &VideoSample, mode: TrainMode) -> Result<(Array2<f64>, Vec<(usize, usize)>)> {
    let n = sample.n_frames();
    match mode {
        TrainMode::Child => {
            if sample.subtitles.is_empty() {
                return Err(HsumError::Invariant(format!(
                    "{}: child mode needs at least one subtitle",
                    sample.video_id
                )));
            }
            let d_t = sample.subtitles[0].text_feature.len();
            let mut feats = Array2::zeros((sample.subtitles.len(), d_t));
            let mut spans = Vec::with_capacity(sample.subtitles.len());
            for (j, sub) in sample.subtitles.iter().enumerate() {
                for (k, &v) in sub.text_feature.iter().enumerate() {
                    feats[[j, k]] = f64::from(v);
                }
                spans.push((sub.start_frame, sub.end_frame));
            }
            Ok((feats, spans))
        }
        TrainMode::Parent => {
            let global = sample.global_feature.as_ref().ok_or_else(|| {
                HsumError::Invariant(format!(
                    "{}: parent mode needs a global description feature",
                    sample.video_id
                ))
            })?;
            let feats = global
                .mapv(f64::from)
                .insert_axis(ndarray::Axis(0));
            Ok((feats, vec![(0, n)]))
        }
    }
}

fn check_sample_dims(config: &ModelConfig, sample: &VideoSample, text_rows: usize) -> Result<()> {
    if sample.frame_features.ncols() != config.d_v {
        return Err(HsumError::DimensionMismatch {
            what: format!("{} frame features", sample.video_id),
            expected: config.d_v,
            got: sample.frame_features.ncols(),
        });
    }
    if sample.n_frames() > config.max_frames {
        return Err(HsumError::Range(format!(
            "{}: {} frames exceed the position table ({})",
            sample.video_id,
            sample.n_frames(),
            config.max_frames
        )));
    }
    if text_rows > config.max_text {
        return Err(HsumError::Range(format!(
            "{}: {} text tokens exceed the segment table ({})",
            sample.video_id, text_rows, config.max_text
        )));
    }
    Ok(())
}

/// Compose the fused token sequence on the tape: project both modalities,
/// prepend the [CLS] embeddings, and add position + segment embeddings.
fn assemble_tokens(
    tape: &Tape,
    taped: &TapedParams,
    sample: &VideoSample,
    mode: TrainMode,
) -> Result<(Var, AlignmentMask, Vec<usize>)> {
    let (text_feats, spans) = text_inputs(sample, mode)?;
    check_sample_dims(&taped.config, sample, text_feats.nrows())?;
    if text_feats.ncols() != taped.config.d_t {
        return Err(HsumError::DimensionMismatch {
            what: format!("{} text features", sample.video_id),
            expected: taped.config.d_t,
            got: text_feats.ncols(),
        });
    }
    let n = sample.n_frames();
    let mask = alignment::build_alignment_mask(n, &spans)?;
    let seg_ids = alignment::segment_ids(n, &spans)?;
    let layout = mask.layout;
    let v = &taped.vars;

    let frames_in = tape.input(sample.frame_features.mapv(f64::from));
    let frames = tape.add_row(tape.matmul(frames_in, v.proj_video_w), v.proj_video_b);
    let text_in = tape.input(text_feats);
    let text = tape.add_row(tape.matmul(text_in, v.proj_text_w), v.proj_text_b);

    let base = tape.concat_rows(&[v.cls_video, frames, v.cls_text, text]);
    let positions: Vec<usize> = (0..layout.total()).collect();
    let pos = tape.gather_rows(v.pos_embed, &positions);
    let seg = tape.gather_rows(v.seg_embed, &seg_ids);
    let tokens = tape.add(tape.add(base, pos), seg);
    Ok((tokens, mask, seg_ids))
}

/// Scaled dot-product attention with an additive mask bias, shared by every
/// head of the encoder and by the public [`masked_attention`] entry point.
fn attention_on_tape(tape: &Tape, q: Var, k: Var, val: Var, bias: Var, head_dim: usize) -> Var {
    let scores = tape.scale(tape.matmul_nt(q, k), 1.0 / (head_dim as f64).sqrt());
    let probs = tape.softmax_rows(tape.add(scores, bias));
    tape.matmul(probs, val)
}

fn apply_dropout(tape: &Tape, x: Var, dropout: &mut Option<Dropout<'_>>) -> Var {
    let Some(drop) = dropout else { return x };
    if drop.p == 0.0 {
        return x;
    }
    let shape = tape.shape(x);
    let keep = 1.0 - drop.p;
    let mask = Array2::from_shape_fn(shape, |_| {
        if rand::RngExt::random::<f64>(drop.rng) < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    tape.mul_elem(x, tape.input(mask))
}

/// Build one sample's forward pass on `tape`. Pass `dropout` only during
/// training; evaluation forwards are deterministic.
pub fn forward_on_tape(
    tape: &Tape,
    taped: &TapedParams,
    sample: &VideoSample,
    mode: TrainMode,
    mut dropout: Option<Dropout<'_>>,
) -> Result<TapedOutputs> {
    let (mut x, mask, _) = assemble_tokens(tape, taped, sample, mode)?;
    let layout = mask.layout;
    let bias = tape.input(mask.bias());
    let config = &taped.config;
    let head_dim = config.head_dim();

    for layer in &taped.vars.layers {
        // Attention block, pre-norm residual.
        let normed = tape.layer_norm(x, layer.ln1_gamma, layer.ln1_beta, LN_EPS);
        let q = tape.add_row(tape.matmul(normed, layer.attn_q_w), layer.attn_q_b);
        let k = tape.add_row(tape.matmul(normed, layer.attn_k_w), layer.attn_k_b);
        let v = tape.add_row(tape.matmul(normed, layer.attn_v_w), layer.attn_v_b);
        let mut heads = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            heads.push(attention_on_tape(tape, qh, kh, vh, bias, head_dim));
        }
        let merged = tape.concat_cols(&heads);
        let attn_out = tape.add_row(tape.matmul(merged, layer.attn_out_w), layer.attn_out_b);
        x = tape.add(x, apply_dropout(tape, attn_out, &mut dropout));

        // Feed-forward block, pre-norm residual.
        let normed2 = tape.layer_norm(x, layer.ln2_gamma, layer.ln2_beta, LN_EPS);
        let hidden = tape.gelu(tape.add_row(tape.matmul(normed2, layer.ffn_w1), layer.ffn_b1));
        let ffn_out = tape.add_row(tape.matmul(hidden, layer.ffn_w2), layer.ffn_b2);
        x = tape.add(x, apply_dropout(tape, ffn_out, &mut dropout));
    }

    let encoded = tape.layer_norm(x, taped.vars.final_ln_gamma, taped.vars.final_ln_beta, LN_EPS);

    let frame_rows = tape.slice_rows(encoded, layout.frame(0), layout.n_frames);
    let text_rows = tape.slice_rows(encoded, layout.text(0), layout.n_text);
    let head = |rows: Var, w: Var, b: Var| tape.sigmoid(tape.add_row(tape.matmul(rows, w), b));
    let frame_scores = head(frame_rows, taped.vars.head_frame_w, taped.vars.head_frame_b);
    let sentence_scores = head(text_rows, taped.vars.head_sentence_w, taped.vars.head_sentence_b);
    let replay_pred = head(frame_rows, taped.vars.head_replay_w, taped.vars.head_replay_b);

    let cls_video_row = tape.slice_rows(encoded, layout.cls_video(), 1);
    let cls_text_row = tape.slice_rows(encoded, layout.cls_text(), 1);
    let cls_video = tape.l2_normalize_rows(cls_video_row, NORM_EPS);
    let cls_text = tape.l2_normalize_rows(cls_text_row, NORM_EPS);

    Ok(TapedOutputs {
        layout,
        encoded,
        frame_scores,
        sentence_scores,
        replay_pred,
        cls_video,
        cls_text,
    })
}

/// Scores and embeddings for one sample in evaluation mode.
#[derive(Debug, Clone)]
pub struct ModelOutputs {
    pub frame_scores: Vec<f64>,
    pub sentence_scores: Vec<f64>,
    pub replay_pred: Vec<f64>,
    pub cls_video: Array1<f64>,
    pub cls_text: Array1<f64>,
    /// Final-layer token embeddings, `(2+N+M) x D`.
    pub token_embeddings: Array2<f64>,
    pub layout: TokenLayout,
}

/// Deterministic evaluation forward: fresh tape, no dropout, values only.
pub fn forward(params: &ModelParams, sample: &VideoSample, mode: TrainMode) -> Result<ModelOutputs> {
    let tape = Tape::new();
    let taped = TapedParams::stage(&tape, params);
    let out = forward_on_tape(&tape, &taped, sample, mode, None)?;
    let column = |v: Var| -> Vec<f64> { tape.value(v).column(0).to_vec() };
    Ok(ModelOutputs {
        frame_scores: column(out.frame_scores),
        sentence_scores: column(out.sentence_scores),
        replay_pred: column(out.replay_pred),
        cls_video: tape.value(out.cls_video).row(0).to_owned(),
        cls_text: tape.value(out.cls_text).row(0).to_owned(),
        token_embeddings: tape.value(out.encoded),
        layout: out.layout,
    })
}

/// The fused input sequence exactly as the encoder would see it, without
/// running the encoder. Backs `alignment::build_fused_sequence`.
pub fn fused_sequence_values(
    sample: &VideoSample,
    params: &ModelParams,
    mode: TrainMode,
) -> Result<FusedSequence> {
    let tape = Tape::new();
    let taped = TapedParams::stage(&tape, params);
    let (tokens, mask, seg_ids) = assemble_tokens(&tape, &taped, sample, mode)?;
    let layout = mask.layout;
    let kinds = (0..layout.total()).map(|t| layout.kind(t)).collect();
    Ok(FusedSequence {
        tokens: tape.value(tokens),
        layout,
        kinds,
        segment_ids: seg_ids,
    })
}

/// Single-head scaled dot-product attention under an alignment mask, as plain
/// arrays. Runs the exact tape code the encoder uses.
pub fn masked_attention(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    mask: &AlignmentMask,
) -> Result<Array2<f64>> {
    let t = mask.layout.total();
    if queries.nrows() != t || keys.nrows() != t || values.nrows() != t {
        return Err(HsumError::Shape(format!(
            "masked_attention: expected {t} rows matching the mask, got {}/{}/{}",
            queries.nrows(),
            keys.nrows(),
            values.nrows()
        )));
    }
    if queries.ncols() != keys.ncols() {
        return Err(HsumError::Shape(
            "masked_attention: query/key width mismatch".into(),
        ));
    }
    let tape = Tape::new();
    let q = tape.input(queries.clone());
    let k = tape.input(keys.clone());
    let v = tape.input(values.clone());
    let bias = tape.input(mask.bias());
    let out = attention_on_tape(&tape, q, k, v, bias, queries.ncols());
    Ok(tape.value(out))
}

/// Post-softmax attention weights under a mask, for inspection and tests.
pub fn masked_attention_weights(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    mask: &AlignmentMask,
) -> Result<Array2<f64>> {
    let t = mask.layout.total();
    if queries.nrows() != t || keys.nrows() != t {
        return Err(HsumError::Shape(format!(
            "masked_attention_weights: expected {t} rows matching the mask"
        )));
    }
    let tape = Tape::new();
    let q = tape.input(queries.clone());
    let k = tape.input(keys.clone());
    let bias = tape.input(mask.bias());
    let scores = tape.scale(tape.matmul_nt(q, k), 1.0 / (queries.ncols() as f64).sqrt());
    let probs = tape.softmax_rows(tape.add(scores, bias));
    Ok(tape.value(probs))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::alignment::TokenKind;
    use crate::dataset::SubtitleSegment;
    use ndarray::Array1;
    use rand::RngExt;

    pub(crate) fn toy_sample(seed: u64, n: usize, m: usize, d_v: usize, d_t: usize) -> VideoSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame_features =
            Array2::from_shape_fn((n, d_v), |_| rng.random_range(-1.0f32..1.0));
        let per = n.div_ceil(m);
        let subtitles = (0..m)
            .map(|j| SubtitleSegment {
                text_feature: Array1::from_shape_fn(d_t, |_| rng.random_range(-1.0f32..1.0)),
                start_frame: j * per,
                end_frame: ((j + 1) * per).min(n),
                text: None,
            })
            .collect();
        let global_feature =
            Some(Array1::from_shape_fn(d_t, |_| rng.random_range(-1.0f32..1.0)));
        let frame_labels = Some((0..n).map(|i| u8::from(i % 3 == 0)).collect());
        let sentence_labels = Some((0..m).map(|j| u8::from(j % 2 == 0)).collect());
        let replay_scores = Some((0..n).map(|i| if i % 3 == 0 { 0.8 } else { 0.05 }).collect());
        VideoSample {
            video_id: format!("toy_{seed}"),
            frame_features,
            subtitles,
            global_feature,
            frame_labels,
            sentence_labels,
            replay_scores,
            shot_boundaries: None,
        }
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 32,
            dropout: 0.0,
            d_v: 8,
            d_t: 6,
            max_frames: 16,
            max_text: 8,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let config = small_config();
        let a = init_params(&config, 3).unwrap();
        let b = init_params(&config, 3).unwrap();
        assert_eq!(a, b);
        let c = init_params(&config, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        let mut config = small_config();
        config.d_model = 130;
        config.n_heads = 4;
        assert!(init_params(&config, 0).is_err());
    }

    #[test]
    fn head_dim_arithmetic() {
        let mut config = small_config();
        config.d_model = 128;
        config.n_heads = 4;
        assert_eq!(config.head_dim(), 32);
    }

    #[test]
    fn visit_orders_match() {
        let mut params = init_params(&small_config(), 1).unwrap();
        let mut names = Vec::new();
        params.visit(|n, _| names.push(n.to_string()));
        let mut names_mut = Vec::new();
        params.visit_mut(|n, _| names_mut.push(n.to_string()));
        assert_eq!(names, names_mut);

        let tape = Tape::new();
        let taped = TapedParams::stage(&tape, &params);
        let staged: Vec<String> = taped.leaves().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, staged);
    }

    #[test]
    fn forward_shapes_match_sample() {
        let config = small_config();
        let params = init_params(&config, 5).unwrap();
        let sample = toy_sample(1, 12, 4, config.d_v, config.d_t);
        let out = forward(&params, &sample, TrainMode::Child).unwrap();
        assert_eq!(out.frame_scores.len(), 12);
        assert_eq!(out.sentence_scores.len(), 4);
        assert_eq!(out.replay_pred.len(), 12);
        assert_eq!(out.cls_video.len(), config.d_model);
        assert_eq!(out.token_embeddings.nrows(), 2 + 12 + 4);

        let parent = forward(&params, &sample, TrainMode::Parent).unwrap();
        assert_eq!(parent.sentence_scores.len(), 1);
        assert_eq!(parent.token_embeddings.nrows(), 2 + 12 + 1);
    }

    #[test]
    fn scores_are_probabilities_and_cls_unit_norm() {
        let config = small_config();
        let params = init_params(&config, 6).unwrap();
        let sample = toy_sample(2, 10, 3, config.d_v, config.d_t);
        let out = forward(&params, &sample, TrainMode::Child).unwrap();
        for &s in out
            .frame_scores
            .iter()
            .chain(&out.sentence_scores)
            .chain(&out.replay_pred)
        {
            assert!(s.is_finite() && s > 0.0 && s < 1.0);
        }
        assert!((out.cls_video.dot(&out.cls_video).sqrt() - 1.0).abs() < 1e-9);
        assert!((out.cls_text.dot(&out.cls_text).sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_is_deterministic_in_eval_mode() {
        let config = small_config();
        let params = init_params(&config, 7).unwrap();
        let sample = toy_sample(3, 9, 3, config.d_v, config.d_t);
        let a = forward(&params, &sample, TrainMode::Child).unwrap();
        let b = forward(&params, &sample, TrainMode::Child).unwrap();
        assert_eq!(a.frame_scores, b.frame_scores);
        assert_eq!(a.token_embeddings, b.token_embeddings);
    }

    #[test]
    fn child_mode_requires_subtitles_parent_requires_global() {
        let config = small_config();
        let params = init_params(&config, 8).unwrap();
        let mut sample = toy_sample(4, 6, 2, config.d_v, config.d_t);
        sample.subtitles.clear();
        assert!(forward(&params, &sample, TrainMode::Child).is_err());

        let mut sample = toy_sample(5, 6, 2, config.d_v, config.d_t);
        sample.global_feature = None;
        assert!(forward(&params, &sample, TrainMode::Parent).is_err());
    }

    #[test]
    fn all_ones_mask_equals_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = 6; // layout: N=3, M=1 -> 6 tokens
        let d = 4;
        let q = Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
        let k = Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
        let v = Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
        let mask = alignment::build_alignment_mask(3, &[(0, 3)]).unwrap();
        let masked = masked_attention(&q, &k, &v, &mask).unwrap();

        // Reference: plain softmax attention without any bias.
        let scores = q.dot(&k.t()) / (d as f64).sqrt();
        let mut probs = scores.clone();
        for mut row in probs.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        let plain = probs.dot(&v);
        for (a, b) in masked.iter().zip(plain.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blocked_pairs_get_negligible_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mask = alignment::build_alignment_mask(4, &[(0, 2), (2, 4)]).unwrap();
        let t = mask.layout.total();
        let q = Array2::from_shape_fn((t, 8), |_| rng.random_range(-2.0..2.0));
        let k = Array2::from_shape_fn((t, 8), |_| rng.random_range(-2.0..2.0));
        let w = masked_attention_weights(&q, &k, &mask).unwrap();
        for a in 0..t {
            let row_sum: f64 = w.row(a).sum();
            assert!((row_sum - 1.0).abs() < 1e-9);
            for b in 0..t {
                if !mask.allows(a, b) {
                    assert!(w[[a, b]] <= 1e-6, "blocked ({a}, {b}) got {}", w[[a, b]]);
                }
            }
        }
    }

    #[test]
    fn diagonal_mask_returns_own_value_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Probe mask with no covering spans = pure self-attention.
        let mask = alignment::cross_modal_probe_mask(3, &[(0, 1)]).unwrap();
        let t = mask.layout.total();
        let q = Array2::from_shape_fn((t, 5), |_| rng.random_range(-1.0..1.0));
        let k = Array2::from_shape_fn((t, 5), |_| rng.random_range(-1.0..1.0));
        let v = Array2::from_shape_fn((t, 5), |_| rng.random_range(-1.0..1.0));
        let out = masked_attention(&q, &k, &v, &mask).unwrap();
        // Tokens other than frames 0 and the text token attend only to
        // themselves, so their output is exactly their value row.
        let layout = mask.layout;
        for token in [layout.cls_video(), layout.frame(2), layout.cls_text()] {
            for j in 0..5 {
                assert!((out[[token, j]] - v[[token, j]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn value_perturbation_cannot_cross_blocked_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mask = alignment::build_alignment_mask(4, &[(0, 2)]).unwrap();
        let layout = mask.layout;
        let t = layout.total();
        let q = Array2::from_shape_fn((t, 6), |_| rng.random_range(-1.0..1.0));
        let k = Array2::from_shape_fn((t, 6), |_| rng.random_range(-1.0..1.0));
        let v = Array2::from_shape_fn((t, 6), |_| rng.random_range(-1.0..1.0));
        let base = masked_attention(&q, &k, &v, &mask).unwrap();

        // Frames 2 and 3 are not covered by the lone subtitle; perturbing the
        // subtitle's value row must leave their outputs untouched.
        let mut v2 = v.clone();
        for j in 0..6 {
            v2[[layout.text(0), j]] += rng.random_range(0.5..1.0);
        }
        let bumped = masked_attention(&q, &k, &v2, &mask).unwrap();
        for frame in [2, 3] {
            for j in 0..6 {
                let delta = (bumped[[layout.frame(frame), j]] - base[[layout.frame(frame), j]]).abs();
                assert!(delta < 1e-5, "frame {frame} moved by {delta}");
            }
        }
        // A covered frame must move.
        let moved: f64 = (0..6)
            .map(|j| (bumped[[layout.frame(0), j]] - base[[layout.frame(0), j]]).abs())
            .sum();
        assert!(moved > 1e-6);
    }

    #[test]
    fn position_free_duplicate_frames_score_identically() {
        let config = small_config();
        let mut params = init_params(&config, 13).unwrap();
        params.pos_embed.fill(0.0);
        let mut sample = toy_sample(6, 8, 1, config.d_v, config.d_t);
        // Duplicate frame 2 into frame 5; one full-span subtitle keeps the
        // segment context identical for every frame.
        let row = sample.frame_features.row(2).to_owned();
        sample.frame_features.row_mut(5).assign(&row);
        sample.subtitles[0].start_frame = 0;
        sample.subtitles[0].end_frame = 8;
        let out = forward(&params, &sample, TrainMode::Child).unwrap();
        assert!((out.frame_scores[2] - out.frame_scores[5]).abs() < 1e-9);
    }

    #[test]
    fn zero_projection_leaves_only_embeddings() {
        let config = small_config();
        let mut params = init_params(&config, 14).unwrap();
        params.proj_video_w.fill(0.0);
        params.proj_video_b.fill(0.0);
        params.proj_text_w.fill(0.0);
        params.proj_text_b.fill(0.0);
        let sample = toy_sample(7, 5, 2, config.d_v, config.d_t);
        let fused = fused_sequence_values(&sample, &params, TrainMode::Child).unwrap();
        let layout = fused.layout;
        let seg = alignment::segment_ids(5, &[(0, 3), (3, 5)]).unwrap();
        for t in 0..layout.total() {
            let expected_cls: Array1<f64> = match layout.kind(t) {
                TokenKind::ClsVideo => params.cls_video.row(0).to_owned(),
                TokenKind::ClsText => params.cls_text.row(0).to_owned(),
                _ => Array1::zeros(config.d_model),
            };
            for j in 0..config.d_model {
                let expected = expected_cls[j]
                    + params.pos_embed[[t, j]]
                    + params.seg_embed[[seg[t], j]];
                assert!(
                    (fused.tokens[[t, j]] - expected).abs() < 1e-12,
                    "token {t} dim {j}"
                );
            }
        }
    }

    #[test]
    fn fused_sequence_token_counts() {
        let config = small_config();
        let params = init_params(&config, 15).unwrap();
        let sample = toy_sample(8, 12, 4, config.d_v, config.d_t);
        let child = alignment::build_fused_sequence(&sample, &params, TrainMode::Child).unwrap();
        assert_eq!(child.tokens.nrows(), 2 + 12 + 4);
        let parent = alignment::build_fused_sequence(&sample, &params, TrainMode::Parent).unwrap();
        assert_eq!(parent.tokens.nrows(), 2 + 12 + 1);
        assert_eq!(parent.segment_ids[parent.layout.text(0)], 1);
    }

    #[test]
    fn sample_exceeding_tables_is_rejected() {
        let config = small_config();
        let params = init_params(&config, 16).unwrap();
        let sample = toy_sample(9, config.max_frames + 1, 2, config.d_v, config.d_t);
        assert!(forward(&params, &sample, TrainMode::Child).is_err());
    }

    #[test]
    fn dropout_masks_are_rng_driven() {
        let config = small_config();
        let params = init_params(&config, 17).unwrap();
        let sample = toy_sample(10, 6, 2, config.d_v, config.d_t);

        let run = |seed: u64| {
            let tape = Tape::new();
            let taped = TapedParams::stage(&tape, &params);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = forward_on_tape(
                &tape,
                &taped,
                &sample,
                TrainMode::Child,
                Some(Dropout { rng: &mut rng, p: 0.5 }),
            )
            .unwrap();
            tape.value(out.frame_scores)
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }
}
