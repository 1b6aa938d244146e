//! Fused token layout and the alignment-guided attention mask.
//!
//! The fused sequence puts a video [CLS] first, then the N frame tokens, then
//! a text [CLS], then the M text tokens. The mask permits attention within
//! each modality unconditionally and across modalities only where a subtitle's
//! time span covers the frame; both [CLS] tokens see and are seen by everyone.

use crate::error::{HsumError, Result};
use crate::network::{ModelParams, TrainMode};
use crate::dataset::VideoSample;
use ndarray::Array2;

/// Additive logit bias used for blocked attention pairs.
pub const MASK_NEG_BIAS: f64 = -1e9;

/// What kind of token sits at a given sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    ClsVideo,
    Frame,
    ClsText,
    Text,
}

impl TokenKind {
    /// Both [CLS] tokens count as members of their modality.
    pub fn is_video_side(self) -> bool {
        matches!(self, TokenKind::ClsVideo | TokenKind::Frame)
    }

    pub fn is_cls(self) -> bool {
        matches!(self, TokenKind::ClsVideo | TokenKind::ClsText)
    }
}

/// Index arithmetic for the fused sequence of `2 + N + M` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_frames: usize,
    pub n_text: usize,
}

impl TokenLayout {
    pub fn new(n_frames: usize, n_text: usize) -> Self {
        TokenLayout { n_frames, n_text }
    }

    pub fn total(&self) -> usize {
        2 + self.n_frames + self.n_text
    }

    pub fn cls_video(&self) -> usize {
        0
    }

    pub fn frame(&self, i: usize) -> usize {
        debug_assert!(i < self.n_frames);
        1 + i
    }

    pub fn cls_text(&self) -> usize {
        self.n_frames + 1
    }

    pub fn text(&self, j: usize) -> usize {
        debug_assert!(j < self.n_text);
        self.n_frames + 2 + j
    }

    pub fn kind(&self, token: usize) -> TokenKind {
        if token == 0 {
            TokenKind::ClsVideo
        } else if token <= self.n_frames {
            TokenKind::Frame
        } else if token == self.n_frames + 1 {
            TokenKind::ClsText
        } else {
            debug_assert!(token < self.total());
            TokenKind::Text
        }
    }
}

/// Binary attention mask over the fused sequence. 1 = permitted, 0 = blocked.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMask {
    pub layout: TokenLayout,
    mask: Array2<f64>,
}

impl AlignmentMask {
    pub fn allows(&self, a: usize, b: usize) -> bool {
        self.mask[[a, b]] != 0.0
    }

    /// The 0/1 matrix itself, `(2+N+M) x (2+N+M)`.
    pub fn as_matrix(&self) -> &Array2<f64> {
        &self.mask
    }

    /// Additive bias for attention logits: 0 where permitted, a large
    /// negative constant where blocked.
    pub fn bias(&self) -> Array2<f64> {
        self.mask.mapv(|m| if m == 0.0 { MASK_NEG_BIAS } else { 0.0 })
    }
}

fn check_spans(n_frames: usize, spans: &[(usize, usize)]) -> Result<()> {
    for (j, &(start, end)) in spans.iter().enumerate() {
        if start >= end || end > n_frames {
            return Err(HsumError::Invariant(format!(
                "text span {j} [{start}, {end}) invalid for {n_frames} frames"
            )));
        }
    }
    Ok(())
}

/// Build the alignment mask for `n_frames` frames and one text token per span.
///
/// Cross-modal entries are permitted exactly where the span covers the frame;
/// everything within a modality and everything involving a [CLS] token is
/// permitted.
pub fn build_alignment_mask(n_frames: usize, spans: &[(usize, usize)]) -> Result<AlignmentMask> {
    check_spans(n_frames, spans)?;
    let layout = TokenLayout::new(n_frames, spans.len());
    let t = layout.total();
    let mut mask = Array2::<f64>::zeros((t, t));
    for a in 0..t {
        for b in 0..t {
            let (ka, kb) = (layout.kind(a), layout.kind(b));
            let allowed = if ka.is_cls() || kb.is_cls() {
                true
            } else if ka.is_video_side() == kb.is_video_side() {
                true
            } else {
                // Exactly one of the pair is a frame, the other a text token.
                let (frame, text) = if ka == TokenKind::Frame {
                    (a - 1, b - layout.text(0))
                } else {
                    (b - 1, a - layout.text(0))
                };
                let (start, end) = spans[text];
                start <= frame && frame < end
            };
            mask[[a, b]] = f64::from(u8::from(allowed));
        }
    }
    Ok(AlignmentMask { layout, mask })
}

/// A diagnostic mask that permits only self-attention plus the aligned
/// cross-modal pairs. With one encoder layer this makes every frame output a
/// function of its own token and its aligned text tokens alone, which turns
/// perturbation tests into a sharp probe of mask enforcement.
pub fn cross_modal_probe_mask(n_frames: usize, spans: &[(usize, usize)]) -> Result<AlignmentMask> {
    let full = build_alignment_mask(n_frames, spans)?;
    let layout = full.layout;
    let t = layout.total();
    let mut mask = Array2::<f64>::zeros((t, t));
    for a in 0..t {
        for b in 0..t {
            let cross = layout.kind(a).is_video_side() != layout.kind(b).is_video_side();
            if a == b || (cross && !layout.kind(a).is_cls() && !layout.kind(b).is_cls() && full.allows(a, b)) {
                mask[[a, b]] = 1.0;
            }
        }
    }
    Ok(AlignmentMask { layout, mask })
}

/// Segment id for every token: 0 for [CLS] tokens and uncovered frames,
/// `1 + j` for text token `j` and for frames covered by span `j` (first
/// covering span wins when spans overlap).
pub fn segment_ids(n_frames: usize, spans: &[(usize, usize)]) -> Result<Vec<usize>> {
    check_spans(n_frames, spans)?;
    let layout = TokenLayout::new(n_frames, spans.len());
    let mut ids = vec![0usize; layout.total()];
    for i in 0..n_frames {
        ids[layout.frame(i)] = spans
            .iter()
            .position(|&(s, e)| s <= i && i < e)
            .map_or(0, |j| j + 1);
    }
    for j in 0..spans.len() {
        ids[layout.text(j)] = j + 1;
    }
    Ok(ids)
}

/// The fused input sequence after projection and embedding composition.
#[derive(Debug, Clone)]
pub struct FusedSequence {
    /// `(2+N+M) x D` token matrix actually fed to the encoder.
    pub tokens: Array2<f64>,
    pub layout: TokenLayout,
    /// Per-token kind, parallel to the rows of `tokens`.
    pub kinds: Vec<TokenKind>,
    /// Per-token segment id as produced by [`segment_ids`].
    pub segment_ids: Vec<usize>,
}

/// Assemble the projected, embedded token sequence for one sample without
/// running the encoder. This is the same composition the forward pass uses.
pub fn build_fused_sequence(
    sample: &VideoSample,
    params: &ModelParams,
    mode: TrainMode,
) -> Result<FusedSequence> {
    crate::network::fused_sequence_values(sample, params, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_token_mask_by_hand() {
        // N=2, M=1, subtitle covering frame 1 only. Token order is
        // [CLSV, f0, f1, CLST, s0]; the only blocked pair is f0 <-> s0.
        let mask = build_alignment_mask(2, &[(1, 2)]).unwrap();
        let expected = [
            [1.0, 1.0, 1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0, 1.0, 0.0],
            [1.0, 1.0, 1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0, 1.0, 1.0],
            [1.0, 0.0, 1.0, 1.0, 1.0],
        ];
        assert_eq!(mask.as_matrix().shape(), &[5, 5]);
        for a in 0..5 {
            for b in 0..5 {
                assert_eq!(mask.as_matrix()[[a, b]], expected[a][b], "entry ({a}, {b})");
            }
        }
    }

    #[test]
    fn no_text_mask_is_all_ones() {
        let mask = build_alignment_mask(3, &[]).unwrap();
        assert_eq!(mask.as_matrix().shape(), &[5, 5]);
        assert!(mask.as_matrix().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn full_span_mask_is_all_ones() {
        let mask = build_alignment_mask(4, &[(0, 4)]).unwrap();
        assert!(mask.as_matrix().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_is_symmetric_with_unit_diagonal() {
        let spans = [(0, 3), (2, 5), (5, 6)];
        let mask = build_alignment_mask(6, &spans).unwrap();
        let t = mask.layout.total();
        for a in 0..t {
            assert_eq!(mask.as_matrix()[[a, a]], 1.0);
            for b in 0..t {
                assert_eq!(mask.as_matrix()[[a, b]], mask.as_matrix()[[b, a]]);
            }
        }
    }

    #[test]
    fn build_is_idempotent() {
        let spans = [(0, 2), (3, 7)];
        let first = build_alignment_mask(8, &spans).unwrap();
        let second = build_alignment_mask(8, &spans).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn permuting_spans_permutes_text_rows() {
        let spans = [(0, 2), (2, 5), (4, 6)];
        let swapped = [(2, 5), (0, 2), (4, 6)];
        let base = build_alignment_mask(6, &spans).unwrap();
        let perm = build_alignment_mask(6, &swapped).unwrap();
        let layout = base.layout;
        // Text tokens 0 and 1 trade places; token 2 and all video rows stay.
        let map = |t: usize| {
            if t == layout.text(0) {
                layout.text(1)
            } else if t == layout.text(1) {
                layout.text(0)
            } else {
                t
            }
        };
        for a in 0..layout.total() {
            for b in 0..layout.total() {
                assert_eq!(base.as_matrix()[[a, b]], perm.as_matrix()[[map(a), map(b)]]);
            }
        }
    }

    #[test]
    fn uncovered_frame_has_zero_text_row() {
        let spans = [(0, 2), (4, 6)];
        let mask = build_alignment_mask(6, &spans).unwrap();
        let layout = mask.layout;
        for i in 2..4 {
            for j in 0..spans.len() {
                assert!(!mask.allows(layout.frame(i), layout.text(j)));
            }
        }
    }

    #[test]
    fn rejects_invalid_spans() {
        assert!(build_alignment_mask(4, &[(2, 2)]).is_err());
        assert!(build_alignment_mask(4, &[(3, 5)]).is_err());
        assert!(build_alignment_mask(4, &[(3, 2)]).is_err());
    }

    #[test]
    fn bias_marks_blocked_pairs() {
        let mask = build_alignment_mask(2, &[(1, 2)]).unwrap();
        let bias = mask.bias();
        assert_eq!(bias[[1, 4]], MASK_NEG_BIAS);
        assert_eq!(bias[[4, 1]], MASK_NEG_BIAS);
        assert_eq!(bias[[0, 4]], 0.0);
        assert_eq!(bias[[2, 4]], 0.0);
    }

    #[test]
    fn probe_mask_keeps_only_diagonal_and_aligned_pairs() {
        let spans = [(0, 2)];
        let probe = cross_modal_probe_mask(3, &spans).unwrap();
        let layout = probe.layout;
        for a in 0..layout.total() {
            for b in 0..layout.total() {
                let aligned = (a == layout.frame(0) || a == layout.frame(1)) && b == layout.text(0)
                    || (b == layout.frame(0) || b == layout.frame(1)) && a == layout.text(0);
                let expected = a == b || aligned;
                assert_eq!(probe.allows(a, b), expected, "entry ({a}, {b})");
            }
        }
    }

    #[test]
    fn segment_ids_follow_covering_span() {
        let spans = [(0, 2), (3, 5)];
        let ids = segment_ids(5, &spans).unwrap();
        // [CLSV, f0..f4, CLST, s0, s1]
        assert_eq!(ids, vec![0, 1, 1, 0, 2, 2, 0, 1, 2]);
    }
}
