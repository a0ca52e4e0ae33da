//! Re-aligning span encodings into the full-prompt sequence, the naive
//! expansion control, and the padding keep-mask patterns.

use crate::embedding::EmbeddingSequence;
use crate::error::{Result, SdgError};
use crate::prompt::ConceptSpan;
use crate::scalar::Scalar;
use crate::vocab::SEQ_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentMode {
    Realign,
    NaiveExpand,
}

impl AlignmentMode {
    pub fn parse(s: &str) -> Option<AlignmentMode> {
        match s {
            "realign" => Some(AlignmentMode::Realign),
            "naive" | "naive-expand" => Some(AlignmentMode::NaiveExpand),
            _ => None,
        }
    }
}

/// Which key/value positions are retained downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingPattern {
    /// All 77 positions.
    Full,
    /// bos through eos plus the first pad.
    NearestPadOnly,
    /// bos through eos only.
    NoPad,
    /// bos plus the first pad row alone.
    NearestPadAlone,
}

impl PaddingPattern {
    pub const ALL: [PaddingPattern; 4] = [
        PaddingPattern::Full,
        PaddingPattern::NearestPadOnly,
        PaddingPattern::NoPad,
        PaddingPattern::NearestPadAlone,
    ];

    pub fn parse(s: &str) -> Option<PaddingPattern> {
        match s {
            "full" => Some(PaddingPattern::Full),
            "nearest-pad" | "nearest" => Some(PaddingPattern::NearestPadOnly),
            "no-pad" | "nopad" => Some(PaddingPattern::NoPad),
            "nearest-alone" => Some(PaddingPattern::NearestPadAlone),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PaddingPattern::Full => "full",
            PaddingPattern::NearestPadOnly => "nearest-pad",
            PaddingPattern::NoPad => "no-pad",
            PaddingPattern::NearestPadAlone => "nearest-alone",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RealignOptions {
    /// Also write the span's own eos row over the position following the
    /// span. Off by default; the span's bos/eos rows are otherwise dropped.
    pub include_span_eos: bool,
}

impl Default for RealignOptions {
    fn default() -> Self {
        RealignOptions { include_span_eos: false }
    }
}

/// Copies the full-prompt sequence and replaces rows
/// `[span.token_start, span.token_end)` with the span encoding's content
/// rows. Everything else, including every pad row, comes from the prompt
/// sequence unchanged.
pub fn realign<S: Scalar>(
    full: &EmbeddingSequence<S>,
    span_enc: &EmbeddingSequence<S>,
    span: &ConceptSpan,
) -> Result<EmbeddingSequence<S>> {
    realign_with(full, span_enc, span, RealignOptions::default())
}

pub fn realign_with<S: Scalar>(
    full: &EmbeddingSequence<S>,
    span_enc: &EmbeddingSequence<S>,
    span: &ConceptSpan,
    opts: RealignOptions,
) -> Result<EmbeddingSequence<S>> {
    let span_len = span.len();
    if span_enc.content_len() != span_len {
        return Err(SdgError::LengthMismatch {
            span_len,
            content_len: span_enc.content_len(),
        });
    }
    if span.token_end > full.content_len() + 1 {
        return Err(SdgError::ShapeMismatch(format!(
            "span [{}, {}) exceeds prompt content length {}",
            span.token_start,
            span.token_end,
            full.content_len()
        )));
    }
    let mut out = full.clone();
    for i in 0..span_len {
        let src = span_enc.data().row(1 + i).to_vec();
        out.data_mut().set_row(span.token_start + i, &src);
    }
    if opts.include_span_eos && span.token_end < SEQ_LEN {
        let src = span_enc.data().row(1 + span_len).to_vec();
        out.data_mut().set_row(span.token_end, &src);
    }
    Ok(out)
}

/// The ablation control: the span encoding is used as-is, with its own
/// bos/eos/pad rows and no re-alignment.
pub fn naive_expand<S: Scalar>(span_enc: &EmbeddingSequence<S>) -> EmbeddingSequence<S> {
    span_enc.clone()
}

/// Keep-mask over the 77 positions for a given padding pattern. Masked
/// positions are excluded from key/value construction downstream, shortening
/// the effective sequence.
pub fn padding_keep_mask(content_len: usize, pattern: PaddingPattern) -> Vec<bool> {
    let eos_pos = content_len + 1;
    let first_pad = eos_pos + 1;
    let mut mask = vec![false; SEQ_LEN];
    match pattern {
        PaddingPattern::Full => mask.iter_mut().for_each(|m| *m = true),
        PaddingPattern::NearestPadOnly => {
            for (i, m) in mask.iter_mut().enumerate() {
                *m = i <= eos_pos || i == first_pad;
            }
        }
        PaddingPattern::NoPad => {
            for (i, m) in mask.iter_mut().enumerate() {
                *m = i <= eos_pos;
            }
        }
        PaddingPattern::NearestPadAlone => {
            mask[0] = true;
            if first_pad < SEQ_LEN {
                mask[first_pad] = true;
            }
        }
    }
    mask
}

/// Indices of retained positions, in order.
pub fn kept_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// Returns the sequence unchanged plus the keep-mask for `pattern`.
pub fn apply_padding_pattern<S: Scalar>(
    seq: &EmbeddingSequence<S>,
    pattern: PaddingPattern,
) -> (EmbeddingSequence<S>, Vec<bool>) {
    let mask = padding_keep_mask(seq.content_len(), pattern);
    (seq.clone(), mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;
    use crate::vocab::{test_vocab, tokenize, TokenSequence};

    fn seq_from_fn(
        tokens: TokenSequence,
        f: impl Fn(usize, usize) -> f64,
    ) -> EmbeddingSequence<f64> {
        EmbeddingSequence::new(Mat::from_fn(SEQ_LEN, 4, f), tokens).unwrap()
    }

    #[test]
    fn realign_replaces_exactly_span_rows() {
        let v = test_vocab();
        let full_t = tokenize("a white sheep and a red car", &v).unwrap();
        let span_t = tokenize("a red car", &v).unwrap();
        let full = seq_from_fn(full_t, |r, c| (r * 10 + c) as f64);
        let span_enc = seq_from_fn(span_t, |r, c| -((r * 10 + c) as f64) - 1000.0);
        let span = ConceptSpan { text: "a red car".into(), token_start: 5, token_end: 8 };
        let out = realign(&full, &span_enc, &span).unwrap();
        for r in 0..SEQ_LEN {
            if (5..8).contains(&r) {
                assert_eq!(out.data().row(r), span_enc.data().row(1 + r - 5));
            } else {
                assert_eq!(out.data().row(r), full.data().row(r));
            }
        }
    }

    #[test]
    fn realign_full_content_is_identity_on_content_rows() {
        let v = test_vocab();
        let t = tokenize("a red apple", &v).unwrap();
        let full = seq_from_fn(t.clone(), |r, c| (r + c) as f64);
        let span = ConceptSpan {
            text: "a red apple".into(),
            token_start: 1,
            token_end: t.content_len() + 1,
        };
        let out = realign(&full, &full, &span).unwrap();
        assert_eq!(out.data(), full.data());
    }

    #[test]
    fn realign_length_mismatch_errors() {
        let v = test_vocab();
        let full_t = tokenize("a white sheep and a red car", &v).unwrap();
        let span_t = tokenize("a red", &v).unwrap();
        let full = seq_from_fn(full_t, |r, c| (r + c) as f64);
        let span_enc = seq_from_fn(span_t, |r, c| (r + c) as f64);
        let span = ConceptSpan { text: "a red car".into(), token_start: 5, token_end: 8 };
        assert!(matches!(
            realign(&full, &span_enc, &span),
            Err(SdgError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn realign_is_idempotent_and_disjoint_spans_commute() {
        let v = test_vocab();
        let full_t = tokenize("a red apple and a yellow banana", &v).unwrap();
        let a_t = tokenize("a red apple", &v).unwrap();
        let b_t = tokenize("a yellow banana", &v).unwrap();
        let full = seq_from_fn(full_t, |r, c| (r * 7 + c) as f64);
        let enc_a = seq_from_fn(a_t, |r, c| (r * 3 + c) as f64 + 100.0);
        let enc_b = seq_from_fn(b_t, |r, c| (r * 5 + c) as f64 - 100.0);
        let sa = ConceptSpan { text: "a red apple".into(), token_start: 1, token_end: 4 };
        let sb = ConceptSpan { text: "a yellow banana".into(), token_start: 5, token_end: 8 };

        let once = realign(&full, &enc_a, &sa).unwrap();
        let twice = realign(&once, &enc_a, &sa).unwrap();
        assert_eq!(once.data(), twice.data());

        let ab = realign(&realign(&full, &enc_a, &sa).unwrap(), &enc_b, &sb).unwrap();
        let ba = realign(&realign(&full, &enc_b, &sb).unwrap(), &enc_a, &sa).unwrap();
        assert_eq!(ab.data(), ba.data());
    }

    #[test]
    fn naive_expand_is_bitwise_input() {
        let v = test_vocab();
        let t = tokenize("a red car", &v).unwrap();
        let enc = seq_from_fn(t, |r, c| (r * 2 + c) as f64);
        assert_eq!(naive_expand(&enc).data(), enc.data());
    }

    #[test]
    fn padding_mask_counts() {
        let full = padding_keep_mask(3, PaddingPattern::Full);
        assert!(full.iter().all(|&m| m));

        let nearest = padding_keep_mask(3, PaddingPattern::NearestPadOnly);
        assert_eq!(nearest.iter().filter(|&&m| m).count(), 6);
        assert!(nearest[0] && nearest[4] && nearest[5]);
        assert!(!nearest[6]);

        let nopad = padding_keep_mask(3, PaddingPattern::NoPad);
        assert_eq!(nopad.iter().filter(|&&m| m).count(), 5);

        let alone = padding_keep_mask(3, PaddingPattern::NearestPadAlone);
        assert_eq!(kept_indices(&alone), vec![0, 5]);
    }

    #[test]
    fn retained_pads_come_from_prompt_sequence() {
        let v = test_vocab();
        let full_t = tokenize("a white sheep and a red car", &v).unwrap();
        let span_t = tokenize("a red car", &v).unwrap();
        let full = seq_from_fn(full_t, |r, c| (r * 10 + c) as f64);
        let span_enc = seq_from_fn(span_t, |r, c| -1.0 * (r * 10 + c) as f64);
        let span = ConceptSpan { text: "a red car".into(), token_start: 5, token_end: 8 };
        let realigned = realign(&full, &span_enc, &span).unwrap();
        for pattern in [PaddingPattern::Full, PaddingPattern::NearestPadOnly] {
            let (seq, mask) = apply_padding_pattern(&realigned, pattern);
            for (i, &keep) in mask.iter().enumerate() {
                if keep && i > realigned.content_len() + 1 {
                    assert_eq!(seq.data().row(i), full.data().row(i));
                }
            }
        }
    }
}
