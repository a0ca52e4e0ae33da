//! Per-token embedding sequences produced by the text encoder.

use crate::error::{Result, SdgError};
use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::vocab::{TokenSequence, SEQ_LEN};

/// An `l x c` matrix of token embeddings together with the token layout that
/// produced it. Row count is always the fixed sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence<S> {
    data: Mat<S>,
    source_tokens: TokenSequence,
}

impl<S: Scalar> EmbeddingSequence<S> {
    pub fn new(data: Mat<S>, source_tokens: TokenSequence) -> Result<Self> {
        if data.rows() != SEQ_LEN {
            return Err(SdgError::ShapeMismatch(format!(
                "embedding sequence has {} rows, expected {SEQ_LEN}",
                data.rows()
            )));
        }
        if !data.is_finite() {
            return Err(SdgError::ShapeMismatch(
                "embedding sequence contains non-finite values".into(),
            ));
        }
        Ok(EmbeddingSequence { data, source_tokens })
    }

    pub fn data(&self) -> &Mat<S> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Mat<S> {
        &mut self.data
    }

    pub fn source_tokens(&self) -> &TokenSequence {
        &self.source_tokens
    }

    pub fn embed_dim(&self) -> usize {
        self.data.cols()
    }

    pub fn content_len(&self) -> usize {
        self.source_tokens.content_len()
    }
}
