//! Two parallel feed-forward branches over the final encoder states: one
//! extracts language-agnostic semantic features, the other
//! language-specific linguistic features. Their sum is trained to
//! reconstruct the encoder states, and only the semantic part is handed to
//! the decoder.

use crate::autodiff::{Graph, Real, Var};
use crate::error::Result;
use crate::params::{ParamStore, ParamVars};
use crate::transformer::{EncoderOutput, FeedForward};

#[derive(Debug, Clone)]
pub struct Disentangler {
    pub semantic: FeedForward,
    pub language: FeedForward,
}

/// Branch outputs, each `[batch, len, d_model]`.
#[derive(Debug, Clone, Copy)]
pub struct DisentangledStates {
    pub semantic: Var,
    pub language: Var,
    pub original: Var,
}

impl Disentangler {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        d_model: usize,
        ffn_dim: usize,
    ) -> Self {
        Disentangler {
            semantic: FeedForward::new(
                store,
                seed,
                "disentangler.semantic",
                d_model,
                ffn_dim,
                d_model,
            ),
            language: FeedForward::new(
                store,
                seed,
                "disentangler.language",
                d_model,
                ffn_dim,
                d_model,
            ),
        }
    }

    pub fn disentangle<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        enc: &EncoderOutput,
    ) -> Result<DisentangledStates> {
        Ok(DisentangledStates {
            semantic: self.semantic.forward(g, p, enc.states)?,
            language: self.language.forward(g, p, enc.states)?,
            original: enc.states,
        })
    }
}

/// Cross-attention memory for the decoder: the semantic branch output when
/// the disentangler is present, otherwise the raw encoder states.
pub fn decoder_feed(enc: &EncoderOutput, states: Option<&DisentangledStates>) -> Var {
    match states {
        Some(s) => s.semantic,
        None => enc.states,
    }
}
