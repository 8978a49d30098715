//! Contextual representation providers.
//!
//! Either precomputed vectors from file (word pieces averaged per token at
//! load) or a small trainable transformer over the word+char features. The
//! fallback keeps the whole pipeline self-contained when no pretrained
//! vectors are available.

use super::vectors::ContextVectorFile;
use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerStack};
use crate::rng::Rng;
use crate::tensor::{Bound, ParamSet, Tape, Var};

/// Trainable fallback encoder: project `[word ; char]` features to the
/// context width, then run a small relative-attention transformer.
#[derive(Debug, Clone)]
pub struct FallbackContext {
    pub proj: Linear,
    pub encoder: TransformerStack,
    pub out_dim: usize,
}

impl FallbackContext {
    pub fn new(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        heads: usize,
        layers: usize,
        attn_dropout: f64,
        fc_dropout: f64,
    ) -> Result<Self> {
        if !out_dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "context: dim {out_dim} not divisible by {heads} heads"
            )));
        }
        Ok(FallbackContext {
            proj: Linear::new(format!("{name}.proj"), in_dim, out_dim),
            encoder: TransformerStack::new(
                name,
                layers,
                heads,
                out_dim / heads,
                attn_dropout,
                fc_dropout,
            ),
            out_dim,
        })
    }

    pub fn register(&self, params: &mut ParamSet, rng: &mut Rng) {
        self.proj.register(params, rng);
        self.encoder.register(params, rng);
    }

    /// `word_char: [n, in_dim] -> [n, out_dim]`
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, word_char: Var) -> Result<Var> {
        let projected = self.proj.forward(tape, bound, word_char)?;
        self.encoder.forward(tape, bound, projected, 0)
    }
}

/// Where contextual vectors come from for one run.
pub enum ContextProvider {
    /// Precomputed vectors keyed by (sentence index, token index).
    File(ContextVectorFile),
    /// Trainable encoder over the word+char features.
    Fallback(FallbackContext),
}

impl ContextProvider {
    pub fn dim(&self) -> usize {
        match self {
            ContextProvider::File(f) => f.dim(),
            ContextProvider::Fallback(f) => f.out_dim,
        }
    }

    pub fn is_fallback(&self) -> bool {
        matches!(self, ContextProvider::Fallback(_))
    }
}
