//! Funnel-shaped multi-kernel character CNN for word-shape features.
//!
//! Block 1 is a plain 1-wide convolution over the character embeddings.
//! Every later block runs one convolution per kernel size on the previous
//! block's output, concatenates the branches and feeds the result through a
//! linear layer with ReLU. A final max-pool over character positions yields
//! a fixed-size vector, so the output width is independent of word length.
//!
//! Character table row 0 is reserved for padding; trailing padding ids are
//! stripped before encoding, which makes the output invariant to them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Bound, ParamSet, Tape, Var};
use crate::vocab::CharVocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntNetConfig {
    pub depth: usize,
    pub kernel_sizes: Vec<usize>,
    pub char_emb_dim: usize,
    pub hidden: usize,
}

impl Default for IntNetConfig {
    fn default() -> Self {
        IntNetConfig {
            depth: 5,
            kernel_sizes: vec![3, 4, 5],
            char_emb_dim: 32,
            hidden: 16,
        }
    }
}

impl IntNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.kernel_sizes.is_empty() {
            return Err(Error::config(
                "intnet: depth and kernel_sizes must be non-empty",
            ));
        }
        Ok(())
    }
}

pub const PAD_ID: usize = 0;

/// Map a word to character-table ids: row 0 is PAD, real characters are
/// shifted by one, unknown characters use the vocabulary's UNK slot.
pub fn char_ids(vocab: &CharVocab, word: &str) -> Vec<usize> {
    vocab.encode(word).into_iter().map(|id| id + 1).collect()
}

#[derive(Debug, Clone)]
pub struct IntNet {
    pub name: String,
    pub config: IntNetConfig,
}

impl IntNet {
    pub fn new(name: impl Into<String>, config: IntNetConfig) -> Self {
        IntNet {
            name: name.into(),
            config,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.config.hidden
    }

    pub fn register(&self, params: &mut ParamSet, vocab: &CharVocab, rng: &mut Rng) {
        let c = &self.config;
        // +1 for the PAD row at index 0
        params.insert_gaussian(
            format!("{}.emb", self.name),
            vec![vocab.table_rows() + 1, c.char_emb_dim],
            0.1,
            rng,
        );
        params.insert_xavier(format!("{}.b0.w", self.name), c.char_emb_dim, c.hidden, rng);
        params.insert_zeros(format!("{}.b0.b", self.name), vec![c.hidden]);
        for blk in 1..c.depth {
            for &k in &c.kernel_sizes {
                params.insert_xavier(
                    format!("{}.b{blk}.k{k}.w", self.name),
                    k * c.hidden,
                    c.hidden,
                    rng,
                );
                params.insert_zeros(format!("{}.b{blk}.k{k}.b", self.name), vec![c.hidden]);
            }
            params.insert_xavier(
                format!("{}.b{blk}.ff.w", self.name),
                c.kernel_sizes.len() * c.hidden,
                c.hidden,
                rng,
            );
            params.insert_zeros(format!("{}.b{blk}.ff.b", self.name), vec![c.hidden]);
        }
    }

    /// Encode a character id sequence (ids per `char_ids`) to a fixed-size
    /// vector. Trailing PAD ids are stripped first.
    pub fn encode_ids(&self, tape: &mut Tape, bound: &Bound, ids: &[usize]) -> Result<Var> {
        let mut end = ids.len();
        while end > 0 && ids[end - 1] == PAD_ID {
            end -= 1;
        }
        if end == 0 {
            return Err(Error::data("intnet: empty character sequence"));
        }
        let ids = &ids[..end];
        let c = &self.config;

        let emb = tape.select_rows(bound.var(&format!("{}.emb", self.name)), ids)?;
        let w0_flat = bound.var(&format!("{}.b0.w", self.name));
        let w0 = tape.reshape(w0_flat, vec![1, c.char_emb_dim, c.hidden])?;
        let mut h = tape.conv1d_same(emb, w0, bound.var(&format!("{}.b0.b", self.name)))?;

        for blk in 1..c.depth {
            let mut branches = Vec::with_capacity(c.kernel_sizes.len());
            for &k in &c.kernel_sizes {
                let w_flat = bound.var(&format!("{}.b{blk}.k{k}.w", self.name));
                let w = tape.reshape(w_flat, vec![k, c.hidden, c.hidden])?;
                let b = bound.var(&format!("{}.b{blk}.k{k}.b", self.name));
                branches.push(tape.conv1d_same(h, w, b)?);
            }
            let cat = tape.concat_cols(&branches)?;
            let ff_w = bound.var(&format!("{}.b{blk}.ff.w", self.name));
            let ff_b = bound.var(&format!("{}.b{blk}.ff.b", self.name));
            let ff = tape.matmul(cat, ff_w)?;
            let ff = tape.add_bias(ff, ff_b)?;
            h = tape.relu(ff)?;
        }
        tape.max_axis0(h)
    }

    pub fn encode_word(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        vocab: &CharVocab,
        word: &str,
    ) -> Result<Var> {
        self.encode_ids(tape, bound, &char_ids(vocab, word))
    }
}
