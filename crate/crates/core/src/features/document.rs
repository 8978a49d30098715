//! Key-value document memory.
//!
//! Every unique word type in a document is one memory slot: the key is the
//! type's word embedding and the value is the mean of the type's contextual
//! vectors over all its occurrences in the document. A token reads the
//! memory with its own word embedding as query; the read is a softmax
//! attention over key-query dot products times the values.
//!
//! Values are computed from a detached pass over the document, so per-token
//! reads only backpropagate through keys and queries (the word table).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{stack, Bound, Tape, Tensor, Var};

/// One document's memory: its unique word types (in first-appearance order),
/// their word-table ids, and the `[U, h]` value matrix.
#[derive(Debug, Clone)]
pub struct DocumentMemory {
    pub types: Vec<String>,
    pub type_ids: Vec<usize>,
    type_index: HashMap<String, usize>,
    pub values: Tensor,
}

impl DocumentMemory {
    /// `occurrences` maps each token of the document to its contextual
    /// vector; tokens are grouped by surface form to build the value matrix.
    pub fn build(
        tokens: impl IntoIterator<Item = (String, Vec<f64>)>,
        word_id_of: impl Fn(&str) -> usize,
    ) -> Result<Self> {
        let mut types: Vec<String> = Vec::new();
        let mut type_index: HashMap<String, usize> = HashMap::new();
        let mut sums: Vec<Vec<f64>> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for (token, vector) in tokens {
            let slot = *type_index.entry(token.clone()).or_insert_with(|| {
                types.push(token.clone());
                sums.push(vec![0.0; vector.len()]);
                counts.push(0);
                types.len() - 1
            });
            if sums[slot].len() != vector.len() {
                return Err(Error::Numeric(
                    "document memory: inconsistent contextual dimensions".into(),
                ));
            }
            for (s, v) in sums[slot].iter_mut().zip(&vector) {
                *s += v;
            }
            counts[slot] += 1;
        }
        if types.is_empty() {
            return Err(Error::data("document memory: empty document"));
        }
        let rows: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(sum, &c)| sum.into_iter().map(|v| v / c as f64).collect())
            .collect();
        let type_ids = types.iter().map(|t| word_id_of(t)).collect();
        Ok(DocumentMemory {
            types,
            type_ids,
            type_index,
            values: stack(&rows)?,
        })
    }

    pub fn slots(&self) -> usize {
        self.types.len()
    }

    pub fn slot_of(&self, token: &str) -> Option<usize> {
        self.type_index.get(token).copied()
    }
}

/// Key matrix for this memory on the current tape: the word-table rows of
/// every type. Built once per sentence and shared by all its tokens.
pub fn memory_keys(tape: &mut Tape, word_table: Var, memory: &DocumentMemory) -> Result<Var> {
    tape.select_rows(word_table, &memory.type_ids)
}

/// Attention read: `query` is the token's own word embedding `[w]`.
/// Returns the document vector `[h]` and the read weights `[U]`.
pub fn memory_read(
    tape: &mut Tape,
    _bound: &Bound,
    keys: Var,
    memory: &DocumentMemory,
    query: Var,
) -> Result<(Var, Var)> {
    let w = tape.value(query).numel();
    let q_col = tape.reshape(query, vec![w, 1])?;
    let scores = tape.matmul(keys, q_col)?;
    let scores = tape.reshape(scores, vec![memory.slots()])?;
    let weights = tape.softmax(scores)?;
    let w_row = tape.reshape(weights, vec![1, memory.slots()])?;
    let values = tape.constant(memory.values.clone());
    let read = tape.matmul(w_row, values)?;
    let h = memory.values.shape()[1];
    let read = tape.reshape(read, vec![h])?;
    Ok((read, weights))
}
