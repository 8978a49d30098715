//! Per-word global representation: attention over encoded candidate
//! triplets, queried by the word's contextual embedding.
//!
//! For a word with candidate encodings `I_1..I_n` (each `3d`-dimensional)
//! and contextual query `B_w`, the layer computes `Q = B_w W^q`,
//! `K_j = I_j W^k`, `V_j = I_j W^v`, scores `A_j = Q . K_j`, weights
//! `softmax(A / sqrt(3d))` and `g_w = sum_j w_j V_j`. A word with no
//! candidates gets the zero vector so downstream widths stay constant.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::Result;
use crate::kg::{shortlist, CandidateIndex, TripleStore};
use crate::kge::KgeModel;
use crate::rng::Rng;
use crate::tensor::{stack, Bound, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FusionConfig {
    /// Candidate entities kept per word.
    pub k1: usize,
    /// Relations kept per candidate set.
    pub k2: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { k1: 3, k2: 5 }
    }
}

/// Softmax over candidate scores scaled by `1/sqrt(3d)`; the pure form of
/// the weight computation used inside `fuse`.
pub fn attention_weights(scores: &[f64], candidate_dim: usize) -> Vec<f64> {
    let scale = 1.0 / (candidate_dim as f64).sqrt();
    let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
    let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// The trainable projections. `query_dim` is the contextual embedding width
/// `h`; `candidate_dim` is `3d`. The key/value projections are square so the
/// parameter count does not depend on how many candidates a word has.
#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub name: String,
    pub query_dim: usize,
    pub candidate_dim: usize,
}

impl FusionLayer {
    pub fn new(name: impl Into<String>, query_dim: usize, candidate_dim: usize) -> Self {
        FusionLayer {
            name: name.into(),
            query_dim,
            candidate_dim,
        }
    }

    pub fn register(&self, params: &mut ParamSet, rng: &mut Rng) {
        params.insert_xavier(
            format!("{}.wq", self.name),
            self.query_dim,
            self.candidate_dim,
            rng,
        );
        params.insert_xavier(
            format!("{}.wk", self.name),
            self.candidate_dim,
            self.candidate_dim,
            rng,
        );
        params.insert_xavier(
            format!("{}.wv", self.name),
            self.candidate_dim,
            self.candidate_dim,
            rng,
        );
    }

    /// Fuse one word's candidates. `candidates` is an `[n, 3d]` matrix of
    /// frozen encodings; `n == 0` is represented by `None` and yields zeros.
    /// Returns the fused vector and, for inspection, the weight vector node.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        query: Var,
        candidates: Option<&Tensor>,
    ) -> Result<(Var, Option<Var>)> {
        let encodings = match candidates {
            None => {
                let zero = tape.constant(Tensor::zeros(vec![self.candidate_dim]));
                return Ok((zero, None));
            }
            Some(t) => t,
        };
        let n = encodings.shape()[0];
        let i_mat = tape.constant(encodings.clone());
        let keys = tape.matmul(i_mat, bound.var(&format!("{}.wk", self.name)))?;
        let values = tape.matmul(i_mat, bound.var(&format!("{}.wv", self.name)))?;
        let q_row = tape.reshape(query, vec![1, self.query_dim])?;
        let q = tape.matmul(q_row, bound.var(&format!("{}.wq", self.name)))?;
        let q_col = tape.transpose(q)?;
        let scores = tape.matmul(keys, q_col)?;
        let scores = tape.reshape(scores, vec![n])?;
        let scaled = tape.scale(scores, 1.0 / (self.candidate_dim as f64).sqrt())?;
        let weights = tape.softmax(scaled)?;
        let w_row = tape.reshape(weights, vec![1, n])?;
        let fused = tape.matmul(w_row, values)?;
        let fused = tape.reshape(fused, vec![self.candidate_dim])?;
        Ok((fused, Some(weights)))
    }
}

/// Shortlists candidates for a word and encodes them with the frozen
/// graph-embedding model, memoizing per word string.
pub struct CandidateRetriever<'a> {
    pub store: &'a TripleStore,
    pub index: &'a CandidateIndex,
    pub kge: &'a KgeModel,
    pub config: FusionConfig,
    cache: RefCell<HashMap<String, CandidateSet>>,
}

/// Candidate pairs with their stacked encodings; empty pair list means no
/// matrix.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub pairs: Vec<(u32, u32)>,
    pub encodings: Option<Tensor>,
}

impl<'a> CandidateRetriever<'a> {
    pub fn new(
        store: &'a TripleStore,
        index: &'a CandidateIndex,
        kge: &'a KgeModel,
        config: FusionConfig,
    ) -> Self {
        CandidateRetriever {
            store,
            index,
            kge,
            config,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn retrieve(&self, word: &str) -> Result<CandidateSet> {
        if let Some(hit) = self.cache.borrow().get(word) {
            return Ok(hit.clone());
        }
        let er = shortlist(self.index, self.store, word, self.config.k1, self.config.k2);
        let set = if er.pairs.is_empty() {
            CandidateSet {
                pairs: Vec::new(),
                encodings: None,
            }
        } else {
            let mut rows = Vec::with_capacity(er.pairs.len());
            for &(e, r) in &er.pairs {
                let entity = self.store.entity_vocab.name(e);
                let relation = self.store.relation_vocab.name(r);
                rows.push(self.kge.encode_candidate(entity, relation)?);
            }
            CandidateSet {
                pairs: er.pairs,
                encodings: Some(stack(&rows)?),
            }
        };
        self.cache.borrow_mut().insert(word.to_string(), set.clone());
        Ok(set)
    }
}

/// The fused token produced by `fuse_sentence`.
pub struct FusedToken {
    pub global: Var,
    pub pairs: Vec<(u32, u32)>,
    pub weights: Option<Var>,
}

/// Per-token global vectors for a sentence: shortlist, encode, fuse.
/// Tokens without knowledge-graph matches get zero vectors.
pub fn fuse_sentence(
    tape: &mut Tape,
    bound: &Bound,
    layer: &FusionLayer,
    retriever: &CandidateRetriever,
    tokens: &[String],
    queries: &[Var],
) -> Result<Vec<FusedToken>> {
    assert_eq!(tokens.len(), queries.len());
    let mut out = Vec::with_capacity(tokens.len());
    for (token, &query) in tokens.iter().zip(queries) {
        let set = retriever.retrieve(token)?;
        let (global, weights) = layer.fuse(tape, bound, query, set.encodings.as_ref())?;
        out.push(FusedToken {
            global,
            pairs: set.pairs,
            weights,
        });
    }
    Ok(out)
}
