//! Sequence labeling: the feature stack feeds a relative-position
//! transformer encoder (un-scaled attention) whose per-token states project
//! to tag emissions; a linear-chain CRF with Viterbi decoding sits on top.

pub mod crf;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::conll::LabeledSentence;
use crate::error::{Error, Result};
use crate::features::{
    self, document, ContextVectorFile, FallbackContext, FeatureConfig, IntNet, Level,
    SentenceAttention, TokenFeatures, VectorFile,
};
use crate::fusion::{CandidateRetriever, CandidateSet, FusionConfig, FusionLayer};
use crate::kg::{CandidateIndex, TripleStore};
use crate::kge::KgeModel;
use crate::nn::{Linear, TransformerStack};
use crate::rng::Rng;
use crate::tags::{self, Scheme};
use crate::tensor::{stack, Bound, Optimizer, OptimizerKind, ParamSet, Tape, Tensor, Var};
use crate::vocab::{CharVocab, WordVocab};

pub use crf::{enumerate_paths, Crf, TagLattice, TagSet, PINNED_SCORE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub fc_dropout: f64,
    pub attn_dropout: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for NerConfig {
    fn default() -> Self {
        NerConfig {
            layers: 2,
            heads: 8,
            head_dim: 64,
            fc_dropout: 0.40,
            attn_dropout: 0.15,
            learning_rate: 0.001,
            momentum: 0.9,
            epochs: 100,
            batch_size: 16,
            clip_norm: 5.0,
        }
    }
}

impl NerConfig {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::config("ner: layers/heads/head_dim must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("ner: batch_size must be positive"));
        }
        Ok(())
    }

    pub fn toy() -> Self {
        NerConfig {
            layers: 1,
            heads: 2,
            head_dim: 16,
            fc_dropout: 0.0,
            attn_dropout: 0.0,
            learning_rate: 0.02,
            momentum: 0.9,
            epochs: 60,
            batch_size: 8,
            clip_norm: 5.0,
        }
    }
}

/// Input projection, transformer stack, and emission head.
#[derive(Debug, Clone)]
pub struct NerEncoder {
    pub proj: Linear,
    pub stack: TransformerStack,
    pub emit: Linear,
}

impl NerEncoder {
    pub fn new(feature_width: usize, tags: usize, config: &NerConfig) -> Self {
        NerEncoder {
            proj: Linear::new("ner.proj", feature_width, config.model_dim()),
            stack: TransformerStack::new(
                "ner",
                config.layers,
                config.heads,
                config.head_dim,
                config.attn_dropout,
                config.fc_dropout,
            ),
            emit: Linear::new("ner.emit", config.model_dim(), tags),
        }
    }

    pub fn register(&self, params: &mut ParamSet, rng: &mut Rng) {
        self.proj.register(params, rng);
        self.stack.register(params, rng);
        self.emit.register(params, rng);
    }

    /// `features: [n, F] -> emissions [n, m]`
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        feats: Var,
        pos_offset: i64,
    ) -> Result<Var> {
        let x = self.proj.forward(tape, bound, feats)?;
        let h = self.stack.forward(tape, bound, x, pos_offset)?;
        self.emit.forward(tape, bound, h)
    }

    /// Forward pass that also returns raw per-head attention scores.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        feats: Var,
        pos_offset: i64,
    ) -> Result<(Var, Vec<Tensor>)> {
        let x = self.proj.forward(tape, bound, feats)?;
        let (h, trace) = self.stack.forward_traced(tape, bound, x, pos_offset)?;
        let e = self.emit.forward(tape, bound, h)?;
        Ok((e, trace))
    }
}

/// Knowledge resources needed whenever the global feature level is enabled.
#[derive(Clone, Copy)]
pub struct Knowledge<'a> {
    pub store: &'a TripleStore,
    pub index: &'a CandidateIndex,
}

/// Candidate pairs of one token with the fusion weight node, when any.
type FusionTrace = (Vec<(u32, u32)>, Option<Var>);

/// Per-sentence inputs resolved before the forward pass.
struct SentenceInputs<'a> {
    ctx_rows: Option<&'a Tensor>,
    doc_memory: Option<&'a document::DocumentMemory>,
    candidates: Option<&'a HashMap<String, CandidateSet>>,
}

/// Attribution of one knowledge candidate to a token.
#[derive(Debug, Clone, Serialize)]
pub struct CandidateAttribution {
    pub entity: String,
    pub relation: String,
    pub weight: f64,
}

/// One decoded token with its knowledge attributions.
#[derive(Debug, Clone, Serialize)]
pub struct TokenTagging {
    pub token: String,
    pub tag: String,
    pub candidates: Vec<CandidateAttribution>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub dev_f1: Vec<f64>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
}

/// The trained sequence model: trainable parameters plus the frozen
/// graph-embedding model used to encode knowledge candidates.
#[derive(Debug)]
pub struct NerModel {
    pub ner_config: NerConfig,
    pub feature_config: FeatureConfig,
    pub fusion_config: FusionConfig,
    pub io_scheme: Scheme,
    pub word_vocab: WordVocab,
    pub char_vocab: CharVocab,
    pub crf: Crf,
    pub params: ParamSet,
    pub kge: Option<KgeModel>,
    word_dim: usize,
    context_dim: usize,
    intnet: Option<IntNet>,
    fallback: Option<FallbackContext>,
    sent_proj: Option<Linear>,
    sent_attn: Option<SentenceAttention>,
    fusion: Option<FusionLayer>,
    pub encoder: NerEncoder,
}

impl NerModel {
    /// Assemble a fresh model for a BIOES-converted training corpus.
    /// `context_file_dim` switches the context provider to precomputed
    /// vectors of that width; otherwise the trainable fallback encoder is
    /// used. `kge` must be present when the global level is enabled.
    pub fn build(
        config: &Config,
        train: &[LabeledSentence],
        vectors: Option<&VectorFile>,
        context_file_dim: Option<usize>,
        kge: Option<KgeModel>,
        seed: u64,
    ) -> Result<NerModel> {
        let types = tags::collect_types(train);
        if types.is_empty() {
            return Err(Error::data("training corpus has no entity types"));
        }
        let word_vocab =
            WordVocab::build(train.iter().flat_map(|s| s.tokens.iter().map(String::as_str)));
        let char_vocab =
            CharVocab::build(train.iter().flat_map(|s| s.tokens.iter().map(String::as_str)));
        let word_dim = vectors.map(VectorFile::dim).unwrap_or(config.features.word_dim);
        let context_dim = context_file_dim.unwrap_or(config.features.context_dim);
        let use_fallback =
            config.features.levels.contains(Level::Context) && context_file_dim.is_none();
        Self::construct(
            config,
            &types,
            word_vocab,
            char_vocab,
            word_dim,
            context_dim,
            use_fallback,
            vectors,
            kge,
            seed,
        )
    }

    /// The structural constructor shared by fresh builds and checkpoint
    /// restores.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn construct(
        config: &Config,
        types: &[String],
        word_vocab: WordVocab,
        char_vocab: CharVocab,
        word_dim: usize,
        context_dim: usize,
        use_fallback: bool,
        vectors: Option<&VectorFile>,
        kge: Option<KgeModel>,
        seed: u64,
    ) -> Result<NerModel> {
        config.ner.validate()?;
        config.features.validate()?;
        let levels = config.features.levels;
        if levels.contains(Level::Global) && kge.is_none() {
            return Err(Error::config(
                "global feature level requires a trained graph-embedding model",
            ));
        }
        let crf = Crf::new(TagSet::new(types));

        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        let needs_words =
            levels.contains(Level::Word) || levels.contains(Level::Document) || use_fallback;
        let needs_chars = levels.contains(Level::Char) || use_fallback;

        if needs_words {
            let mut table =
                Tensor::gaussian(vec![word_vocab.table_rows(), word_dim], 0.1, &mut rng);
            if let Some(vf) = vectors {
                for (i, token) in word_vocab.tokens().iter().enumerate() {
                    if let Some(v) = vf.get(token) {
                        table.data_mut()[i * word_dim..(i + 1) * word_dim].copy_from_slice(v);
                    }
                }
            }
            params.insert("words", table);
        }

        let intnet = needs_chars.then(|| {
            let net = IntNet::new("char", config.features.intnet.clone());
            net.register(&mut params, &char_vocab, &mut rng);
            net
        });

        let fallback = if use_fallback {
            let in_dim = word_dim + config.features.intnet.hidden;
            let fb = FallbackContext::new(
                "ctx",
                in_dim,
                context_dim,
                config.features.context_heads,
                config.features.context_layers,
                config.ner.attn_dropout,
                config.ner.fc_dropout,
            )?;
            fb.register(&mut params, &mut rng);
            Some(fb)
        } else {
            None
        };

        let (sent_proj, sent_attn) = if levels.contains(Level::Sentence) {
            let proj = Linear::new("sent.proj", context_dim, config.features.label_attn_dim);
            proj.register(&mut params, &mut rng);
            let attn = SentenceAttention::new(
                "sent",
                config.features.label_attn_dim,
                crf.m(),
                config.features.label_attn_kernel,
            );
            attn.register(&mut params, &mut rng);
            (Some(proj), Some(attn))
        } else {
            (None, None)
        };

        let fusion = if levels.contains(Level::Global) {
            let cand_dim = kge.as_ref().unwrap().candidate_dim();
            let layer = FusionLayer::new("fusion", context_dim, cand_dim);
            layer.register(&mut params, &mut rng);
            Some(layer)
        } else {
            None
        };

        let mut model = NerModel {
            ner_config: config.ner.clone(),
            feature_config: config.features.clone(),
            fusion_config: config.fusion,
            io_scheme: config.data.scheme()?,
            word_vocab,
            char_vocab,
            crf,
            params,
            kge,
            word_dim,
            context_dim,
            intnet,
            fallback,
            sent_proj,
            sent_attn,
            fusion,
            encoder: NerEncoder::new(0, 0, &config.ner),
        };
        let width = model.feature_width();
        model.encoder = NerEncoder::new(width, model.crf.m(), &config.ner);
        model.encoder.register(&mut model.params, &mut rng);
        model
            .params
            .insert("crf.trans", model.crf.init_transitions());
        Ok(model)
    }

    pub fn word_dim(&self) -> usize {
        self.word_dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn uses_fallback_context(&self) -> bool {
        self.fallback.is_some()
    }

    /// Swap in parameters loaded from a checkpoint; names and shapes must
    /// match the constructed structure exactly.
    pub fn replace_params(&mut self, loaded: ParamSet) -> Result<()> {
        if loaded.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: checkpoint has {}, model needs {}",
                loaded.len(),
                self.params.len()
            )));
        }
        for (name, t) in self.params.iter() {
            match loaded.get(name) {
                Some(l) if l.shape() == t.shape() => {}
                Some(l) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name:?}: shape {:?} in checkpoint, {:?} expected",
                        l.shape(),
                        t.shape()
                    )))
                }
                None => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name:?} missing from checkpoint"
                    )))
                }
            }
        }
        self.params = loaded;
        Ok(())
    }

    /// Widths of the six feature slots; disabled levels are zero-width.
    pub fn feature_dims(&self) -> [usize; 6] {
        let levels = self.feature_config.levels;
        let global_dim = self.kge.as_ref().map(KgeModel::candidate_dim).unwrap_or(0);
        [
            if levels.contains(Level::Word) { self.word_dim } else { 0 },
            if levels.contains(Level::Char) { self.feature_config.intnet.hidden } else { 0 },
            if levels.contains(Level::Context) { self.context_dim } else { 0 },
            if levels.contains(Level::Sentence) { self.feature_config.label_attn_dim } else { 0 },
            if levels.contains(Level::Document) { self.context_dim } else { 0 },
            if levels.contains(Level::Global) { global_dim } else { 0 },
        ]
    }

    pub fn feature_width(&self) -> usize {
        self.feature_dims().iter().sum()
    }

    fn word_ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.word_vocab.id_or_unk(t)).collect()
    }

    /// Build the `[n, F]` feature matrix for one sentence plus the per-token
    /// fusion attributions.
    fn sentence_features(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[String],
        inputs: &SentenceInputs,
    ) -> Result<(Var, Vec<FusionTrace>)> {
        let levels = self.feature_config.levels;
        let n = tokens.len();
        assert!(n >= 1, "empty sentence");

        let word_mat = if self.params.contains("words") {
            let ids = self.word_ids(tokens);
            Some(tape.select_rows(bound.var("words"), &ids)?)
        } else {
            None
        };

        let char_mat = match &self.intnet {
            Some(net) => {
                let rows: Vec<Var> = tokens
                    .iter()
                    .map(|t| net.encode_word(tape, bound, &self.char_vocab, t))
                    .collect::<Result<_>>()?;
                Some(tape.stack_rows(&rows)?)
            }
            None => None,
        };

        let ctx_mat = if levels.contains(Level::Context) {
            match (&self.fallback, inputs.ctx_rows) {
                (Some(fb), _) => {
                    let wc = tape.concat_cols(&[word_mat.unwrap(), char_mat.unwrap()])?;
                    Some(fb.forward(tape, bound, wc)?)
                }
                (None, Some(rows)) => Some(tape.constant(rows.clone())),
                (None, None) => {
                    return Err(Error::config(
                        "context level uses precomputed vectors but none were supplied",
                    ))
                }
            }
        } else {
            None
        };

        let sentence_vec = match (&self.sent_proj, &self.sent_attn) {
            (Some(proj), Some(attn)) => {
                let projected = proj.forward(tape, bound, ctx_mat.unwrap())?;
                let (s, _alpha) = attn.forward(tape, bound, projected)?;
                Some(s)
            }
            _ => None,
        };

        let doc_reads = if levels.contains(Level::Document) {
            let memory = inputs.doc_memory.ok_or_else(|| {
                Error::config("document level enabled but no document memory supplied")
            })?;
            let keys = document::memory_keys(tape, bound.var("words"), memory)?;
            let wm = word_mat.unwrap();
            let mut reads = Vec::with_capacity(n);
            for i in 0..n {
                let row = tape.select_row(wm, i)?;
                let (read, _w) = document::memory_read(tape, bound, keys, memory, row)?;
                reads.push(read);
            }
            Some(reads)
        } else {
            None
        };

        let mut fusion_info: Vec<FusionTrace> = vec![(Vec::new(), None); n];
        let global_vecs = match &self.fusion {
            Some(layer) => {
                let cands = inputs.candidates.ok_or_else(|| {
                    Error::config("global level enabled but no candidate sets supplied")
                })?;
                let cm = ctx_mat.unwrap();
                let mut out = Vec::with_capacity(n);
                for (i, token) in tokens.iter().enumerate() {
                    let set = cands.get(token).ok_or_else(|| {
                        Error::config(format!("no candidate set precomputed for {token:?}"))
                    })?;
                    let query = tape.select_row(cm, i)?;
                    let (g, w) = layer.fuse(tape, bound, query, set.encodings.as_ref())?;
                    fusion_info[i] = (set.pairs.clone(), w);
                    out.push(g);
                }
                Some(out)
            }
            None => None,
        };

        let mut token_rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut parts: Vec<Var> = Vec::with_capacity(6);
            if levels.contains(Level::Word) {
                parts.push(tape.select_row(word_mat.unwrap(), i)?);
            }
            if levels.contains(Level::Char) {
                parts.push(tape.select_row(char_mat.unwrap(), i)?);
            }
            if levels.contains(Level::Context) {
                parts.push(tape.select_row(ctx_mat.unwrap(), i)?);
            }
            if let Some(s) = sentence_vec {
                parts.push(s);
            }
            if let Some(reads) = &doc_reads {
                parts.push(reads[i]);
            }
            if let Some(globals) = &global_vecs {
                parts.push(globals[i]);
            }
            token_rows.push(tape.concat(&parts)?);
        }
        let feats = tape.stack_rows(&token_rows)?;
        Ok((feats, fusion_info))
    }

    fn sentence_emissions(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[String],
        inputs: &SentenceInputs,
    ) -> Result<(Var, Vec<FusionTrace>)> {
        let (feats, fusion_info) = self.sentence_features(tape, bound, tokens, inputs)?;
        let emissions = self.encoder.forward(tape, bound, feats, 0)?;
        Ok((emissions, fusion_info))
    }

    fn gold_ids(&self, sent: &LabeledSentence) -> Result<Vec<usize>> {
        sent.tags.iter().map(|t| self.crf.tags.id(t)).collect()
    }

    fn sentence_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        sent: &LabeledSentence,
        inputs: &SentenceInputs,
    ) -> Result<Var> {
        let (emissions, _) = self.sentence_emissions(tape, bound, &sent.tokens, inputs)?;
        let gold = self.gold_ids(sent)?;
        self.crf.nll_on_tape(tape, bound.var("crf.trans"), emissions, &gold)
    }

    /// Context vectors for one sentence as plain data (evaluation mode).
    fn detached_context(
        &self,
        tokens: &[String],
        ctx_rows: Option<&Tensor>,
    ) -> Result<Vec<Vec<f64>>> {
        if let Some(rows) = ctx_rows {
            return Ok((0..rows.shape()[0]).map(|i| rows.row(i).to_vec()).collect());
        }
        let fb = self.fallback.as_ref().expect("fallback provider");
        let mut tape = Tape::new(0, false);
        let bound = tape.bind(&self.params);
        let ids = self.word_ids(tokens);
        let word_mat = tape.select_rows(bound.var("words"), &ids)?;
        let rows: Vec<Var> = tokens
            .iter()
            .map(|t| {
                self.intnet
                    .as_ref()
                    .expect("intnet exists with fallback")
                    .encode_word(&mut tape, &bound, &self.char_vocab, t)
            })
            .collect::<Result<_>>()?;
        let char_mat = tape.stack_rows(&rows)?;
        let wc = tape.concat_cols(&[word_mat, char_mat])?;
        let ctx = fb.forward(&mut tape, &bound, wc)?;
        let t = tape.value(ctx);
        Ok((0..tokens.len()).map(|i| t.row(i).to_vec()).collect())
    }

    /// Key-value memories per document, from detached contextual vectors.
    pub fn build_doc_memories(
        &self,
        sentences: &[LabeledSentence],
        ctx_file: Option<&ContextVectorFile>,
    ) -> Result<HashMap<usize, document::DocumentMemory>> {
        if !self.feature_config.levels.contains(Level::Document) {
            return Ok(HashMap::new());
        }
        let mut per_doc: HashMap<usize, Vec<(String, Vec<f64>)>> = HashMap::new();
        for (si, sent) in sentences.iter().enumerate() {
            let ctx_rows = match ctx_file {
                Some(f) => Some(self.context_rows_from_file(f, si, sent.len())?),
                None => None,
            };
            let vectors = self.detached_context(&sent.tokens, ctx_rows.as_ref())?;
            let entry = per_doc.entry(sent.doc_id).or_default();
            for (token, v) in sent.tokens.iter().zip(vectors) {
                entry.push((token.clone(), v));
            }
        }
        let mut memories = HashMap::new();
        for (doc, tokens) in per_doc {
            memories.insert(
                doc,
                document::DocumentMemory::build(tokens, |t| self.word_vocab.id_or_unk(t))?,
            );
        }
        Ok(memories)
    }

    fn context_rows_from_file(
        &self,
        file: &ContextVectorFile,
        sentence: usize,
        len: usize,
    ) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = (0..len)
            .map(|t| file.get(sentence, t).map(<[f64]>::to_vec))
            .collect::<Result<_>>()?;
        stack(&rows)
    }

    /// Precompute candidate sets (shortlist + frozen encodings) for a token
    /// collection. Requires the global level.
    pub fn precompute_candidates<'a>(
        &self,
        tokens: impl IntoIterator<Item = &'a str>,
        knowledge: Knowledge,
    ) -> Result<HashMap<String, CandidateSet>> {
        let kge = self
            .kge
            .as_ref()
            .ok_or_else(|| Error::config("candidate encoding needs the graph-embedding model"))?;
        let retriever =
            CandidateRetriever::new(knowledge.store, knowledge.index, kge, self.fusion_config);
        let mut out = HashMap::new();
        for token in tokens {
            if !out.contains_key(token) {
                out.insert(token.to_string(), retriever.retrieve(token)?);
            }
        }
        Ok(out)
    }

    /// Decode one corpus to BIOES tag-id sequences (evaluation mode).
    pub fn decode(
        &self,
        sentences: &[LabeledSentence],
        ctx_file: Option<&ContextVectorFile>,
        knowledge: Option<Knowledge>,
    ) -> Result<Vec<Vec<usize>>> {
        let candidates = match (&self.fusion, knowledge) {
            (Some(_), Some(k)) => Some(self.precompute_candidates(
                sentences
                    .iter()
                    .flat_map(|s| s.tokens.iter().map(String::as_str)),
                k,
            )?),
            (Some(_), None) => {
                return Err(Error::config(
                    "this model uses the global level; supply the triple store",
                ))
            }
            _ => None,
        };
        self.decode_with(sentences, ctx_file, candidates.as_ref())
    }

    /// `decode` against an already-built candidate map (must cover every
    /// token when the global level is on).
    pub fn decode_with(
        &self,
        sentences: &[LabeledSentence],
        ctx_file: Option<&ContextVectorFile>,
        candidates: Option<&HashMap<String, CandidateSet>>,
    ) -> Result<Vec<Vec<usize>>> {
        let memories = self.build_doc_memories(sentences, ctx_file)?;
        let trans = self.params.get("crf.trans").unwrap();
        let mut out = Vec::with_capacity(sentences.len());
        for (si, sent) in sentences.iter().enumerate() {
            let ctx_rows = match ctx_file {
                Some(f) => Some(self.context_rows_from_file(f, si, sent.len())?),
                None => None,
            };
            let inputs = SentenceInputs {
                ctx_rows: ctx_rows.as_ref(),
                doc_memory: memories.get(&sent.doc_id),
                candidates,
            };
            let mut tape = Tape::new(0, false);
            let bound = tape.bind(&self.params);
            let (emissions, _) =
                self.sentence_emissions(&mut tape, &bound, &sent.tokens, &inputs)?;
            let lattice = TagLattice::new(tape.value(emissions).clone())?;
            out.push(self.crf.viterbi(&lattice, trans));
        }
        Ok(out)
    }

    /// Predicted tags in the model's input/output scheme.
    pub fn predict_tags(
        &self,
        sentences: &[LabeledSentence],
        ctx_file: Option<&ContextVectorFile>,
        knowledge: Option<Knowledge>,
    ) -> Result<Vec<Vec<String>>> {
        let decoded = self.decode(sentences, ctx_file, knowledge)?;
        decoded
            .into_iter()
            .map(|ids| {
                let bioes: Vec<String> = ids
                    .iter()
                    .map(|&id| self.crf.tags.name(id).to_string())
                    .collect();
                tags::convert_tags(&bioes, Scheme::Bioes, self.io_scheme)
            })
            .collect()
    }

    /// Decode with per-token knowledge attributions, for inspection.
    pub fn predict_detailed(
        &self,
        sentences: &[LabeledSentence],
        ctx_file: Option<&ContextVectorFile>,
        knowledge: Option<Knowledge>,
    ) -> Result<Vec<Vec<TokenTagging>>> {
        let tags = self.predict_tags(sentences, ctx_file, knowledge)?;
        let memories = self.build_doc_memories(sentences, ctx_file)?;
        let candidates = match (&self.fusion, knowledge) {
            (Some(_), Some(k)) => Some(self.precompute_candidates(
                sentences
                    .iter()
                    .flat_map(|s| s.tokens.iter().map(String::as_str)),
                k,
            )?),
            _ => None,
        };
        let mut out = Vec::with_capacity(sentences.len());
        for (si, sent) in sentences.iter().enumerate() {
            let ctx_rows = match ctx_file {
                Some(f) => Some(self.context_rows_from_file(f, si, sent.len())?),
                None => None,
            };
            let inputs = SentenceInputs {
                ctx_rows: ctx_rows.as_ref(),
                doc_memory: memories.get(&sent.doc_id),
                candidates: candidates.as_ref(),
            };
            let mut tape = Tape::new(0, false);
            let bound = tape.bind(&self.params);
            let (_, fusion_info) =
                self.sentence_emissions(&mut tape, &bound, &sent.tokens, &inputs)?;
            let mut tagged = Vec::with_capacity(sent.len());
            for (t, token) in sent.tokens.iter().enumerate() {
                let mut attributions = Vec::new();
                if let Some(k) = knowledge {
                    let (pairs, weights) = &fusion_info[t];
                    if let Some(w) = weights {
                        let wv = tape.value(*w).data();
                        for (&(e, r), &weight) in pairs.iter().zip(wv) {
                            attributions.push(CandidateAttribution {
                                entity: k.store.entity_vocab.name(e).to_string(),
                                relation: k.store.relation_vocab.name(r).to_string(),
                                weight,
                            });
                        }
                    }
                }
                tagged.push(TokenTagging {
                    token: token.clone(),
                    tag: tags[si][t].clone(),
                    candidates: attributions,
                });
            }
            out.push(tagged);
        }
        Ok(out)
    }

    /// Materialized per-token features for sentence `sentence_index` of a
    /// corpus (evaluation mode). The whole corpus is needed so the
    /// document-level memory covers the containing document.
    pub fn token_features(
        &self,
        sentences: &[LabeledSentence],
        sentence_index: usize,
        ctx_file: Option<&ContextVectorFile>,
        knowledge: Option<Knowledge>,
    ) -> Result<Vec<TokenFeatures>> {
        let sent = sentences
            .get(sentence_index)
            .ok_or_else(|| Error::data(format!("sentence {sentence_index} out of range")))?;
        let memories = self.build_doc_memories(sentences, ctx_file)?;
        let candidates = match (&self.fusion, knowledge) {
            (Some(_), Some(k)) => Some(
                self.precompute_candidates(sent.tokens.iter().map(String::as_str), k)?,
            ),
            _ => None,
        };
        let ctx_rows = match ctx_file {
            Some(f) => Some(self.context_rows_from_file(f, sentence_index, sent.len())?),
            None => None,
        };
        let inputs = SentenceInputs {
            ctx_rows: ctx_rows.as_ref(),
            doc_memory: memories.get(&sent.doc_id),
            candidates: candidates.as_ref(),
        };
        let mut tape = Tape::new(0, false);
        let bound = tape.bind(&self.params);
        let (feats, _) = self.sentence_features(&mut tape, &bound, &sent.tokens, &inputs)?;
        let dims = self.feature_dims();
        let values = tape.value(feats);
        let mut out = Vec::with_capacity(sent.len());
        for i in 0..sent.len() {
            let row = values.row(i);
            let mut offset = 0;
            let parts: [Vec<f64>; 6] = std::array::from_fn(|slot| {
                let w = dims[slot];
                let part = row[offset..offset + w].to_vec();
                offset += w;
                part
            });
            out.push(features::assemble(parts, &dims)?);
        }
        Ok(out)
    }

    /// Span-level scores against gold tags (in the model's scheme).
    pub fn evaluate(
        &self,
        sentences: &[LabeledSentence],
        ctx_file: Option<&ContextVectorFile>,
        knowledge: Option<Knowledge>,
    ) -> Result<crate::eval::Prf> {
        let gold: Vec<Vec<tags::Span>> = sentences
            .iter()
            .map(|s| tags::extract_spans(&s.tags, self.io_scheme))
            .collect::<Result<_>>()?;
        let decoded = self.decode(sentences, ctx_file, knowledge)?;
        let pred: Vec<Vec<tags::Span>> = decoded
            .iter()
            .map(|ids| {
                let bioes: Vec<String> = ids
                    .iter()
                    .map(|&id| self.crf.tags.name(id).to_string())
                    .collect();
                tags::spans_from_bioes(&bioes)
            })
            .collect::<Result<_>>()?;
        Ok(crate::eval::span_f1(&gold, &pred))
    }
}

/// Resources handed to training. `'ctx` outlives the trainer (context
/// files are read every epoch); `'k` only needs to survive construction
/// (candidates are encoded up front).
pub struct TrainResources<'ctx, 'k> {
    pub vectors: Option<&'k VectorFile>,
    pub train_ctx: Option<&'ctx ContextVectorFile>,
    pub dev_ctx: Option<&'ctx ContextVectorFile>,
    pub knowledge: Option<Knowledge<'k>>,
    pub kge: Option<KgeModel>,
}

impl<'ctx, 'k> TrainResources<'ctx, 'k> {
    pub fn none() -> Self {
        TrainResources {
            vectors: None,
            train_ctx: None,
            dev_ctx: None,
            knowledge: None,
            kge: None,
        }
    }
}

/// Scale all gradients down when their global L2 norm exceeds `clip`.
/// Accumulation follows sorted parameter names so the result does not
/// depend on map iteration order.
fn clip_global_norm(grads: &mut HashMap<String, Tensor>, clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let mut names: Vec<&String> = grads.keys().collect();
    names.sort();
    let norm: f64 = names
        .iter()
        .map(|n| grads[*n].data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

/// Per-epoch training metrics.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_f1: Option<f64>,
}

/// Incremental trainer: SGD momentum on the CRF negative log likelihood,
/// summed per batch, with length-bucketed batches and best-dev-F1 retention.
/// `train_ner` drives it start to finish; the browser demo advances it a
/// few epochs at a time.
pub struct NerTrainer<'a> {
    model: NerModel,
    config: Config,
    train: Vec<LabeledSentence>,
    dev: Vec<LabeledSentence>,
    train_ctx: Option<&'a ContextVectorFile>,
    dev_ctx: Option<&'a ContextVectorFile>,
    candidates: Option<HashMap<String, CandidateSet>>,
    batches: Vec<Vec<usize>>,
    batch_order: Vec<usize>,
    rng: Rng,
    opt: Optimizer,
    report: TrainReport,
    best_params: Option<ParamSet>,
}

impl<'a> NerTrainer<'a> {
    pub fn new(
        config: &Config,
        train_raw: &[LabeledSentence],
        dev_raw: &[LabeledSentence],
        resources: TrainResources<'a, '_>,
        seed: u64,
    ) -> Result<Self> {
        let scheme = config.data.scheme()?;
        let train = tags::convert_scheme(train_raw, scheme, Scheme::Bioes)?;
        let dev = tags::convert_scheme(dev_raw, scheme, Scheme::Bioes)?;
        if train.is_empty() {
            return Err(Error::data("training corpus is empty"));
        }
        let levels = config.features.levels;
        if levels.contains(Level::Global) && resources.knowledge.is_none() {
            return Err(Error::config("global level requires a triple store and index"));
        }
        if levels.contains(Level::Context)
            && resources.train_ctx.is_some()
            && !dev.is_empty()
            && resources.dev_ctx.is_none()
        {
            return Err(Error::config(
                "precomputed context vectors supplied for train but not dev",
            ));
        }

        let model = NerModel::build(
            config,
            &train,
            resources.vectors,
            resources.train_ctx.map(ContextVectorFile::dim),
            resources.kge,
            seed,
        )?;

        let candidates = match (levels.contains(Level::Global), resources.knowledge) {
            (true, Some(k)) => Some(model.precompute_candidates(
                train
                    .iter()
                    .chain(dev.iter())
                    .flat_map(|s| s.tokens.iter().map(String::as_str)),
                k,
            )?),
            _ => None,
        };

        // length-bucketed batches over sentence indices
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.sort_by_key(|&i| (train[i].len(), i));
        let batches: Vec<Vec<usize>> = order
            .chunks(config.ner.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        let batch_order: Vec<usize> = (0..batches.len()).collect();

        Ok(NerTrainer {
            model,
            config: config.clone(),
            train,
            dev,
            train_ctx: resources.train_ctx,
            dev_ctx: resources.dev_ctx,
            candidates,
            batches,
            batch_order,
            rng: Rng::new(seed ^ 0x6e65725f7472),
            opt: Optimizer::new(
                OptimizerKind::sgd_momentum(config.ner.momentum),
                config.ner.learning_rate,
            ),
            report: TrainReport {
                train_loss: Vec::new(),
                dev_f1: Vec::new(),
                best_epoch: 0,
                best_dev_f1: f64::NEG_INFINITY,
            },
            best_params: None,
        })
    }

    pub fn model(&self) -> &NerModel {
        &self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.report.train_loss.len()
    }

    /// One full pass over the training data, followed by a dev evaluation
    /// when a dev set is present.
    pub fn epoch(&mut self) -> Result<EpochStats> {
        let epoch = self.epochs_done();
        // document memories are recomputed per epoch: with the fallback
        // provider the detached values track the moving encoder
        let memories = self.model.build_doc_memories(&self.train, self.train_ctx)?;
        self.rng.shuffle(&mut self.batch_order);
        let mut epoch_loss = 0.0;
        for &bi in &self.batch_order {
            let mut tape = Tape::new(self.rng.next_u64(), true);
            let bound = tape.bind(&self.model.params);
            let mut losses = Vec::with_capacity(self.batches[bi].len());
            for &si in &self.batches[bi] {
                let sent = &self.train[si];
                let ctx_rows = match self.train_ctx {
                    Some(f) => Some(self.model.context_rows_from_file(f, si, sent.len())?),
                    None => None,
                };
                let inputs = SentenceInputs {
                    ctx_rows: ctx_rows.as_ref(),
                    doc_memory: memories.get(&sent.doc_id),
                    candidates: self.candidates.as_ref(),
                };
                losses.push(self.model.sentence_loss(&mut tape, &bound, sent, &inputs)?);
            }
            let total = if losses.len() == 1 {
                losses[0]
            } else {
                let all = tape.concat(&losses)?;
                tape.sum_all(all)?
            };
            let loss_value = tape.value(total).scalar_value();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "ner training diverged at epoch {epoch}: loss {loss_value}"
                )));
            }
            epoch_loss += loss_value;
            let grads = tape.backward(total)?;
            let mut by_name = grads.for_params(&bound);
            self.model
                .crf
                .zero_pinned(by_name.get_mut("crf.trans").expect("crf bound"));
            clip_global_norm(&mut by_name, self.config.ner.clip_norm);
            self.opt.step(&mut self.model.params, &by_name)?;
        }
        let mean_loss = epoch_loss / self.train.len() as f64;
        self.report.train_loss.push(mean_loss);

        let dev_f1 = if self.dev.is_empty() {
            self.report.dev_f1.push(f64::NAN);
            None
        } else {
            let prf = self.model.evaluate_bioes_with(
                &self.dev,
                self.dev_ctx,
                self.candidates.as_ref(),
            )?;
            self.report.dev_f1.push(prf.f1);
            if prf.f1 > self.report.best_dev_f1 {
                self.report.best_dev_f1 = prf.f1;
                self.report.best_epoch = epoch;
                self.best_params = Some(self.model.params.clone());
            }
            Some(prf.f1)
        };
        Ok(EpochStats {
            epoch,
            mean_loss,
            dev_f1,
        })
    }

    /// Restore the best-dev parameters (when tracked) and hand the model
    /// back with the accumulated report.
    pub fn finish(mut self) -> (NerModel, TrainReport) {
        if let Some(best) = self.best_params.take() {
            self.model.params = best;
        }
        (self.model, self.report)
    }
}

/// Train for `config.ner.epochs` epochs. Fully determined by `seed`.
pub fn train_ner(
    config: &Config,
    train_raw: &[LabeledSentence],
    dev_raw: &[LabeledSentence],
    resources: TrainResources,
    seed: u64,
) -> Result<(NerModel, TrainReport)> {
    let mut trainer = NerTrainer::new(config, train_raw, dev_raw, resources, seed)?;
    for _ in 0..config.ner.epochs {
        trainer.epoch()?;
    }
    Ok(trainer.finish())
}

impl NerModel {
    /// Evaluate against gold sentences already in BIOES.
    pub fn evaluate_bioes(
        &self,
        sentences: &[LabeledSentence],
        ctx_file: Option<&ContextVectorFile>,
        knowledge: Option<Knowledge>,
    ) -> Result<crate::eval::Prf> {
        let decoded = self.decode(sentences, ctx_file, knowledge)?;
        self.score_decoded(sentences, &decoded)
    }

    /// `evaluate_bioes` against an already-built candidate map.
    pub fn evaluate_bioes_with(
        &self,
        sentences: &[LabeledSentence],
        ctx_file: Option<&ContextVectorFile>,
        candidates: Option<&HashMap<String, CandidateSet>>,
    ) -> Result<crate::eval::Prf> {
        let decoded = self.decode_with(sentences, ctx_file, candidates)?;
        self.score_decoded(sentences, &decoded)
    }

    fn score_decoded(
        &self,
        sentences: &[LabeledSentence],
        decoded: &[Vec<usize>],
    ) -> Result<crate::eval::Prf> {
        let gold: Vec<Vec<tags::Span>> = sentences
            .iter()
            .map(|s| tags::spans_from_bioes(&s.tags))
            .collect::<Result<_>>()?;
        let pred: Vec<Vec<tags::Span>> = decoded
            .iter()
            .map(|ids| {
                let bioes: Vec<String> = ids
                    .iter()
                    .map(|&id| self.crf.tags.name(id).to_string())
                    .collect();
                tags::spans_from_bioes(&bioes)
            })
            .collect::<Result<_>>()?;
        Ok(crate::eval::span_f1(&gold, &pred))
    }
}
