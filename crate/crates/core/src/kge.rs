//! Contextualized knowledge-graph embeddings trained by masked object
//! prediction.
//!
//! Each triple becomes the token sequence `subject -> relation -> [MASK]`
//! with the object as the prediction label. Tokens embed as the
//! concatenation of a word vector and a character-convolution vector
//! (separate character encoders for entities and relations), plus a learned
//! per-position vector; a relative-position transformer encodes the
//! three-token context and a linear-plus-softmax head predicts the object
//! over the entity vocabulary. After training the classification head is
//! dropped and the three last-layer hidden states serve as the candidate
//! triplet encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::TripleStore;
use crate::nn::TransformerStack;
use crate::rng::Rng;
use crate::tensor::{Bound, Optimizer, OptimizerKind, ParamSet, Tape, Tensor, Var};
use crate::vocab::{CharVocab, WordVocab};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KgeConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_emb_dim: usize,
    pub attn_dropout: f64,
    pub fc_dropout: f64,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for KgeConfig {
    fn default() -> Self {
        KgeConfig {
            layers: 2,
            heads: 4,
            head_dim: 128,
            word_dim: 384,
            char_dim: 128,
            char_emb_dim: 32,
            attn_dropout: 0.25,
            fc_dropout: 0.40,
            learning_rate: 0.0005,
            epochs: 100,
        }
    }
}

impl KgeConfig {
    /// Encoder width: element embeddings feed the encoder directly, so the
    /// hidden size is exactly `word_dim + char_dim`.
    pub fn hidden(&self) -> usize {
        self.word_dim + self.char_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads * self.head_dim != self.hidden() {
            return Err(Error::config(format!(
                "kge: heads*head_dim = {} must equal word_dim+char_dim = {}",
                self.heads * self.head_dim,
                self.hidden()
            )));
        }
        if self.layers == 0 || self.heads == 0 {
            return Err(Error::config("kge: layers and heads must be positive"));
        }
        Ok(())
    }

    /// A small configuration for closed toy graphs.
    pub fn toy() -> Self {
        KgeConfig {
            layers: 2,
            heads: 4,
            head_dim: 6,
            word_dim: 16,
            char_dim: 8,
            char_emb_dim: 12,
            attn_dropout: 0.0,
            fc_dropout: 0.0,
            learning_rate: 0.003,
            epochs: 200,
        }
    }
}

/// A masked graph context: `(subject, relation, [MASK])` with the object as
/// gold label. Position 3 is always the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskedInstance {
    pub subject: u32,
    pub relation: u32,
    pub label: u32,
}

/// One instance per triple, in file order. Duplicate triples stay duplicated.
pub fn build_training_set(store: &TripleStore) -> Vec<MaskedInstance> {
    store
        .triples
        .iter()
        .map(|t| MaskedInstance {
            subject: store.entity_vocab.id(&t.subject).expect("subject interned"),
            relation: store.relation_vocab.id(&t.relation).expect("relation interned"),
            label: store.entity_vocab.id(&t.object).expect("object interned"),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Entity,
    Relation,
    Mask,
}

#[derive(Debug, Clone)]
pub struct KgeModel {
    pub config: KgeConfig,
    pub entities: WordVocab,
    pub relations: WordVocab,
    pub entity_chars: CharVocab,
    pub relation_chars: CharVocab,
    pub params: ParamSet,
    encoder: TransformerStack,
}

impl KgeModel {
    /// Fresh model with seeded initialization over the store's vocabularies.
    pub fn new(store: &TripleStore, config: KgeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let entities = WordVocab::build(store.entity_vocab.names().iter().map(String::as_str));
        let relations = WordVocab::build(store.relation_vocab.names().iter().map(String::as_str));
        let entity_chars = CharVocab::build(store.entity_vocab.names().iter().map(String::as_str));
        let relation_chars =
            CharVocab::build(store.relation_vocab.names().iter().map(String::as_str));
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        let d = config.hidden();
        let v = entities.len();

        params.insert_gaussian("ent.word", vec![entities.table_rows(), config.word_dim], 0.1, &mut rng);
        params.insert_gaussian("rel.word", vec![relations.table_rows(), config.word_dim], 0.1, &mut rng);
        params.insert_gaussian("mask.word", vec![config.word_dim], 0.1, &mut rng);
        params.insert_gaussian(
            "ent.char.emb",
            vec![entity_chars.table_rows(), config.char_emb_dim],
            0.1,
            &mut rng,
        );
        params.insert_xavier("ent.char.conv.w3", 3 * config.char_emb_dim, config.char_dim, &mut rng);
        params.insert_zeros("ent.char.conv.b", vec![config.char_dim]);
        params.insert_gaussian(
            "rel.char.emb",
            vec![relation_chars.table_rows(), config.char_emb_dim],
            0.1,
            &mut rng,
        );
        params.insert_xavier("rel.char.conv.w3", 3 * config.char_emb_dim, config.char_dim, &mut rng);
        params.insert_zeros("rel.char.conv.b", vec![config.char_dim]);
        params.insert_gaussian("pos", vec![3, d], 0.1, &mut rng);

        let encoder = TransformerStack::new(
            "enc",
            config.layers,
            config.heads,
            config.head_dim,
            config.attn_dropout,
            config.fc_dropout,
        );
        encoder.register(&mut params, &mut rng);

        params.insert_xavier("head.w", d, v, &mut rng);
        params.insert_zeros("head.b", vec![v]);

        Ok(KgeModel {
            config,
            entities,
            relations,
            entity_chars,
            relation_chars,
            params,
            encoder,
        })
    }

    /// Rebuild a model around deserialized vocabularies and parameters.
    pub fn from_parts(
        config: KgeConfig,
        entities: WordVocab,
        relations: WordVocab,
        entity_chars: CharVocab,
        relation_chars: CharVocab,
        params: ParamSet,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = TransformerStack::new(
            "enc",
            config.layers,
            config.heads,
            config.head_dim,
            config.attn_dropout,
            config.fc_dropout,
        );
        Ok(KgeModel {
            config,
            entities,
            relations,
            entity_chars,
            relation_chars,
            params,
            encoder,
        })
    }

    fn char_encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        kind: TokenKind,
        surface: &str,
    ) -> Result<Var> {
        let (emb_name, w_name, b_name, ids) = match kind {
            TokenKind::Entity => (
                "ent.char.emb",
                "ent.char.conv.w3",
                "ent.char.conv.b",
                self.entity_chars.encode(surface),
            ),
            TokenKind::Relation => (
                "rel.char.emb",
                "rel.char.conv.w3",
                "rel.char.conv.b",
                self.relation_chars.encode(surface),
            ),
            TokenKind::Mask => unreachable!("mask has a fixed empty char encoding"),
        };
        let emb = tape.select_rows(bound.var(emb_name), &ids)?;
        let w_flat = bound.var(w_name);
        let w = tape.reshape(w_flat, vec![3, self.config.char_emb_dim, self.config.char_dim])?;
        let conv = tape.conv1d_same(emb, w, bound.var(b_name))?;
        tape.max_axis0(conv)
    }

    /// Element embedding `[word ; char]` for one token. Unknown tokens fall
    /// back to the UNK word vector while keeping their character encoding.
    pub fn embed_token(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        kind: TokenKind,
        surface: &str,
    ) -> Result<Var> {
        let (word, chars) = match kind {
            TokenKind::Entity => {
                let id = self.entities.id_or_unk(surface);
                let rows = tape.select_rows(bound.var("ent.word"), &[id])?;
                let word = tape.reshape(rows, vec![self.config.word_dim])?;
                (word, self.char_encode(tape, bound, kind, surface)?)
            }
            TokenKind::Relation => {
                let id = self.relations.id_or_unk(surface);
                let rows = tape.select_rows(bound.var("rel.word"), &[id])?;
                let word = tape.reshape(rows, vec![self.config.word_dim])?;
                (word, self.char_encode(tape, bound, kind, surface)?)
            }
            TokenKind::Mask => {
                let word = bound.var("mask.word");
                let chars = tape.constant(Tensor::zeros(vec![self.config.char_dim]));
                (word, chars)
            }
        };
        tape.concat(&[word, chars])
    }

    /// Encode the context `(subject, relation, [MASK])`; returns the three
    /// last-layer hidden states as rows of a `[3, hidden]` matrix.
    pub fn encode_context(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        subject: &str,
        relation: &str,
    ) -> Result<Var> {
        let e = self.embed_token(tape, bound, TokenKind::Entity, subject)?;
        let r = self.embed_token(tape, bound, TokenKind::Relation, relation)?;
        let m = self.embed_token(tape, bound, TokenKind::Mask, "")?;
        let x = tape.stack_rows(&[e, r, m])?;
        let pos = bound.var("pos");
        let h0 = tape.add(x, pos)?;
        self.encoder.forward(tape, bound, h0, 0)
    }

    /// Logits over the entity vocabulary from the mask-position hidden state.
    pub fn mask_logits(&self, tape: &mut Tape, bound: &Bound, hidden: Var) -> Result<Var> {
        let h3 = tape.select_row(hidden, 2)?;
        let h3m = tape.reshape(h3, vec![1, self.config.hidden()])?;
        let f = tape.matmul(h3m, bound.var("head.w"))?;
        let f = tape.reshape(f, vec![self.entities.len()])?;
        tape.add(f, bound.var("head.b"))
    }

    /// Full masked forward: probabilities over entities plus the three
    /// hidden states.
    pub fn forward_masked(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        subject: &str,
        relation: &str,
    ) -> Result<(Var, Var)> {
        let hidden = self.encode_context(tape, bound, subject, relation)?;
        let logits = self.mask_logits(tape, bound, hidden)?;
        let probs = tape.softmax(logits)?;
        Ok((probs, hidden))
    }

    fn instance_loss(&self, tape: &mut Tape, bound: &Bound, inst: &MaskedInstance) -> Result<Var> {
        let subject = self.entities.tokens()[inst.subject as usize].clone();
        let relation = self.relations.tokens()[inst.relation as usize].clone();
        let hidden = self.encode_context(tape, bound, &subject, &relation)?;
        let logits = self.mask_logits(tape, bound, hidden)?;
        tape.cross_entropy_logits(logits, inst.label as usize)
    }

    /// Adam training over masked instances. Returns the per-epoch mean
    /// cross-entropy trace; aborts on non-finite loss.
    pub fn train(&mut self, instances: &[MaskedInstance], seed: u64) -> Result<Vec<f64>> {
        let mut rng = Rng::new(seed ^ 0x6b67_655f_7472);
        let mut opt = Optimizer::new(OptimizerKind::adam(), self.config.learning_rate);
        self.train_with(instances, self.config.epochs, &mut opt, &mut rng)
    }

    /// Run `epochs` additional training epochs with caller-held optimizer
    /// and RNG state, so training can be advanced in slices.
    pub fn train_with(
        &mut self,
        instances: &[MaskedInstance],
        epochs: usize,
        opt: &mut Optimizer,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        if instances.is_empty() {
            return Err(Error::data("kge training needs at least one instance"));
        }
        let mut trace = Vec::with_capacity(epochs);
        let mut order: Vec<usize> = (0..instances.len()).collect();
        for epoch in 0..epochs {
            rng.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            for &i in &order {
                let mut tape = Tape::new(rng.next_u64(), true);
                let bound = tape.bind(&self.params);
                let loss = self.instance_loss(&mut tape, &bound, &instances[i])?;
                let loss_value = tape.value(loss).scalar_value();
                if !loss_value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "kge training diverged at epoch {epoch}: loss {loss_value}"
                    )));
                }
                epoch_loss += loss_value;
                let grads = tape.backward(loss)?;
                let by_name = grads.for_params(&bound);
                opt.step(&mut self.params, &by_name)?;
            }
            trace.push(epoch_loss / instances.len() as f64);
        }
        Ok(trace)
    }

    /// Fraction of instances whose top predicted entity equals the label
    /// (evaluation mode, dropout off).
    pub fn hits_at_1(&self, instances: &[MaskedInstance]) -> Result<f64> {
        if instances.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for inst in instances {
            let mut tape = Tape::new(0, false);
            let bound = tape.bind(&self.params);
            let subject = &self.entities.tokens()[inst.subject as usize];
            let relation = &self.relations.tokens()[inst.relation as usize];
            let hidden = self.encode_context(&mut tape, &bound, subject, relation)?;
            let logits = self.mask_logits(&mut tape, &bound, hidden)?;
            let data = tape.value(logits).data();
            let best = data
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if best == inst.label as usize {
                hits += 1;
            }
        }
        Ok(hits as f64 / instances.len() as f64)
    }

    /// Candidate triplet encoding `[h1 ; h2 ; h3]` with the classification
    /// head removed. Evaluation mode, so repeated calls agree exactly.
    pub fn encode_candidate(&self, entity: &str, relation: &str) -> Result<Vec<f64>> {
        let mut tape = Tape::new(0, false);
        let bound = tape.bind(&self.params);
        let hidden = self.encode_context(&mut tape, &bound, entity, relation)?;
        let h1 = tape.select_row(hidden, 0)?;
        let h2 = tape.select_row(hidden, 1)?;
        let h3 = tape.select_row(hidden, 2)?;
        let cat = tape.concat(&[h1, h2, h3])?;
        Ok(tape.value(cat).data().to_vec())
    }

    /// Dimension of `encode_candidate` outputs.
    pub fn candidate_dim(&self) -> usize {
        3 * self.config.hidden()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::parse_triples;
    use std::io::Cursor;

    fn tiny_store() -> TripleStore {
        parse_triples(
            Cursor::new("Alice\tknows\tBob\nBob\tknows\tCara\nCara\tlives\tDelft\n"),
            "t",
        )
        .unwrap()
    }

    fn tiny_model(seed: u64) -> KgeModel {
        let mut cfg = KgeConfig::toy();
        cfg.layers = 1;
        cfg.epochs = 5;
        KgeModel::new(&tiny_store(), cfg, seed).unwrap()
    }

    #[test]
    fn training_set_is_one_instance_per_triple() {
        let store = tiny_store();
        let set = build_training_set(&store);
        assert_eq!(set.len(), store.len());
        assert_eq!(
            set[0],
            MaskedInstance {
                subject: store.entity_vocab.id("Alice").unwrap(),
                relation: store.relation_vocab.id("knows").unwrap(),
                label: store.entity_vocab.id("Bob").unwrap(),
            }
        );
    }

    #[test]
    fn duplicate_triples_kept() {
        let store = parse_triples(Cursor::new("A\tr\tB\nA\tr\tB\n"), "t").unwrap();
        let set = build_training_set(&store);
        assert_eq!(set.len(), 2);
        assert_eq!(set[0], set[1]);
    }

    #[test]
    fn embed_token_shape_and_purity() {
        let model = tiny_model(1);
        let mut tape = Tape::new(0, false);
        let bound = tape.bind(&model.params);
        let a = model
            .embed_token(&mut tape, &bound, TokenKind::Entity, "Alice")
            .unwrap();
        let b = model
            .embed_token(&mut tape, &bound, TokenKind::Entity, "Alice")
            .unwrap();
        assert_eq!(tape.value(a).numel(), model.config.hidden());
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn oov_tokens_share_word_part_but_differ_by_chars() {
        let model = tiny_model(2);
        let mut tape = Tape::new(0, false);
        let bound = tape.bind(&model.params);
        let a = model
            .embed_token(&mut tape, &bound, TokenKind::Entity, "BarackObama")
            .unwrap();
        let b = model
            .embed_token(&mut tape, &bound, TokenKind::Entity, "BarakObama")
            .unwrap();
        let w = model.config.word_dim;
        let (va, vb) = (tape.value(a).data(), tape.value(b).data());
        assert_eq!(&va[..w], &vb[..w], "both OOV: identical UNK word part");
        assert_ne!(&va[w..], &vb[w..], "char paths must distinguish them");
    }

    #[test]
    fn probs_sum_to_one_and_hiddens_have_dim_d() {
        let model = tiny_model(3);
        let mut tape = Tape::new(0, false);
        let bound = tape.bind(&model.params);
        let (probs, hidden) = model
            .forward_masked(&mut tape, &bound, "Alice", "knows")
            .unwrap();
        let sum: f64 = tape.value(probs).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert_eq!(tape.value(hidden).shape(), &[3, model.config.hidden()]);
    }

    #[test]
    fn zero_head_gives_uniform_probs() {
        let mut model = tiny_model(4);
        let v = model.entities.len();
        let d = model.config.hidden();
        *model.params.get_mut("head.w").unwrap() = Tensor::zeros(vec![d, v]);
        *model.params.get_mut("head.b").unwrap() = Tensor::zeros(vec![v]);
        let mut tape = Tape::new(0, false);
        let bound = tape.bind(&model.params);
        let (probs, _) = model
            .forward_masked(&mut tape, &bound, "Alice", "knows")
            .unwrap();
        for &p in tape.value(probs).data() {
            assert!((p - 1.0 / v as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_loss_near_ln_v_with_zero_head() {
        let mut model = tiny_model(5);
        let v = model.entities.len();
        let d = model.config.hidden();
        *model.params.get_mut("head.w").unwrap() = Tensor::zeros(vec![d, v]);
        *model.params.get_mut("head.b").unwrap() = Tensor::zeros(vec![v]);
        let store = tiny_store();
        let inst = build_training_set(&store)[0];
        let mut tape = Tape::new(0, false);
        let bound = tape.bind(&model.params);
        let loss = model.instance_loss(&mut tape, &bound, &inst).unwrap();
        assert!((tape.value(loss).scalar_value() - (v as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn single_instance_memorizes() {
        let store = tiny_store();
        let mut cfg = KgeConfig::toy();
        cfg.layers = 1;
        cfg.epochs = 150;
        cfg.learning_rate = 0.02;
        let mut model = KgeModel::new(&store, cfg, 6).unwrap();
        let inst = build_training_set(&store)[0];
        let trace = model.train(&[inst], 6).unwrap();
        assert!(
            trace.last().unwrap() < &0.01,
            "final loss {}",
            trace.last().unwrap()
        );
    }

    #[test]
    fn same_seed_same_trace() {
        let store = tiny_store();
        let set = build_training_set(&store);
        let mut m1 = tiny_model(7);
        let mut m2 = tiny_model(7);
        let t1 = m1.train(&set, 9).unwrap();
        let t2 = m2.train(&set, 9).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn shuffled_instances_same_content() {
        let store = tiny_store();
        let mut a = build_training_set(&store);
        let mut rng = Rng::new(1);
        rng.shuffle(&mut a);
        let mut b = build_training_set(&store);
        let key = |i: &MaskedInstance| (i.subject, i.relation, i.label);
        a.sort_by_key(key);
        b.sort_by_key(key);
        assert_eq!(a, b);
    }

    #[test]
    fn encode_candidate_is_pure_and_3d() {
        let model = tiny_model(8);
        let a = model.encode_candidate("Alice", "knows").unwrap();
        let b = model.encode_candidate("Alice", "knows").unwrap();
        assert_eq!(a.len(), model.candidate_dim());
        assert_eq!(a, b);
    }

    #[test]
    fn encoded_candidate_differs_from_raw_embeddings() {
        let model = tiny_model(9);
        let enc = model.encode_candidate("Alice", "knows").unwrap();
        let mut tape = Tape::new(0, false);
        let bound = tape.bind(&model.params);
        let e = model
            .embed_token(&mut tape, &bound, TokenKind::Entity, "Alice")
            .unwrap();
        let raw = tape.value(e).data().to_vec();
        assert_ne!(&enc[..raw.len()], raw.as_slice());
    }

    #[test]
    fn char_encoders_are_isolated() {
        let mut model = tiny_model(10);
        let before = {
            let mut tape = Tape::new(0, false);
            let bound = tape.bind(&model.params);
            let r = model
                .embed_token(&mut tape, &bound, TokenKind::Relation, "knows")
                .unwrap();
            tape.value(r).clone()
        };
        // Perturb the entity char encoder only.
        model
            .params
            .get_mut("ent.char.conv.w3")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|x| *x += 1.0);
        let after = {
            let mut tape = Tape::new(0, false);
            let bound = tape.bind(&model.params);
            let r = model
                .embed_token(&mut tape, &bound, TokenKind::Relation, "knows")
                .unwrap();
            tape.value(r).clone()
        };
        assert_eq!(before, after);
    }
}
