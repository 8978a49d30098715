//! Demo session: the toy corpus and knowledge graph are compiled in, the
//! two training stages advance in caller-controlled slices, and every query
//! returns JSON-ready values. Pure Rust so the same session drives both the
//! wasm page and native tests.

use serde_json::{json, Value};

use kgner_core::config::Config;
use kgner_core::conll::{corpus_stats, ingest_conll_reader, read_plain_text, LabeledSentence};
use kgner_core::error::{Error, Result};
use kgner_core::kg::{shortlist, CandidateIndex, TripleStore};
use kgner_core::kge::{build_training_set, KgeModel, MaskedInstance};
use kgner_core::ner::{Knowledge, NerModel, NerTrainer, TrainResources};
use kgner_core::rng::Rng;
use kgner_core::tags::extract_spans;
use kgner_core::tensor::{Optimizer, OptimizerKind};

const TRAIN_CONLL: &str = include_str!("../../../data/toy.train.conll");
const DEV_CONLL: &str = include_str!("../../../data/toy.dev.conll");
const KG_TSV: &str = include_str!("../../../data/toy.kg.tsv");
const CONFIG_JSON: &str = include_str!("../../../data/toy.config.json");

pub struct DemoSession {
    seed: u64,
    config: Config,
    store: TripleStore,
    index: CandidateIndex,
    train: Vec<LabeledSentence>,
    dev: Vec<LabeledSentence>,
    kge: KgeModel,
    kge_instances: Vec<MaskedInstance>,
    kge_opt: Optimizer,
    kge_rng: Rng,
    kge_losses: Vec<f64>,
    trainer: Option<NerTrainer<'static>>,
    ner_losses: Vec<f64>,
    dev_f1: Vec<f64>,
    model: Option<NerModel>,
}

impl DemoSession {
    pub fn new(seed: u64) -> Result<Self> {
        let config = Config::from_json_str(CONFIG_JSON)?;
        let store = kgner_core::kg::parse_triples(std::io::Cursor::new(KG_TSV), "toy.kg.tsv")?;
        let index = CandidateIndex::build(&store, &config.data.ngram_sizes);
        let train = ingest_conll_reader(std::io::Cursor::new(TRAIN_CONLL), "toy.train.conll")?;
        let dev = ingest_conll_reader(std::io::Cursor::new(DEV_CONLL), "toy.dev.conll")?;
        let kge = KgeModel::new(&store, config.kge.clone(), seed)?;
        let kge_instances = build_training_set(&store);
        let kge_opt = Optimizer::new(OptimizerKind::adam(), config.kge.learning_rate);
        let kge_rng = Rng::new(seed ^ 0x6b67_655f_7472);
        Ok(DemoSession {
            seed,
            config,
            store,
            index,
            train,
            dev,
            kge,
            kge_instances,
            kge_opt,
            kge_rng,
            kge_losses: Vec::new(),
            trainer: None,
            ner_losses: Vec::new(),
            dev_f1: Vec::new(),
            model: None,
        })
    }

    pub fn corpus_info(&self) -> Value {
        let stats = corpus_stats(&self.train);
        json!({
            "train_sentences": stats.sentences,
            "train_tokens": stats.tokens,
            "documents": stats.documents,
            "dev_sentences": self.dev.len(),
            "entity_types": kgner_core::tags::collect_types(&self.train),
            "triples": self.store.len(),
            "entities": self.store.entity_vocab.len(),
            "relations": self.store.relation_vocab.len(),
            "kge_epochs_suggested": self.config.kge.epochs,
            "ner_epochs_suggested": self.config.ner.epochs,
            "levels": self.config.features.levels.names(),
        })
    }

    /// Advance graph-embedding training by `n` epochs.
    pub fn kge_epochs(&mut self, n: usize) -> Result<Value> {
        let trace = self.kge.train_with(
            &self.kge_instances,
            n,
            &mut self.kge_opt,
            &mut self.kge_rng,
        )?;
        self.kge_losses.extend_from_slice(&trace);
        let hits = self.kge.hits_at_1(&self.kge_instances)?;
        Ok(json!({
            "epochs_done": self.kge_losses.len(),
            "losses": self.kge_losses,
            "hits_at_1": hits,
        }))
    }

    /// Build the sequence trainer (requires at least one kge epoch so that
    /// the global feature carries signal).
    pub fn start_ner(&mut self) -> Result<()> {
        if self.kge_losses.is_empty() {
            return Err(Error::config(
                "train the knowledge-graph embeddings before the tagger",
            ));
        }
        let resources = TrainResources {
            vectors: None,
            train_ctx: None,
            dev_ctx: None,
            knowledge: Some(Knowledge {
                store: &self.store,
                index: &self.index,
            }),
            kge: Some(self.kge.clone()),
        };
        self.trainer = Some(NerTrainer::new(
            &self.config,
            &self.train,
            &self.dev,
            resources,
            self.seed,
        )?);
        self.ner_losses.clear();
        self.dev_f1.clear();
        self.model = None;
        Ok(())
    }

    /// Advance sequence training by `n` epochs.
    pub fn ner_epochs(&mut self, n: usize) -> Result<Value> {
        let trainer = self
            .trainer
            .as_mut()
            .ok_or_else(|| Error::config("call start_ner first"))?;
        for _ in 0..n {
            let stats = trainer.epoch()?;
            self.ner_losses.push(stats.mean_loss);
            self.dev_f1.push(stats.dev_f1.unwrap_or(f64::NAN));
        }
        Ok(json!({
            "epochs_done": self.ner_losses.len(),
            "losses": self.ner_losses,
            "dev_f1": self.dev_f1,
        }))
    }

    /// Freeze the best parameters and make the model available for tagging.
    pub fn finish_ner(&mut self) -> Result<Value> {
        let trainer = self
            .trainer
            .take()
            .ok_or_else(|| Error::config("call start_ner first"))?;
        let (model, report) = trainer.finish();
        let knowledge = Knowledge {
            store: &self.store,
            index: &self.index,
        };
        let train_f1 = model.evaluate(&self.train, None, Some(knowledge))?.f1;
        let dev_f1 = model.evaluate(&self.dev, None, Some(knowledge))?.f1;
        self.model = Some(model);
        Ok(json!({
            "epochs": report.train_loss.len(),
            "best_epoch": report.best_epoch,
            "best_dev_f1": report.best_dev_f1,
            "train_f1": train_f1,
            "dev_f1": dev_f1,
        }))
    }

    pub fn is_trained(&self) -> bool {
        self.model.is_some()
    }

    /// Tag whitespace-tokenized text (one sentence per line). Every token
    /// reports its knowledge candidates and fusion attention weights.
    pub fn tag(&self, text: &str) -> Result<Value> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Error::config("finish training before tagging"))?;
        let sentences = read_plain_text(std::io::Cursor::new(text))?;
        if sentences.is_empty() {
            return Err(Error::data("no tokens in input"));
        }
        let knowledge = Knowledge {
            store: &self.store,
            index: &self.index,
        };
        let detailed = model.predict_detailed(&sentences, None, Some(knowledge))?;
        let mut out = Vec::with_capacity(detailed.len());
        for sentence in detailed {
            let tags: Vec<String> = sentence.iter().map(|t| t.tag.clone()).collect();
            let spans = extract_spans(&tags, model.io_scheme)?;
            let tokens: Vec<Value> = sentence
                .iter()
                .map(|t| {
                    json!({
                        "token": t.token,
                        "tag": t.tag,
                        "candidates": t.candidates.iter().map(|c| json!({
                            "entity": c.entity,
                            "relation": c.relation,
                            "weight": c.weight,
                        })).collect::<Vec<_>>(),
                    })
                })
                .collect();
            let span_values: Vec<Value> = spans
                .iter()
                .map(|s| {
                    json!({
                        "start": s.start,
                        "end": s.end,
                        "label": s.label,
                        "text": sentence[s.start..s.end]
                            .iter()
                            .map(|t| t.token.as_str())
                            .collect::<Vec<_>>()
                            .join(" "),
                    })
                })
                .collect();
            out.push(json!({ "tokens": tokens, "spans": span_values }));
        }
        Ok(json!({ "sentences": out }))
    }

    /// Candidate entity/relation pairs for one word.
    pub fn shortlist(&self, word: &str, k1: usize, k2: usize) -> Result<Value> {
        if word.trim().is_empty() {
            return Err(Error::data("empty word"));
        }
        if k1 == 0 || k2 == 0 {
            return Err(Error::config("k1 and k2 must be at least 1"));
        }
        let er = shortlist(&self.index, &self.store, word.trim(), k1, k2);
        let mut entities: Vec<u32> = Vec::new();
        for &(e, _) in &er.pairs {
            if !entities.contains(&e) {
                entities.push(e);
            }
        }
        Ok(json!({
            "word": word.trim(),
            "entities": entities.iter().map(|&e| json!({
                "name": self.store.entity_vocab.name(e),
                "subject_count": self.store.subject_count_of(e),
            })).collect::<Vec<_>>(),
            "pairs": er.pairs.iter().map(|&(e, r)| json!({
                "entity": self.store.entity_vocab.name(e),
                "relation": self.store.relation_vocab.name(r),
            })).collect::<Vec<_>>(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_flow() {
        let mut s = DemoSession::new(5).unwrap();
        let info = s.corpus_info();
        assert_eq!(info["train_sentences"], 30);
        assert_eq!(info["triples"], 44);

        // tagging before training is a config error
        assert!(s.tag("Alice Moreno").is_err());
        assert!(s.start_ner().is_err(), "kge must be trained first");

        let kge = s.kge_epochs(3).unwrap();
        assert_eq!(kge["epochs_done"], 3);

        s.start_ner().unwrap();
        let stats = s.ner_epochs(2).unwrap();
        assert_eq!(stats["epochs_done"], 2);
        let done = s.finish_ner().unwrap();
        assert_eq!(done["epochs"], 2);

        let tagged = s.tag("Alice Moreno visited Quasar .").unwrap();
        let tokens = tagged["sentences"][0]["tokens"].as_array().unwrap();
        assert_eq!(tokens.len(), 5);
        // the token "Moreno" must surface its knowledge candidates
        let moreno = &tokens[1];
        assert_eq!(moreno["token"], "Moreno");
        assert!(!moreno["candidates"].as_array().unwrap().is_empty());
        let w: f64 = moreno["candidates"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c["weight"].as_f64().unwrap())
            .sum();
        assert!((w - 1.0).abs() < 1e-6, "attention weights sum to 1, got {w}");
    }

    #[test]
    fn shortlist_reports_counts() {
        let s = DemoSession::new(1).unwrap();
        let v = s.shortlist("Okafor", 2, 3).unwrap();
        let names: Vec<&str> = v["entities"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["name"].as_str().unwrap())
            .collect();
        assert_eq!(names, vec!["BenOkafor", "MayaOkafor"]);
        assert!(s.shortlist("  ", 2, 3).is_err());
    }

    #[test]
    fn sessions_are_seed_deterministic() {
        let run = |seed: u64| {
            let mut s = DemoSession::new(seed).unwrap();
            s.kge_epochs(2).unwrap();
            s.start_ner().unwrap();
            let v = s.ner_epochs(2).unwrap();
            v["losses"].clone()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }
}
