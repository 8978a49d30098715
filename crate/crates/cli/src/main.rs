//! Command-line driver.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kgner_core::ablation::run_ablation;
use kgner_core::checkpoint;
use kgner_core::config::Config;
use kgner_core::conll::{corpus_stats, emit_conll, ingest_conll, read_conll_input, read_plain_text};
use kgner_core::error::Error;
use kgner_core::features::{load_vector_file, ContextVectorFile, VectorFile};
use kgner_core::kg::{load_triples, CandidateIndex, TripleStore};
use kgner_core::kge::{build_training_set, KgeModel};
use kgner_core::ner::{train_ner, Knowledge, TrainResources};

#[derive(Parser)]
#[command(name = "kgner", version, about = "Knowledge-aware sequence labeling toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON config with dotted keys (kge.layers, ner.heads, ...)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn load(&self) -> Result<Config, Error> {
        match &self.config {
            Some(path) => Config::load(path),
            None => Ok(Config::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the graph-embedding model on a triple file
    KgeTrain {
        #[command(flatten)]
        common: Common,
        /// Tab-separated subject/relation/object triples
        #[arg(long)]
        triples: PathBuf,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode one (entity, relation) candidate with a trained model
    KgeEncode {
        /// Trained kge checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        entity: String,
        #[arg(long)]
        relation: String,
    },
    /// Build and persist the character n-gram candidate index
    IndexBuild {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        triples: PathBuf,
        /// JSON output path
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the sequence model
    NerTrain {
        #[command(flatten)]
        common: Common,
        /// Training corpus (CoNLL columns)
        #[arg(long)]
        train: PathBuf,
        /// Development corpus for best-checkpoint selection
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Triple file (required when the global level is enabled)
        #[arg(long)]
        triples: Option<PathBuf>,
        /// Trained kge checkpoint (required when the global level is enabled)
        #[arg(long)]
        kge: Option<PathBuf>,
        /// Pre-trained word vectors (text format)
        #[arg(long)]
        vectors: Option<PathBuf>,
        /// Precomputed contextual vectors for the training corpus
        #[arg(long)]
        train_ctx: Option<PathBuf>,
        /// Precomputed contextual vectors for the dev corpus
        #[arg(long)]
        dev_ctx: Option<PathBuf>,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model with span-level F1
    NerEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Gold corpus (CoNLL columns)
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        triples: Option<PathBuf>,
        /// Precomputed contextual vectors for the corpus
        #[arg(long)]
        ctx: Option<PathBuf>,
    },
    /// Tag a corpus or plain text file
    NerPredict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input file: CoNLL columns (tags optional) or plain text with --text
        #[arg(long)]
        input: PathBuf,
        /// Treat the input as plain text, one sentence per line
        #[arg(long)]
        text: bool,
        #[arg(long)]
        triples: Option<PathBuf>,
        #[arg(long)]
        ctx: Option<PathBuf>,
        /// Output CoNLL file with the predicted tag appended
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the incremental feature-ablation ladder
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        /// Evaluation corpus for the reported F1
        #[arg(long)]
        eval: PathBuf,
        /// Number of ladder rungs (1..=6)
        #[arg(long, default_value_t = 6)]
        levels: usize,
        /// Number of seeded repetitions per rung
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        triples: Option<PathBuf>,
        #[arg(long)]
        kge: Option<PathBuf>,
        #[arg(long)]
        vectors: Option<PathBuf>,
        /// JSON sidecar output path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the candidate entity/relation set for a word
    Shortlist {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        word: String,
        #[arg(long)]
        k1: Option<usize>,
        #[arg(long)]
        k2: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with zero exit
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Data(_) | Error::DataAt { .. } | Error::Io(_) | Error::Checkpoint(_) => 2,
        Error::NonFinite { .. } | Error::Numeric(_) | Error::ShapeMismatch { .. } => 3,
    }
}

fn load_knowledge(path: &PathBuf, config: &Config) -> Result<(TripleStore, CandidateIndex), Error> {
    let store = load_triples(path)?;
    let index = CandidateIndex::build(&store, &config.data.ngram_sizes);
    Ok((store, index))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::KgeTrain {
            common,
            triples,
            out,
        } => {
            let config = common.load()?;
            let store = load_triples(&triples)?;
            let instances = build_training_set(&store);
            println!(
                "loaded {} triples, {} entities, {} relations",
                store.len(),
                store.entity_vocab.len(),
                store.relation_vocab.len()
            );
            let mut model = KgeModel::new(&store, config.kge.clone(), common.seed)?;
            let trace = model.train(&instances, common.seed)?;
            for (epoch, loss) in trace.iter().enumerate() {
                if epoch % 10 == 0 || epoch + 1 == trace.len() {
                    println!("epoch {epoch:>4}  mean loss {loss:.6}");
                }
            }
            let hits = model.hits_at_1(&instances)?;
            println!("training-set hits@1 {hits:.4}");
            checkpoint::save_kge(&out, &model, &config, common.seed, None)?;
            println!("saved {}", out.display());
            Ok(())
        }

        Command::KgeEncode {
            checkpoint: ckpt,
            entity,
            relation,
        } => {
            let (model, _) = checkpoint::load_kge(&ckpt)?;
            let encoding = model.encode_candidate(&entity, &relation)?;
            let json = serde_json::json!({
                "entity": entity,
                "relation": relation,
                "dim": encoding.len(),
                "encoding": encoding,
            });
            println!("{}", serde_json::to_string(&json).expect("serializable"));
            Ok(())
        }

        Command::IndexBuild {
            common,
            triples,
            out,
        } => {
            let config = common.load()?;
            let (store, index) = load_knowledge(&triples, &config)?;
            let entries: Vec<serde_json::Value> = index
                .entries()
                .into_iter()
                .map(|(gram, ids)| serde_json::json!({ "ngram": gram, "entities": ids }))
                .collect();
            let doc = serde_json::json!({
                "version": 1,
                "ngram_sizes": index.ngram_sizes,
                "entities": store.entity_vocab.names(),
                "entries": entries,
            });
            std::fs::write(&out, serde_json::to_vec_pretty(&doc).expect("serializable"))?;
            println!(
                "indexed {} entities into {} n-grams -> {}",
                store.entity_vocab.len(),
                index.ngram_count(),
                out.display()
            );
            Ok(())
        }

        Command::NerTrain {
            common,
            train,
            dev,
            triples,
            kge,
            vectors,
            train_ctx,
            dev_ctx,
            out,
        } => {
            let config = common.load()?;
            let train_sents = ingest_conll(&train)?;
            let stats = corpus_stats(&train_sents);
            println!(
                "train: {} sentences / {} tokens / {} documents",
                stats.sentences, stats.tokens, stats.documents
            );
            let dev_sents = match &dev {
                Some(p) => ingest_conll(p)?,
                None => Vec::new(),
            };
            let vector_file: Option<VectorFile> =
                vectors.as_ref().map(load_vector_file).transpose()?;
            let train_ctx_file: Option<ContextVectorFile> = train_ctx
                .as_ref()
                .map(kgner_core::features::vectors::load_context_vectors)
                .transpose()?;
            let dev_ctx_file: Option<ContextVectorFile> = dev_ctx
                .as_ref()
                .map(kgner_core::features::vectors::load_context_vectors)
                .transpose()?;
            let knowledge_data = triples
                .as_ref()
                .map(|p| load_knowledge(p, &config))
                .transpose()?;
            let kge_model = kge
                .as_ref()
                .map(|p| checkpoint::load_kge(p).map(|(m, _)| m))
                .transpose()?;

            let resources = TrainResources {
                vectors: vector_file.as_ref(),
                train_ctx: train_ctx_file.as_ref(),
                dev_ctx: dev_ctx_file.as_ref(),
                knowledge: knowledge_data
                    .as_ref()
                    .map(|(store, index)| Knowledge { store, index }),
                kge: kge_model,
            };
            let (model, report) = train_ner(&config, &train_sents, &dev_sents, resources, common.seed)?;
            for (epoch, loss) in report.train_loss.iter().enumerate() {
                let dev_part = report
                    .dev_f1
                    .get(epoch)
                    .filter(|f| f.is_finite())
                    .map(|f| format!("  dev F1 {f:.4}"))
                    .unwrap_or_default();
                println!("epoch {epoch:>4}  mean loss {loss:.6}{dev_part}");
            }
            if report.best_dev_f1.is_finite() && !dev_sents.is_empty() {
                println!(
                    "best dev F1 {:.4} at epoch {}",
                    report.best_dev_f1, report.best_epoch
                );
            }
            checkpoint::save_ner(&out, &model, &config, common.seed, None)?;
            println!("saved {}", out.display());
            Ok(())
        }

        Command::NerEval {
            checkpoint: ckpt,
            data,
            triples,
            ctx,
        } => {
            let (model, manifest) = checkpoint::load_ner(&ckpt)?;
            let config = Config::from_overrides(&manifest.config)?;
            let sentences = ingest_conll(&data)?;
            let ctx_file = ctx
                .as_ref()
                .map(kgner_core::features::vectors::load_context_vectors)
                .transpose()?;
            let knowledge_data = triples
                .as_ref()
                .map(|p| load_knowledge(p, &config))
                .transpose()?;
            let prf = model.evaluate(
                &sentences,
                ctx_file.as_ref(),
                knowledge_data
                    .as_ref()
                    .map(|(store, index)| Knowledge { store, index }),
            )?;
            println!(
                "precision {:.4}  recall {:.4}  f1 {:.4}  ({} correct / {} predicted / {} gold)",
                prf.precision, prf.recall, prf.f1, prf.correct, prf.predicted, prf.gold
            );
            Ok(())
        }

        Command::NerPredict {
            checkpoint: ckpt,
            input,
            text,
            triples,
            ctx,
            out,
        } => {
            let (model, manifest) = checkpoint::load_ner(&ckpt)?;
            let config = Config::from_overrides(&manifest.config)?;
            let sentences = if text {
                let file = std::fs::File::open(&input)
                    .map_err(|e| Error::data(format!("{}: {e}", input.display())))?;
                read_plain_text(std::io::BufReader::new(file))?
            } else {
                read_conll_input(&input)?
            };
            let ctx_file = ctx
                .as_ref()
                .map(kgner_core::features::vectors::load_context_vectors)
                .transpose()?;
            let knowledge_data = triples
                .as_ref()
                .map(|p| load_knowledge(p, &config))
                .transpose()?;
            let tags = model.predict_tags(
                &sentences,
                ctx_file.as_ref(),
                knowledge_data
                    .as_ref()
                    .map(|(store, index)| Knowledge { store, index }),
            )?;
            let file = std::fs::File::create(&out)?;
            emit_conll(&sentences, &tags, std::io::BufWriter::new(file))?;
            let stats = corpus_stats(&sentences);
            println!(
                "tagged {} sentences / {} tokens -> {}",
                stats.sentences,
                stats.tokens,
                out.display()
            );
            Ok(())
        }

        Command::Ablate {
            common,
            train,
            eval,
            levels,
            seeds,
            triples,
            kge,
            vectors,
            out,
        } => {
            let config = common.load()?;
            let train_sents = ingest_conll(&train)?;
            let eval_sents = ingest_conll(&eval)?;
            let vector_file = vectors.as_ref().map(load_vector_file).transpose()?;
            let knowledge_data = triples
                .as_ref()
                .map(|p| load_knowledge(p, &config))
                .transpose()?;
            let kge_model = kge
                .as_ref()
                .map(|p| checkpoint::load_kge(p).map(|(m, _)| m))
                .transpose()?;
            if seeds == 0 {
                return Err(Error::config("--seeds must be at least 1"));
            }
            let seed_list: Vec<u64> = (0..seeds as u64).map(|i| common.seed + i).collect();
            let report = run_ablation(
                &config,
                &train_sents,
                &eval_sents,
                levels,
                &seed_list,
                vector_file.as_ref(),
                knowledge_data
                    .as_ref()
                    .map(|(store, index)| Knowledge { store, index }),
                kge_model.as_ref(),
            )?;
            print!("{}", report.table());
            if let Some(path) = out {
                std::fs::write(
                    &path,
                    serde_json::to_vec_pretty(&report.to_json()).expect("serializable"),
                )?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }

        Command::Shortlist {
            common,
            triples,
            word,
            k1,
            k2,
        } => {
            let config = common.load()?;
            let (store, index) = load_knowledge(&triples, &config)?;
            let k1 = k1.unwrap_or(config.fusion.k1);
            let k2 = k2.unwrap_or(config.fusion.k2);
            let er = kgner_core::kg::shortlist(&index, &store, &word, k1, k2);
            if er.pairs.is_empty() {
                println!("{word}: no candidates");
                return Ok(());
            }
            println!("{word}: {} candidate pairs (k1={k1}, k2={k2})", er.pairs.len());
            for &(e, r) in &er.pairs {
                println!(
                    "  {:<24} {:<18} (subject count {})",
                    store.entity_vocab.name(e),
                    store.relation_vocab.name(r),
                    store.subject_count_of(e)
                );
            }
            Ok(())
        }
    }
}
