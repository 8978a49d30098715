//! CoNLL-style column file ingestion and emission.
//!
//! Token is the first whitespace-separated column, tag the last. Blank lines
//! separate sentences; a line whose first column is `-DOCSTART-` starts a new
//! document and is not itself a sentence.

use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub doc_id: usize,
    /// Original columns per token, preserved so predictions can be appended
    /// without losing input fields.
    pub columns: Vec<Vec<String>>,
}

impl LabeledSentence {
    pub fn from_tokens(tokens: Vec<String>, tags: Vec<String>, doc_id: usize) -> Self {
        assert_eq!(tokens.len(), tags.len());
        let columns = tokens.iter().map(|t| vec![t.clone()]).collect();
        LabeledSentence {
            tokens,
            tags,
            doc_id,
            columns,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusStats {
    pub sentences: usize,
    pub tokens: usize,
    pub documents: usize,
}

pub fn corpus_stats(sentences: &[LabeledSentence]) -> CorpusStats {
    let documents = sentences
        .iter()
        .map(|s| s.doc_id)
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    CorpusStats {
        sentences: sentences.len(),
        tokens: sentences.iter().map(LabeledSentence::len).sum(),
        documents,
    }
}

fn parse_conll(reader: impl BufRead, path: &str, require_tags: bool) -> Result<Vec<LabeledSentence>> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut columns: Vec<Vec<String>> = Vec::new();
    let mut doc_id = 0usize;
    let mut seen_docstart = false;

    let flush = |tokens: &mut Vec<String>,
                     tags: &mut Vec<String>,
                     columns: &mut Vec<Vec<String>>,
                     doc_id: usize,
                     sentences: &mut Vec<LabeledSentence>| {
        if !tokens.is_empty() {
            sentences.push(LabeledSentence {
                tokens: std::mem::take(tokens),
                tags: std::mem::take(tags),
                doc_id,
                columns: std::mem::take(columns),
            });
        }
    };

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut tokens, &mut tags, &mut columns, doc_id, &mut sentences);
            continue;
        }
        let cols: Vec<String> = trimmed.split_whitespace().map(str::to_string).collect();
        if cols[0] == "-DOCSTART-" {
            flush(&mut tokens, &mut tags, &mut columns, doc_id, &mut sentences);
            if seen_docstart || !sentences.is_empty() {
                doc_id += 1;
            }
            seen_docstart = true;
            continue;
        }
        if require_tags && cols.len() < 2 {
            return Err(Error::at(path, lineno + 1, "tag column missing"));
        }
        tokens.push(cols[0].clone());
        tags.push(if cols.len() >= 2 {
            cols[cols.len() - 1].clone()
        } else {
            "O".to_string()
        });
        columns.push(cols);
    }
    flush(&mut tokens, &mut tags, &mut columns, doc_id, &mut sentences);
    Ok(sentences)
}

/// Strict ingestion for training/evaluation data: every token line must
/// carry a tag column.
pub fn ingest_conll(path: impl AsRef<Path>) -> Result<Vec<LabeledSentence>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    parse_conll(
        std::io::BufReader::new(file),
        &path.display().to_string(),
        true,
    )
}

pub fn ingest_conll_reader(reader: impl BufRead, path: &str) -> Result<Vec<LabeledSentence>> {
    parse_conll(reader, path, true)
}

/// Lenient reader for prediction input: tag column optional (defaults to O).
pub fn read_conll_input(path: impl AsRef<Path>) -> Result<Vec<LabeledSentence>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    parse_conll(
        std::io::BufReader::new(file),
        &path.display().to_string(),
        false,
    )
}

/// Plain-text prediction input: one sentence per line, whitespace tokenized.
/// The whole file forms a single document.
pub fn read_plain_text(reader: impl BufRead) -> Result<Vec<LabeledSentence>> {
    let mut sentences = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            continue;
        }
        let tags = vec!["O".to_string(); tokens.len()];
        sentences.push(LabeledSentence::from_tokens(tokens, tags, 0));
    }
    Ok(sentences)
}

/// Emit CoNLL output with the predicted tag appended as the final column of
/// each token line. Sentences are separated by blank lines; document
/// boundaries re-emit `-DOCSTART- O`.
pub fn emit_conll(
    sentences: &[LabeledSentence],
    predictions: &[Vec<String>],
    mut out: impl std::io::Write,
) -> Result<()> {
    assert_eq!(sentences.len(), predictions.len());
    let mut current_doc = None;
    for (sent, preds) in sentences.iter().zip(predictions) {
        assert_eq!(sent.len(), preds.len());
        if current_doc != Some(sent.doc_id) {
            writeln!(out, "-DOCSTART- O")?;
            writeln!(out)?;
            current_doc = Some(sent.doc_id);
        }
        for (cols, pred) in sent.columns.iter().zip(preds) {
            writeln!(out, "{} {}", cols.join(" "), pred)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn blank_line_separates_sentences() {
        let input = "He O\nran O\n\nStop O\n";
        let sents = ingest_conll_reader(Cursor::new(input), "t").unwrap();
        assert_eq!(sents.len(), 2);
        assert_eq!(sents[0].len(), 2);
        assert_eq!(sents[1].len(), 1);
    }

    #[test]
    fn docstart_sets_boundary_and_is_excluded() {
        let input = "-DOCSTART- -X- O O\n\nEU B-ORG\n\n-DOCSTART- -X- O O\n\nParis B-LOC\n";
        let sents = ingest_conll_reader(Cursor::new(input), "t").unwrap();
        assert_eq!(sents.len(), 2);
        assert_eq!(sents[0].doc_id, 0);
        assert_eq!(sents[1].doc_id, 1);
        assert!(sents.iter().all(|s| s.tokens[0] != "-DOCSTART-"));
    }

    #[test]
    fn missing_tag_column_reports_line() {
        let input = "ok O\nbare\n";
        let err = ingest_conll_reader(Cursor::new(input), "t").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn token_first_tag_last() {
        let input = "EU NNP I-NP B-ORG\n";
        let sents = ingest_conll_reader(Cursor::new(input), "t").unwrap();
        assert_eq!(sents[0].tokens[0], "EU");
        assert_eq!(sents[0].tags[0], "B-ORG");
        assert_eq!(sents[0].columns[0], vec!["EU", "NNP", "I-NP", "B-ORG"]);
    }

    #[test]
    fn plain_text_is_whitespace_tokenized() {
        let sents = read_plain_text(Cursor::new("a b c\n\nd e\n")).unwrap();
        assert_eq!(sents.len(), 2);
        assert_eq!(sents[0].tokens, vec!["a", "b", "c"]);
        assert!(sents.iter().all(|s| s.doc_id == 0));
    }

    #[test]
    fn emit_appends_prediction_column() {
        let sents = ingest_conll_reader(Cursor::new("EU NNP B-ORG\n\n"), "t").unwrap();
        let mut buf = Vec::new();
        emit_conll(&sents, &[vec!["B-ORG".to_string()]], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("EU NNP B-ORG B-ORG"), "{text}");
    }

    #[test]
    fn round_trip_preserves_counts() {
        let input = "-DOCSTART- O\n\na O\nb B-X\n\nc O\n";
        let sents = ingest_conll_reader(Cursor::new(input), "t").unwrap();
        let preds: Vec<Vec<String>> = sents.iter().map(|s| s.tags.clone()).collect();
        let mut buf = Vec::new();
        emit_conll(&sents, &preds, &mut buf).unwrap();
        let again = ingest_conll_reader(Cursor::new(buf.as_slice()), "t").unwrap();
        let (a, b) = (corpus_stats(&sents), corpus_stats(&again));
        assert_eq!(a, b);
    }
}
