//! Pre-trained vector files.
//!
//! Two formats: text word-vector files (`token v1 v2 ...`, one per line) and
//! precomputed contextual vectors (u32-LE header length, JSON header with
//! dimension and per-token word-piece counts, then row-major f32-LE floats).
//! Word-piece vectors are averaged per token at load time.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct VectorFile {
    dim: usize,
    map: HashMap<String, Vec<f64>>,
}

impl VectorFile {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Vector for a token; `None` falls back to the caller's trainable UNK.
    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.map.get(token).map(Vec::as_slice)
    }
}

pub fn parse_vector_file(reader: impl BufRead, path: &str) -> Result<VectorFile> {
    let mut dim = 0usize;
    let mut map = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| Error::at(path, lineno + 1, "empty vector line"))?;
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::at(path, lineno + 1, format!("bad float {p:?}")))
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(Error::at(path, lineno + 1, "vector has no components"));
        }
        if dim == 0 {
            dim = values.len();
        } else if values.len() != dim {
            return Err(Error::at(
                path,
                lineno + 1,
                format!("dimension {} does not match first line's {}", values.len(), dim),
            ));
        }
        map.insert(token.to_string(), values);
    }
    if map.is_empty() {
        return Err(Error::data(format!("{path}: vector file is empty")));
    }
    Ok(VectorFile { dim, map })
}

pub fn load_vector_file(path: impl AsRef<Path>) -> Result<VectorFile> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    parse_vector_file(std::io::BufReader::new(file), &path.display().to_string())
}

#[derive(Debug, Serialize, Deserialize)]
struct ContextHeader {
    version: u32,
    dim: usize,
    /// `pieces[s][t]` = number of word pieces for token t of sentence s.
    pieces: Vec<Vec<u32>>,
}

/// Precomputed contextual vectors keyed by (sentence index, token index).
#[derive(Debug, Clone)]
pub struct ContextVectorFile {
    dim: usize,
    sentences: Vec<Vec<Vec<f64>>>,
}

impl ContextVectorFile {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sentence_count(&self) -> usize {
        self.sentences.len()
    }

    pub fn get(&self, sentence: usize, token: usize) -> Result<&[f64]> {
        self.sentences
            .get(sentence)
            .and_then(|s| s.get(token))
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::data(format!(
                    "contextual vectors: missing key (sentence {sentence}, token {token})"
                ))
            })
    }
}

pub fn read_context_vectors(mut reader: impl Read, path: &str) -> Result<ContextVectorFile> {
    let mut len_bytes = [0u8; 4];
    reader
        .read_exact(&mut len_bytes)
        .map_err(|e| Error::data(format!("{path}: truncated header length: {e}")))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader
        .read_exact(&mut header_bytes)
        .map_err(|e| Error::data(format!("{path}: truncated header: {e}")))?;
    let header: ContextHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::data(format!("{path}: bad header JSON: {e}")))?;
    if header.version != 1 {
        return Err(Error::data(format!(
            "{path}: unsupported contextual-vector version {}",
            header.version
        )));
    }
    let dim = header.dim;
    let mut sentences = Vec::with_capacity(header.pieces.len());
    let mut buf = vec![0u8; 4 * dim];
    for (s, tokens) in header.pieces.iter().enumerate() {
        let mut sent = Vec::with_capacity(tokens.len());
        for (t, &pieces) in tokens.iter().enumerate() {
            if pieces == 0 {
                return Err(Error::data(format!(
                    "{path}: token (sentence {s}, token {t}) has zero pieces"
                )));
            }
            let mut mean = vec![0.0f64; dim];
            for _ in 0..pieces {
                reader.read_exact(&mut buf).map_err(|e| {
                    Error::data(format!("{path}: truncated float block at sentence {s}: {e}"))
                })?;
                for (j, chunk) in buf.chunks_exact(4).enumerate() {
                    mean[j] += f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
                }
            }
            for v in &mut mean {
                *v /= pieces as f64;
            }
            sent.push(mean);
        }
        sentences.push(sent);
    }
    Ok(ContextVectorFile { dim, sentences })
}

pub fn load_context_vectors(path: impl AsRef<Path>) -> Result<ContextVectorFile> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    read_context_vectors(std::io::BufReader::new(file), &path.display().to_string())
}

/// Write the binary contextual format; `data[s][t]` holds that token's
/// word-piece vectors.
pub fn write_context_vectors(
    mut out: impl Write,
    dim: usize,
    data: &[Vec<Vec<Vec<f32>>>],
) -> Result<()> {
    let pieces: Vec<Vec<u32>> = data
        .iter()
        .map(|s| s.iter().map(|t| t.len() as u32).collect())
        .collect();
    let header = serde_json::to_vec(&ContextHeader {
        version: 1,
        dim,
        pieces,
    })
    .expect("header serializes");
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    for sent in data {
        for token in sent {
            for piece in token {
                assert_eq!(piece.len(), dim);
                for &v in piece {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn parses_two_entry_file() {
        let vf = parse_vector_file(Cursor::new("the 0.1 0.2\na 0.3 0.4\n"), "v").unwrap();
        assert_eq!(vf.dim(), 2);
        assert_eq!(vf.len(), 2);
        assert_eq!(vf.get("the").unwrap(), &[0.1, 0.2]);
    }

    #[test]
    fn inconsistent_dimension_reports_line() {
        let err = parse_vector_file(Cursor::new("a 0.1 0.2\nb 0.3\n"), "v").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn missing_token_is_none() {
        let vf = parse_vector_file(Cursor::new("a 0.1 0.2\n"), "v").unwrap();
        assert!(vf.get("qwxz").is_none());
    }

    #[test]
    fn word_pieces_average_per_token() {
        let mut buf = Vec::new();
        // one sentence, two tokens; first token has 2 pieces, second has 1
        let data = vec![vec![
            vec![vec![1.0f32, 3.0], vec![3.0, 5.0]],
            vec![vec![7.0, 9.0]],
        ]];
        write_context_vectors(&mut buf, 2, &data).unwrap();
        let cf = read_context_vectors(Cursor::new(buf), "c").unwrap();
        assert_eq!(cf.get(0, 0).unwrap(), &[2.0, 4.0]);
        assert_eq!(cf.get(0, 1).unwrap(), &[7.0, 9.0]);
    }

    #[test]
    fn missing_key_lists_the_key() {
        let mut buf = Vec::new();
        write_context_vectors(&mut buf, 1, &[vec![vec![vec![1.0f32]]]]).unwrap();
        let cf = read_context_vectors(Cursor::new(buf), "c").unwrap();
        let err = cf.get(3, 0).unwrap_err();
        assert!(err.to_string().contains("sentence 3"), "{err}");
    }
}
