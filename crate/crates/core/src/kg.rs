//! Fact-triple store with frequency statistics and per-word entity/relation
//! shortlisting.
//!
//! Entities are ranked by how many triples they appear in as subjects.
//! Candidate generation for a word combines character n-gram overlap with
//! case-insensitive substring containment in either direction; the top `k1`
//! candidates are then crossed with the `k2` relations most frequently
//! leaving the candidate set.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

/// One `(subject, relation, object)` fact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

/// Bidirectional string-to-id map.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// All triples plus the vocabularies and counts shortlisting needs.
#[derive(Debug, Clone, Default)]
pub struct TripleStore {
    pub triples: Vec<Triple>,
    pub entity_vocab: Vocab,
    pub relation_vocab: Vocab,
    /// Per entity id: number of triples with that entity as subject.
    pub subject_count: Vec<u64>,
    /// Per (subject entity id, relation id): outgoing triple count.
    pub out_relation_count: HashMap<(u32, u32), u64>,
}

impl TripleStore {
    pub fn from_triples(triples: Vec<Triple>) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::data("triple store is empty"));
        }
        let mut store = TripleStore::default();
        for t in &triples {
            let s = store.entity_vocab.intern(&t.subject);
            let r = store.relation_vocab.intern(&t.relation);
            store.entity_vocab.intern(&t.object);
            if store.subject_count.len() < store.entity_vocab.len() {
                store.subject_count.resize(store.entity_vocab.len(), 0);
            }
            store.subject_count[s as usize] += 1;
            *store.out_relation_count.entry((s, r)).or_insert(0) += 1;
        }
        store.subject_count.resize(store.entity_vocab.len(), 0);
        store.triples = triples;
        Ok(store)
    }

    pub fn subject_count_of(&self, entity: u32) -> u64 {
        self.subject_count
            .get(entity as usize)
            .copied()
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Parse the tab-separated triple format: one `subject\trelation\tobject`
/// per line, UTF-8, no header, no escaping. Duplicates are kept; they count
/// toward the frequency statistics.
pub fn parse_triples(reader: impl BufRead, path: &str) -> Result<TripleStore> {
    let mut triples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::at(
                path,
                lineno + 1,
                format!("expected 3 tab-separated columns, found {}", cols.len()),
            ));
        }
        let (s, r, o) = (cols[0].trim(), cols[1].trim(), cols[2].trim());
        if s.is_empty() || r.is_empty() || o.is_empty() {
            return Err(Error::at(path, lineno + 1, "empty field in triple"));
        }
        triples.push(Triple {
            subject: s.to_string(),
            relation: r.to_string(),
            object: o.to_string(),
        });
    }
    if triples.is_empty() {
        return Err(Error::data(format!("{path}: no triples found")));
    }
    TripleStore::from_triples(triples)
}

pub fn load_triples(path: impl AsRef<Path>) -> Result<TripleStore> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    parse_triples(std::io::BufReader::new(file), &path.display().to_string())
}

/// Character n-gram inverted index over lowercased entity names. Immutable
/// once built; rebuilding from the same store yields the same index.
#[derive(Debug, Clone)]
pub struct CandidateIndex {
    pub ngram_sizes: Vec<usize>,
    map: HashMap<String, Vec<u32>>,
}

pub const DEFAULT_NGRAM_SIZES: &[usize] = &[3, 4];

fn char_ngrams(text: &str, n: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() < n {
        return Vec::new();
    }
    (0..=chars.len() - n)
        .map(|i| chars[i..i + n].iter().collect())
        .collect()
}

impl CandidateIndex {
    pub fn build(store: &TripleStore, ngram_sizes: &[usize]) -> Self {
        let mut map: HashMap<String, BTreeSet<u32>> = HashMap::new();
        for id in 0..store.entity_vocab.len() as u32 {
            let lower = store.entity_vocab.name(id).to_lowercase();
            for &n in ngram_sizes {
                for gram in char_ngrams(&lower, n) {
                    map.entry(gram).or_default().insert(id);
                }
            }
        }
        CandidateIndex {
            ngram_sizes: ngram_sizes.to_vec(),
            map: map
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
        }
    }

    /// Entity ids sharing at least one n-gram with the (lowercased) word.
    pub fn candidates(&self, word: &str) -> BTreeSet<u32> {
        let lower = word.to_lowercase();
        let mut out = BTreeSet::new();
        for &n in &self.ngram_sizes {
            for gram in char_ngrams(&lower, n) {
                if let Some(ids) = self.map.get(&gram) {
                    out.extend(ids.iter().copied());
                }
            }
        }
        out
    }

    pub fn ngram_count(&self) -> usize {
        self.map.len()
    }

    /// Stable (sorted) view of the whole index, for serialization.
    pub fn entries(&self) -> Vec<(&str, &[u32])> {
        let mut out: Vec<(&str, &[u32])> = self
            .map
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_slice()))
            .collect();
        out.sort_by_key(|(k, _)| *k);
        out
    }

    pub fn from_entries(ngram_sizes: Vec<usize>, entries: Vec<(String, Vec<u32>)>) -> Self {
        CandidateIndex {
            ngram_sizes,
            map: entries.into_iter().collect(),
        }
    }
}

/// Candidate `(entity, relation)` pairs for one word: the cross product of
/// the shortlisted entities with the shortlisted relations, entity-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityRelationSet {
    pub word: String,
    pub pairs: Vec<(u32, u32)>,
}

/// Sort candidate entities by subject frequency, descending; ties break on
/// the entity string, ascending.
pub fn rank_entities(store: &TripleStore, candidates: &BTreeSet<u32>) -> Vec<u32> {
    let mut ranked: Vec<u32> = candidates.iter().copied().collect();
    ranked.sort_by(|&a, &b| {
        store
            .subject_count_of(b)
            .cmp(&store.subject_count_of(a))
            .then_with(|| store.entity_vocab.name(a).cmp(store.entity_vocab.name(b)))
    });
    ranked
}

fn substring_match(word_lower: &str, entity_lower: &str) -> bool {
    entity_lower.contains(word_lower) || word_lower.contains(entity_lower)
}

/// Top-`k1` candidate entities for a word.
pub fn shortlist_entities(
    index: &CandidateIndex,
    store: &TripleStore,
    word: &str,
    k1: usize,
) -> Vec<u32> {
    assert!(k1 >= 1, "k1 must be at least 1");
    let word_lower = word.to_lowercase();
    let candidates: BTreeSet<u32> = index
        .candidates(word)
        .into_iter()
        .filter(|&id| substring_match(&word_lower, &store.entity_vocab.name(id).to_lowercase()))
        .collect();
    let mut ranked = rank_entities(store, &candidates);
    ranked.truncate(k1);
    ranked
}

/// Cross the candidate entities with the `k2` relations that most often
/// leave them. One shared relation list applies to every entity row.
pub fn shortlist_relations(
    store: &TripleStore,
    word: &str,
    candidate_entities: &[u32],
    k2: usize,
) -> EntityRelationSet {
    assert!(k2 >= 1, "k2 must be at least 1");
    let mut totals: HashMap<u32, u64> = HashMap::new();
    for &e in candidate_entities {
        for (&(s, r), &c) in &store.out_relation_count {
            if s == e {
                *totals.entry(r).or_insert(0) += c;
            }
        }
    }
    let mut relations: Vec<u32> = totals.keys().copied().collect();
    relations.sort_by(|&a, &b| {
        totals[&b]
            .cmp(&totals[&a])
            .then_with(|| store.relation_vocab.name(a).cmp(store.relation_vocab.name(b)))
    });
    relations.truncate(k2);

    let mut pairs = Vec::with_capacity(candidate_entities.len() * relations.len());
    for &e in candidate_entities {
        for &r in &relations {
            pairs.push((e, r));
        }
    }
    EntityRelationSet {
        word: word.to_string(),
        pairs,
    }
}

/// Full shortlisting: entities, then relations.
pub fn shortlist(
    index: &CandidateIndex,
    store: &TripleStore,
    word: &str,
    k1: usize,
    k2: usize,
) -> EntityRelationSet {
    let entities = shortlist_entities(index, store, word, k1);
    shortlist_relations(store, word, &entities, k2)
}
