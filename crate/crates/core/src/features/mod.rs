//! The six token feature levels and their assembly.
//!
//! Levels concatenate in the fixed order word, char, context, sentence,
//! document, global. A disabled level contributes zero width rather than a
//! zero vector, so parameter counts track ablations honestly.

pub mod context;
pub mod document;
pub mod intnet;
pub mod sentence;
pub mod vectors;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use context::{ContextProvider, FallbackContext};
pub use document::DocumentMemory;
pub use intnet::{IntNet, IntNetConfig};
pub use sentence::SentenceAttention;
pub use vectors::{load_vector_file, ContextVectorFile, VectorFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Word,
    Char,
    Context,
    Sentence,
    Document,
    Global,
}

pub const LEVEL_ORDER: [Level; 6] = [
    Level::Word,
    Level::Char,
    Level::Context,
    Level::Sentence,
    Level::Document,
    Level::Global,
];

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Word => "word",
            Level::Char => "char",
            Level::Context => "context",
            Level::Sentence => "sentence",
            Level::Document => "document",
            Level::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Result<Level> {
        match s.trim().to_ascii_lowercase().as_str() {
            "word" => Ok(Level::Word),
            "char" => Ok(Level::Char),
            "context" => Ok(Level::Context),
            "sentence" => Ok(Level::Sentence),
            "document" => Ok(Level::Document),
            "global" => Ok(Level::Global),
            other => Err(Error::config(format!("unknown feature level {other:?}"))),
        }
    }

    fn slot(self) -> usize {
        LEVEL_ORDER.iter().position(|&l| l == self).unwrap()
    }
}

/// Which feature levels are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSet {
    enabled: [bool; 6],
}

impl LevelSet {
    pub fn none() -> Self {
        LevelSet { enabled: [false; 6] }
    }

    pub fn all() -> Self {
        LevelSet { enabled: [true; 6] }
    }

    pub fn word_only() -> Self {
        let mut s = Self::none();
        s.enable(Level::Word);
        s
    }

    /// The first `n` levels of the ladder.
    pub fn prefix(n: usize) -> Self {
        let mut s = Self::none();
        for &l in LEVEL_ORDER.iter().take(n) {
            s.enable(l);
        }
        s
    }

    pub fn from_names(names: &[&str]) -> Result<Self> {
        let mut s = Self::none();
        for n in names {
            s.enable(Level::parse(n)?);
        }
        Ok(s)
    }

    pub fn enable(&mut self, level: Level) {
        self.enabled[level.slot()] = true;
    }

    pub fn contains(&self, level: Level) -> bool {
        self.enabled[level.slot()]
    }

    pub fn names(&self) -> Vec<&'static str> {
        LEVEL_ORDER
            .iter()
            .filter(|l| self.contains(**l))
            .map(|l| l.name())
            .collect()
    }

    pub fn is_ladder_prefix(&self) -> bool {
        let mut seen_disabled = false;
        for &l in &LEVEL_ORDER {
            if self.contains(l) {
                if seen_disabled {
                    return false;
                }
            } else {
                seen_disabled = true;
            }
        }
        self.contains(Level::Word)
    }

    /// Sentence, document and global features all consume contextual
    /// vectors; document additionally keys its memory by word embeddings.
    pub fn validate(&self) -> Result<()> {
        if !LEVEL_ORDER.iter().any(|&l| self.contains(l)) {
            return Err(Error::config("no feature level enabled"));
        }
        let need_context = [Level::Sentence, Level::Document, Level::Global];
        for l in need_context {
            if self.contains(l) && !self.contains(Level::Context) {
                return Err(Error::config(format!(
                    "feature level {} requires the context level",
                    l.name()
                )));
            }
        }
        if self.contains(Level::Document) && !self.contains(Level::Word) {
            return Err(Error::config(
                "feature level document requires the word level",
            ));
        }
        Ok(())
    }
}

impl Default for LevelSet {
    fn default() -> Self {
        Self::all()
    }
}

/// Feature-stack hyperparameters. Dimensions of the six slots derive from
/// these plus the graph-embedding hidden size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub levels: LevelSet,
    pub word_dim: usize,
    pub intnet: IntNetConfig,
    pub context_dim: usize,
    pub context_heads: usize,
    pub context_layers: usize,
    /// Projection dimension d for label attention.
    pub label_attn_dim: usize,
    /// Half-window k of the label-attention convolution.
    pub label_attn_kernel: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            levels: LevelSet::all(),
            word_dim: 100,
            intnet: IntNetConfig::default(),
            context_dim: 64,
            context_heads: 4,
            context_layers: 1,
            label_attn_dim: 64,
            label_attn_kernel: 2,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        self.levels.validate()?;
        self.intnet.validate()?;
        if !self.context_dim.is_multiple_of(self.context_heads) {
            return Err(Error::config(format!(
                "features: context_dim {} not divisible by context_heads {}",
                self.context_dim, self.context_heads
            )));
        }
        Ok(())
    }
}

/// Materialized per-token features: one slice per level (empty when the
/// level is disabled) and their in-order concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub parts: [Vec<f64>; 6],
    pub concat: Vec<f64>,
}

impl TokenFeatures {
    pub fn part(&self, level: Level) -> &[f64] {
        &self.parts[level.slot()]
    }
}

/// Concatenate the six per-level slices in fixed order, checking each slice
/// against its configured width (0 = disabled = must be empty).
pub fn assemble(parts: [Vec<f64>; 6], expected_dims: &[usize; 6]) -> Result<TokenFeatures> {
    for (i, (part, &want)) in parts.iter().zip(expected_dims).enumerate() {
        if part.len() != want {
            return Err(Error::ShapeMismatch {
                op: "assemble",
                lhs: vec![LEVEL_ORDER[i].slot(), part.len()],
                rhs: vec![LEVEL_ORDER[i].slot(), want],
            });
        }
    }
    let mut concat = Vec::with_capacity(expected_dims.iter().sum());
    for part in &parts {
        concat.extend_from_slice(part);
    }
    Ok(TokenFeatures { parts, concat })
}
