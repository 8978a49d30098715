//! Knowledge-aware sequence labeling at desk scale.
//!
//! The crate trains a contextualized knowledge-graph embedding model by
//! masked object prediction over fact triplets, shortlists candidate
//! entities/relations per word from a triple store, fuses encoded candidate
//! triplets into a per-word global feature by attention, stacks that feature
//! with word/char/context/sentence/document features, and tags sequences
//! with a relative-position transformer encoder plus a CRF decoder. All
//! training runs on the crate's own reverse-mode tape; no external ML
//! framework is involved.

#![allow(clippy::needless_range_loop)]

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod conll;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod kg;
pub mod kge;
pub mod ner;
pub mod nn;
pub mod rng;
pub mod tags;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
