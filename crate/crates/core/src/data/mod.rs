//! Corpora, vocabularies, tag schemes and the synthetic generator.

pub mod conll;
pub mod embeddings;
pub mod scheme;
pub mod synthetic;
pub mod vocab;

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{contract, Result};

pub use scheme::{convert_bio2_to_bioes, convert_bioes_to_bio2, SchemeKind, Span, Tag, TagScheme};
pub use vocab::{CasePolicy, Vocabulary};

/// A tokenized sentence with optional gold label ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub chars: Vec<Vec<char>>,
    pub gold: Option<Vec<usize>>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, gold: Option<Vec<usize>>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(contract("sentence has no tokens"));
        }
        if tokens.iter().any(String::is_empty) {
            return Err(contract("sentence contains an empty token"));
        }
        if let Some(g) = &gold {
            if g.len() != tokens.len() {
                return Err(contract(alloc::format!(
                    "{} labels for {} tokens",
                    g.len(),
                    tokens.len()
                )));
            }
        }
        let chars = tokens.iter().map(|t| t.chars().collect()).collect();
        Ok(Self {
            tokens,
            chars,
            gold,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn gold(&self) -> Result<&[usize]> {
        self.gold
            .as_deref()
            .ok_or_else(|| contract("sentence has no gold labels"))
    }
}

/// Train/dev/test partition of a labeled corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Vec<Sentence>,
}
