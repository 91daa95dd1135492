//! Corpus loading and the prediction/draft column dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use uanet_core::data::conll::{parse_conll_raw, write_conll, ColumnSpec, RawSentence};
use uanet_core::data::embeddings::parse_embeddings;
use uanet_core::data::synthetic::{generate_synthetic, SyntheticSpec};
use uanet_core::data::{convert_bio2_to_bioes, Sentence, Splits, TagScheme};
use uanet_core::model::Prediction;

use crate::config::{Config, DataSource, InputScheme};
use crate::error::{read_to_string, AppError, Result};

#[derive(Debug, Clone)]
pub struct Corpus {
    pub scheme: TagScheme,
    pub splits: Splits,
    /// Present for synthetic corpora; locates the long-range targets.
    pub synthetic: Option<SyntheticSpec>,
}

impl Corpus {
    /// Constraint-target positions of every sentence, when known.
    pub fn target_positions(&self, sentences: &[Sentence]) -> Option<Vec<Vec<usize>>> {
        let spec = self.synthetic.as_ref()?;
        Some(sentences.iter().map(|s| spec.target_positions(s.len())).collect())
    }
}

pub fn load_corpus(cfg: &Config) -> Result<Corpus> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let spec = cfg.synthetic.spec()?;
            let corpus = generate_synthetic(&spec)?;
            let scheme = corpus.scheme.clone();
            let splits = corpus
                .split(cfg.data.dev_size, cfg.data.test_size)
                .map_err(|e| AppError::config("data.dev_size", e.to_string()))?;
            Ok(Corpus {
                scheme,
                splits,
                synthetic: Some(spec),
            })
        }
        DataSource::Files => {
            let spec = ColumnSpec {
                token: cfg.data.token_column,
                label: Some(cfg.data.label_column),
            };
            let mut raw = Vec::new();
            for (key, path) in [("data.train", &cfg.data.train), ("data.dev", &cfg.data.dev), ("data.test", &cfg.data.test)] {
                let path = path.as_ref().ok_or_else(|| AppError::config(key, "required when data.source = \"files\""))?;
                raw.push(read_raw(path, &spec, cfg.data.scheme)?);
            }
            let labels: Vec<&String> = raw
                .iter()
                .flatten()
                .flat_map(|s| s.labels.iter().flatten())
                .collect();
            let scheme = match cfg.data.scheme {
                InputScheme::Plain => {
                    let mut set: Vec<&String> = labels.clone();
                    set.sort();
                    set.dedup();
                    TagScheme::plain(&set)?
                }
                _ => TagScheme::bioes_from_labels(&labels)?,
            };
            let mut it = raw.into_iter().map(|r| to_sentences(r, &scheme));
            Ok(Corpus {
                splits: Splits {
                    train: it.next().expect("three splits")?,
                    dev: it.next().expect("three splits")?,
                    test: it.next().expect("three splits")?,
                },
                scheme,
                synthetic: None,
            })
        }
    }
}

/// Reads a column file; BIO2 labels are rewritten to BIOES.
pub fn read_raw(path: &Path, spec: &ColumnSpec, scheme: InputScheme) -> Result<Vec<RawSentence>> {
    let text = read_to_string(path)?;
    let with_path = |e: uanet_core::Error| AppError::Input {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut raw = parse_conll_raw(&text, spec).map_err(with_path)?;
    if scheme == InputScheme::Bio2 {
        for s in &mut raw {
            if let Some(l) = &mut s.labels {
                *l = convert_bio2_to_bioes(l).map_err(with_path)?;
            }
        }
    }
    Ok(raw)
}

fn to_sentences(raw: Vec<RawSentence>, scheme: &TagScheme) -> Result<Vec<Sentence>> {
    raw.into_iter()
        .map(|r| {
            let gold = r.labels.as_ref().map(|l| scheme.encode(l)).transpose()?;
            Ok(Sentence::new(r.tokens, gold)?)
        })
        .collect()
}

/// Unlabeled or labeled input for `predict`.
pub fn read_input(path: &Path, cfg: &Config, scheme: &TagScheme, labeled: bool) -> Result<Vec<Sentence>> {
    let spec = ColumnSpec {
        token: cfg.data.token_column,
        label: labeled.then_some(cfg.data.label_column),
    };
    to_sentences(read_raw(path, &spec, cfg.data.scheme)?, scheme)
}

pub fn load_embeddings(cfg: &Config) -> Result<Option<BTreeMap<String, Vec<f64>>>> {
    let Some(path) = &cfg.data.embeddings else {
        return Ok(None);
    };
    let text = read_to_string(path)?;
    parse_embeddings(&text, cfg.encoder.word_dim)
        .map(Some)
        .map_err(|e| AppError::Input {
            path: path.clone(),
            detail: e.to_string(),
        })
}

pub fn corpus_text(sentences: &[Sentence], scheme: &TagScheme) -> String {
    write_conll(sentences, scheme)
}

/// `token [gold] final uncertainty source`, one token per line.
pub fn prediction_text(sentences: &[Sentence], preds: &[Prediction], scheme: &TagScheme) -> String {
    let mut s = String::new();
    for (sent, p) in sentences.iter().zip(preds) {
        for i in 0..sent.len() {
            s.push_str(&sent.tokens[i]);
            if let Some(g) = &sent.gold {
                s.push(' ');
                s.push_str(scheme.label(g[i]));
            }
            let _ = writeln!(
                s,
                " {} {:.6} {}",
                scheme.label(p.labels[i]),
                p.draft.uncertainty[i],
                p.sources[i].name()
            );
        }
        s.push('\n');
    }
    s
}

/// `token [gold] draft uncertainty`, one token per line.
pub fn draft_text(sentences: &[Sentence], preds: &[Prediction], scheme: &TagScheme) -> String {
    let mut s = String::new();
    for (sent, p) in sentences.iter().zip(preds) {
        for i in 0..sent.len() {
            s.push_str(&sent.tokens[i]);
            if let Some(g) = &sent.gold {
                s.push(' ');
                s.push_str(scheme.label(g[i]));
            }
            let _ = writeln!(s, " {} {:.6}", scheme.label(p.draft.labels[i]), p.draft.uncertainty[i]);
        }
        s.push('\n');
    }
    s
}

/// Parsed prediction row.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub token: String,
    pub gold: Option<String>,
    pub label: String,
    pub uncertainty: f64,
    pub source: String,
}

/// Reads back [`prediction_text`] output, one vector per sentence.
pub fn parse_predictions(text: &str) -> std::result::Result<Vec<Vec<PredictionRow>>, String> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            continue;
        }
        let c: Vec<&str> = line.split_whitespace().collect();
        let (gold, rest) = match c.len() {
            4 => (None, &c[1..]),
            5 => (Some(c[1].to_string()), &c[2..]),
            k => return Err(format!("line {}: {k} columns", n + 1)),
        };
        cur.push(PredictionRow {
            token: c[0].to_string(),
            gold,
            label: rest[0].to_string(),
            uncertainty: rest[1].parse().map_err(|e| format!("line {}: {e}", n + 1))?,
            source: rest[2].to_string(),
        });
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    Ok(out)
}
