//! CoNLL-style column text: one token per line, blank lines between
//! sentences, `-DOCSTART-` lines ignored.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Sentence, TagScheme};
use crate::error::{Error, Result};

/// Which whitespace-separated columns hold the token and the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnSpec {
    pub token: usize,
    /// `None` reads unlabeled text.
    pub label: Option<usize>,
}

impl Default for ColumnSpec {
    /// Token in the first column, label in the last of a CoNLL-2003 row.
    fn default() -> Self {
        Self {
            token: 0,
            label: Some(3),
        }
    }
}

/// Sentence with label strings, before mapping onto a scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSentence {
    pub tokens: Vec<String>,
    pub labels: Option<Vec<String>>,
}

pub fn parse_conll_raw(text: &str, spec: &ColumnSpec) -> Result<Vec<RawSentence>> {
    let needed = spec.label.map_or(spec.token, |l| l.max(spec.token)) + 1;
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, labels: &mut Vec<String>| {
        if !tokens.is_empty() {
            out.push(RawSentence {
                tokens: core::mem::take(tokens),
                labels: spec.label.map(|_| core::mem::take(labels)),
            });
        }
    };
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("-DOCSTART-") {
            flush(&mut tokens, &mut labels);
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < needed {
            return Err(Error::Parse {
                line: n + 1,
                detail: format!("expected at least {needed} columns, found {}", cols.len()),
            });
        }
        tokens.push(cols[spec.token].to_string());
        if let Some(l) = spec.label {
            labels.push(cols[l].to_string());
        }
    }
    flush(&mut tokens, &mut labels);
    Ok(out)
}

/// Parses column text and maps labels through `scheme`. Every unknown label
/// in the file is reported.
pub fn parse_conll(text: &str, spec: &ColumnSpec, scheme: &TagScheme) -> Result<Vec<Sentence>> {
    let raw = parse_conll_raw(text, spec)?;
    let mut unknown: Vec<String> = Vec::new();
    let mut out = Vec::with_capacity(raw.len());
    for r in raw {
        let gold = match &r.labels {
            Some(ls) => match scheme.encode(ls) {
                Ok(ids) => Some(ids),
                Err(Error::UnknownLabel(us)) => {
                    for u in us {
                        if !unknown.contains(&u) {
                            unknown.push(u);
                        }
                    }
                    None
                }
                Err(e) => return Err(e),
            },
            None => None,
        };
        out.push(Sentence::new(r.tokens, gold)?);
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownLabel(unknown));
    }
    Ok(out)
}

/// Writes `token label` rows (or bare tokens when unlabeled).
pub fn write_conll(sentences: &[Sentence], scheme: &TagScheme) -> String {
    let mut s = String::new();
    for sent in sentences {
        for (i, tok) in sent.tokens.iter().enumerate() {
            s.push_str(tok);
            if let Some(g) = &sent.gold {
                s.push(' ');
                s.push_str(scheme.label(g[i]));
            }
            s.push('\n');
        }
        s.push('\n');
    }
    s
}
