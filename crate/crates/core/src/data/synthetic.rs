//! Synthetic corpora with long-range label agreement.
//!
//! Label sequences come from a Markov chain over latent states (one state per
//! label for plain schemes; "outside" plus one state per entity type for
//! BIOES, where an entity state emits a whole segment). Constraint rules tie
//! the segment type at a source anchor to the type at a target anchor, and
//! sequences violating them are resampled. Words at the target are usually
//! drawn from a pool shared by all types, so only the distant source reveals
//! the correct type.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{Sentence, TagScheme};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticScheme {
    Bioes { types: Vec<String> },
    Plain { labels: Vec<String> },
}

/// Token position counted from the start or from the end of a sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    Start(usize),
    End(usize),
}

impl Anchor {
    pub fn resolve(self, len: usize) -> Option<usize> {
        match self {
            Anchor::Start(k) => (k < len).then_some(k),
            Anchor::End(k) => len.checked_sub(k + 1),
        }
    }
}

/// The segment type at `target` must equal the type at `source`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Constraint {
    pub source: Anchor,
    pub target: Anchor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub scheme: SyntheticScheme,
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
    /// Entity segment lengths are uniform on `1..=max_entity_len` (BIOES).
    pub max_entity_len: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub words_per_state: usize,
    pub ambiguous_words: usize,
    /// Probability that an unconstrained entity token uses the shared pool.
    pub ambiguity: f64,
    /// Probability that a constraint-target segment uses the shared pool.
    pub target_ambiguity: f64,
    pub constraints: Vec<Constraint>,
    pub sentences: usize,
    pub seed: u64,
    pub max_retries: usize,
}

impl SyntheticSpec {
    /// Three entity types, first and last token tied together.
    pub fn demo() -> Self {
        let e = [0.79, 0.07, 0.07, 0.07];
        Self {
            scheme: SyntheticScheme::Bioes {
                types: vec!["PER".into(), "ORG".into(), "LOC".into()],
            },
            initial: vec![0.1, 0.3, 0.3, 0.3],
            transitions: vec![e.to_vec(), e.to_vec(), e.to_vec(), e.to_vec()],
            max_entity_len: 3,
            min_len: 12,
            max_len: 30,
            words_per_state: 120,
            ambiguous_words: 40,
            ambiguity: 0.1,
            target_ambiguity: 0.9,
            constraints: vec![Constraint {
                source: Anchor::Start(0),
                target: Anchor::End(0),
            }],
            sentences: 1000,
            seed: 13,
            max_retries: 200,
        }
    }

    pub fn tag_scheme(&self) -> Result<TagScheme> {
        match &self.scheme {
            SyntheticScheme::Bioes { types } => Ok(TagScheme::bioes(types)),
            SyntheticScheme::Plain { labels } => TagScheme::plain(labels),
        }
    }

    pub fn num_states(&self) -> usize {
        match &self.scheme {
            SyntheticScheme::Bioes { types } => types.len() + 1,
            SyntheticScheme::Plain { labels } => labels.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.num_states();
        let bad = |m: String| Err(Error::Config(m));
        if s == 0 {
            return bad("synthetic scheme has no labels".into());
        }
        let sums_to_one = |row: &[f64]| {
            row.iter().all(|p| *p >= 0.0 && p.is_finite())
                && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        if self.initial.len() != s || !sums_to_one(&self.initial) {
            return bad(format!("initial distribution must have {s} entries summing to 1"));
        }
        if self.transitions.len() != s {
            return bad(format!("transition matrix must have {s} rows"));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.len() != s || !sums_to_one(row) {
                return bad(format!("transition row {i} must have {s} entries summing to 1"));
            }
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("sentence lengths need 1 <= min_len <= max_len".into());
        }
        if self.max_entity_len == 0 {
            return bad("max_entity_len must be positive".into());
        }
        if self.words_per_state == 0 || self.ambiguous_words == 0 {
            return bad("word pools must be non-empty".into());
        }
        for p in [self.ambiguity, self.target_ambiguity] {
            if !(0.0..=1.0).contains(&p) {
                return bad("ambiguity probabilities must lie in [0, 1]".into());
            }
        }
        for c in &self.constraints {
            for a in [c.source, c.target] {
                if a.resolve(self.min_len).is_none() {
                    return bad(format!("constraint anchor {a:?} invalid for length {}", self.min_len));
                }
            }
        }
        Ok(())
    }

    /// Constraint target positions in a sentence of length `len`.
    pub fn target_positions(&self, len: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .constraints
            .iter()
            .filter_map(|c| c.target.resolve(len))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub scheme: TagScheme,
    pub sentences: Vec<Sentence>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ren", "to", "sa", "vu", "ne", "di", "ro", "pe", "ga", "zu", "fi", "ha", "jo",
];
const SUFFIXES: [&str; 8] = ["son", "corp", "ville", "stan", "ium", "berg", "ix", "ard"];

fn stem(index: usize, salt: usize) -> String {
    let mut s = String::new();
    let mut k = index * 7 + salt * 131 + 3;
    for _ in 0..2 + index % 2 {
        s.push_str(SYLLABLES[k % SYLLABLES.len()]);
        k /= SYLLABLES.len();
        k += index + 1;
    }
    s.push_str(&format!("{index}"));
    s
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Skewed index in `0..size`, favoring small ids.
fn skewed(size: usize, rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    ((u * u) * size as f64) as usize % size
}

fn sample(dist: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

struct Draft {
    labels: Vec<usize>,
    /// Segment type per token (`None` = outside).
    types: Vec<Option<usize>>,
    /// Segment index per token.
    segment: Vec<usize>,
}

fn draw_sequence(spec: &SyntheticSpec, scheme: &TagScheme, rng: &mut Rng) -> Draft {
    let n = rng.gen_range(spec.min_len..=spec.max_len);
    let mut labels = Vec::with_capacity(n);
    let mut types = Vec::with_capacity(n);
    let mut segment = Vec::with_capacity(n);
    let mut state = sample(&spec.initial, rng);
    let mut seg = 0;
    while labels.len() < n {
        match &spec.scheme {
            SyntheticScheme::Plain { .. } => {
                labels.push(state);
                types.push(Some(state));
                segment.push(seg);
            }
            SyntheticScheme::Bioes { .. } => {
                if state == 0 {
                    labels.push(scheme.label_for(super::Tag::O, 0));
                    types.push(None);
                    segment.push(seg);
                } else {
                    let t = state - 1;
                    let len = rng
                        .gen_range(1..=spec.max_entity_len)
                        .min(n - labels.len());
                    let span = super::Span {
                        start: 0,
                        end: len,
                        kind: t,
                    };
                    labels.extend(scheme.encode_spans(&[span], len));
                    types.extend(core::iter::repeat(Some(t)).take(len));
                    segment.extend(core::iter::repeat(seg).take(len));
                }
            }
        }
        seg += 1;
        state = sample(&spec.transitions[state], rng);
    }
    Draft {
        labels,
        types,
        segment,
    }
}

fn satisfied(spec: &SyntheticSpec, d: &Draft) -> bool {
    let n = d.labels.len();
    spec.constraints.iter().all(|c| {
        match (c.source.resolve(n), c.target.resolve(n)) {
            (Some(s), Some(t)) => d.types[s] == d.types[t],
            _ => true,
        }
    })
}

/// Vocabulary of the generator: distinctive pools per latent state plus the
/// shared ambiguous pool.
fn pool_word(spec: &SyntheticSpec, state: usize, index: usize) -> String {
    match &spec.scheme {
        SyntheticScheme::Bioes { .. } if state == 0 => stem(index, 0),
        _ => {
            let suffix = SUFFIXES[(state + SUFFIXES.len() - 1) % SUFFIXES.len()];
            capitalize(&format!("{}{suffix}", stem(index, state)))
        }
    }
}

fn ambiguous_word(index: usize) -> String {
    capitalize(&format!("{}o", stem(index, 97)))
}

fn emit(spec: &SyntheticSpec, d: &Draft, rng: &mut Rng) -> Vec<String> {
    let n = d.labels.len();
    let mut target_segments = Vec::new();
    let mut source_segments = Vec::new();
    for c in &spec.constraints {
        if let (Some(s), Some(t)) = (c.source.resolve(n), c.target.resolve(n)) {
            source_segments.push(d.segment[s]);
            target_segments.push(d.segment[t]);
        }
    }
    // One draw per target segment so the whole segment shares its evidence.
    let mut segment_ambiguous: Vec<(usize, bool)> = Vec::new();
    (0..n)
        .map(|i| {
            let state = match (&spec.scheme, d.types[i]) {
                (SyntheticScheme::Plain { .. }, _) => d.labels[i],
                (_, None) => 0,
                (_, Some(t)) => t + 1,
            };
            let is_entity = !matches!((&spec.scheme, d.types[i]), (SyntheticScheme::Bioes { .. }, None));
            let seg = d.segment[i];
            let ambiguous = if !is_entity || source_segments.contains(&seg) {
                false
            } else if target_segments.contains(&seg) {
                match segment_ambiguous.iter().find(|(s, _)| *s == seg) {
                    Some(&(_, a)) => a,
                    None => {
                        let a = rng.gen_bool(spec.target_ambiguity);
                        segment_ambiguous.push((seg, a));
                        a
                    }
                }
            } else {
                rng.gen_bool(spec.ambiguity)
            };
            if ambiguous {
                ambiguous_word(skewed(spec.ambiguous_words, rng))
            } else {
                pool_word(spec, state, skewed(spec.words_per_state, rng))
            }
        })
        .collect()
}

/// Generates `spec.sentences` sentences; sentence `k` depends only on
/// `(spec, k)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let scheme = spec.tag_scheme()?;
    let mut sentences = Vec::with_capacity(spec.sentences);
    for k in 0..spec.sentences {
        let mut r = rng::substream(spec.seed, k as u64);
        let mut accepted = None;
        for _ in 0..spec.max_retries.max(1) {
            let d = draw_sequence(spec, &scheme, &mut r);
            if satisfied(spec, &d) {
                accepted = Some(d);
                break;
            }
        }
        let d = accepted.ok_or_else(|| {
            Error::Generation(format!(
                "sentence {k}: no sequence satisfied the constraints after {} retries",
                spec.max_retries
            ))
        })?;
        let words = emit(spec, &d, &mut r);
        sentences.push(Sentence::new(words, Some(d.labels))?);
    }
    Ok(SyntheticCorpus { scheme, sentences })
}

impl SyntheticCorpus {
    /// Consecutive train/dev/test slices.
    pub fn split(self, dev: usize, test: usize) -> Result<super::Splits> {
        let n = self.sentences.len();
        if dev + test >= n {
            return Err(Error::Config(format!(
                "dev {dev} + test {test} leaves no training data out of {n}"
            )));
        }
        let mut train = self.sentences;
        let test_part = train.split_off(n - test);
        let dev_part = train.split_off(n - test - dev);
        Ok(super::Splits {
            train,
            dev: dev_part,
            test: test_part,
        })
    }
}

pub fn describe_anchor(a: Anchor) -> String {
    match a {
        Anchor::Start(k) => format!("start+{k}"),
        Anchor::End(k) => format!("end-{k}"),
    }
}

pub fn parse_anchor(s: &str) -> Result<Anchor> {
    let bad = || Error::Config(format!("bad anchor {s:?}; expected start+K or end-K"));
    if let Some(k) = s.strip_prefix("start+") {
        return k.parse().map(Anchor::Start).map_err(|_| bad());
    }
    if let Some(k) = s.strip_prefix("end-") {
        return k.parse().map(Anchor::End).map_err(|_| bad());
    }
    match s {
        "start" => Ok(Anchor::Start(0)),
        "end" => Ok(Anchor::End(0)),
        _ => Err(bad()),
    }
}

impl core::fmt::Display for Anchor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&describe_anchor(*self))
    }
}
