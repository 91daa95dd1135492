//! Declarative run configuration (TOML) with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uanet_core::data::synthetic::{parse_anchor, Constraint, SyntheticScheme, SyntheticSpec};
use uanet_core::data::CasePolicy;
use uanet_core::decode::{DecodeConfig, DecoderKind};
use uanet_core::encoder::EncoderConfig;
use uanet_core::refiner::RefinerConfig;
use uanet_core::train::{AdamConfig, SgdConfig, TrainConfig};

use crate::error::{read_to_string, AppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub data: DataSection,
    pub synthetic: SyntheticSection,
    pub encoder: EncoderSection,
    pub refiner: RefinerSection,
    pub decode: DecodeSection,
    pub train: TrainSection,
    pub bench: BenchSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataSection::default(),
            synthetic: SyntheticSection::default(),
            encoder: EncoderSection::default(),
            refiner: RefinerSection::default(),
            decode: DecodeSection::default(),
            train: TrainSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputScheme {
    /// Labels are converted from BIO2 to BIOES on load.
    Bio2,
    Bioes,
    /// Flat tag set such as POS tags.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// CoNLL files, used when `source = "files"`. Relative paths resolve
    /// against the config file's directory.
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub token_column: usize,
    pub label_column: usize,
    pub scheme: InputScheme,
    /// Optional pretrained vectors, one `word v1 v2 …` per line.
    pub embeddings: Option<PathBuf>,
    pub lowercase: bool,
    pub normalize_digits: bool,
    /// Synthetic split sizes; the rest is training data.
    pub dev_size: usize,
    pub test_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            train: None,
            dev: None,
            test: None,
            token_column: 0,
            label_column: 3,
            scheme: InputScheme::Bio2,
            embeddings: None,
            lowercase: true,
            normalize_digits: true,
            dev_size: 200,
            test_size: 200,
        }
    }
}

impl DataSection {
    pub fn case_policy(&self) -> CasePolicy {
        CasePolicy {
            lowercase_words: self.lowercase,
            normalize_digits: self.normalize_digits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    /// `start+k` or `end-k`.
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Bioes,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub scheme: SyntheticKind,
    /// Entity types for `bioes`, the tag set for `plain`.
    pub labels: Vec<String>,
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
    pub max_entity_len: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub words_per_state: usize,
    pub ambiguous_words: usize,
    pub ambiguity: f64,
    pub target_ambiguity: f64,
    pub constraints: Vec<ConstraintSection>,
    pub sentences: usize,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let d = SyntheticSpec::demo();
        let labels = match d.scheme {
            SyntheticScheme::Bioes { types } => types,
            SyntheticScheme::Plain { labels } => labels,
        };
        Self {
            scheme: SyntheticKind::Bioes,
            labels,
            initial: d.initial,
            transitions: d.transitions,
            max_entity_len: d.max_entity_len,
            min_len: d.min_len,
            max_len: d.max_len,
            words_per_state: d.words_per_state,
            ambiguous_words: d.ambiguous_words,
            ambiguity: d.ambiguity,
            target_ambiguity: d.target_ambiguity,
            constraints: d
                .constraints
                .iter()
                .map(|c| ConstraintSection {
                    source: c.source.to_string(),
                    target: c.target.to_string(),
                })
                .collect(),
            sentences: d.sentences,
            seed: d.seed,
            max_retries: d.max_retries,
        }
    }
}

impl SyntheticSection {
    pub fn spec(&self) -> Result<SyntheticSpec> {
        let mut constraints = Vec::with_capacity(self.constraints.len());
        for (i, c) in self.constraints.iter().enumerate() {
            let anchor = |field: &str, s: &str| {
                parse_anchor(s).map_err(|e| AppError::config(format!("synthetic.constraints[{i}].{field}"), e.to_string()))
            };
            constraints.push(Constraint {
                source: anchor("source", &c.source)?,
                target: anchor("target", &c.target)?,
            });
        }
        let spec = SyntheticSpec {
            scheme: match self.scheme {
                SyntheticKind::Bioes => SyntheticScheme::Bioes {
                    types: self.labels.clone(),
                },
                SyntheticKind::Plain => SyntheticScheme::Plain {
                    labels: self.labels.clone(),
                },
            },
            initial: self.initial.clone(),
            transitions: self.transitions.clone(),
            max_entity_len: self.max_entity_len,
            min_len: self.min_len,
            max_len: self.max_len,
            words_per_state: self.words_per_state,
            ambiguous_words: self.ambiguous_words,
            ambiguity: self.ambiguity,
            target_ambiguity: self.target_ambiguity,
            constraints,
            sentences: self.sentences,
            seed: self.seed,
            max_retries: self.max_retries,
        };
        spec.validate().map_err(|e| AppError::config("synthetic", e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_filters: usize,
    pub hidden: usize,
    pub embed_dropout: f64,
    pub recurrent_dropout: f64,
    pub mc_embedding_dropout: bool,
    pub crf: bool,
    /// Forbid illegal BIOES transitions in the CRF.
    pub crf_mask: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::default();
        Self {
            word_dim: d.word_dim,
            char_dim: d.char_dim,
            char_filters: d.char_filters,
            hidden: d.hidden,
            embed_dropout: d.embed_dropout,
            recurrent_dropout: d.recurrent_dropout,
            mc_embedding_dropout: d.mc_embedding_dropout,
            crf: d.crf,
            crf_mask: true,
        }
    }
}

impl EncoderSection {
    pub fn core(&self) -> EncoderConfig {
        EncoderConfig {
            word_dim: self.word_dim,
            char_dim: self.char_dim,
            char_filters: self.char_filters,
            hidden: self.hidden,
            embed_dropout: self.embed_dropout,
            recurrent_dropout: self.recurrent_dropout,
            mc_embedding_dropout: self.mc_embedding_dropout,
            crf: self.crf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerSection {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub layer_norm_eps: f64,
    pub label_stream: bool,
}

impl Default for RefinerSection {
    fn default() -> Self {
        let d = RefinerConfig::default();
        Self {
            d_model: d.d_model,
            heads: d.heads,
            head_dim: d.head_dim,
            layers: d.layers,
            ff_dim: d.ff_dim,
            max_len: d.max_len,
            layer_norm_eps: d.layer_norm_eps,
            label_stream: d.label_stream,
        }
    }
}

impl RefinerSection {
    pub fn core(&self) -> RefinerConfig {
        RefinerConfig {
            d_model: self.d_model,
            heads: self.heads,
            head_dim: self.head_dim,
            layers: self.layers,
            ff_dim: self.ff_dim,
            max_len: self.max_len,
            layer_norm_eps: self.layer_norm_eps,
            label_stream: self.label_stream,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    /// `softmax`, `crf` or `mix`.
    pub decoder: String,
    pub gamma: f64,
    pub samples: usize,
    pub legalize: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let d = DecodeConfig::default();
        Self {
            decoder: d.decoder.name().into(),
            gamma: d.gamma,
            samples: d.samples,
            legalize: d.legalize,
        }
    }
}

impl DecodeSection {
    pub fn core(&self) -> Result<DecodeConfig> {
        let decoder = DecoderKind::parse(&self.decoder).ok_or_else(|| {
            AppError::config("decode.decoder", format!("unknown decoder `{}` (softmax, crf, mix)", self.decoder))
        })?;
        let c = DecodeConfig {
            decoder,
            gamma: self.gamma,
            samples: self.samples,
            legalize: self.legalize,
        };
        c.validate().map_err(|e| AppError::config("decode", e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdSection {
    pub lr: f64,
    pub decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdSection,
    pub adam: AdamSection,
    /// Gradient-norm bound; 0 disables clipping.
    pub clip: f64,
    /// Rate in the weight penalty; negative means "use the recurrent rate".
    pub penalty_rate: f64,
    pub unk_replace: f64,
    /// 0 disables early stopping.
    pub patience: usize,
    pub gamma_step: f64,
    pub joint: bool,
}

impl Default for SgdSection {
    fn default() -> Self {
        let d = TrainConfig::default().sgd;
        Self { lr: d.lr, decay: d.decay }
    }
}

impl Default for AdamSection {
    fn default() -> Self {
        let d = AdamConfig::default();
        Self {
            lr: d.lr,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            stage1_epochs: d.stage1_epochs,
            stage2_epochs: d.stage2_epochs,
            batch_size: d.batch_size,
            sgd: SgdSection::default(),
            adam: AdamSection::default(),
            clip: d.clip.unwrap_or(0.0),
            penalty_rate: -1.0,
            unk_replace: d.unk_replace,
            patience: d.patience.unwrap_or(0),
            gamma_step: d.gamma_step,
            joint: d.joint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Label-set sizes for the scaling fit.
    pub label_sizes: Vec<usize>,
    /// Sentence length used for the scaling fit.
    pub scaling_length: usize,
    /// Label-set size of the throughput table.
    pub labels: usize,
    /// One representative length per bucket.
    pub lengths: Vec<usize>,
    /// Sentences per timed batch.
    pub sentences: usize,
    /// Timings per cell; the median is reported.
    pub repeats: usize,
    /// A timed batch shorter than this is repeated until it is not.
    pub min_batch_ms: f64,
    pub warmup: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            label_sizes: vec![5, 10, 20, 40, 80],
            scaling_length: 30,
            labels: 73,
            lengths: vec![5, 15, 25, 35, 45],
            sentences: 50,
            repeats: 7,
            min_batch_ms: 5.0,
            warmup: 2,
        }
    }
}

impl Config {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let c = TrainConfig {
            stage1_epochs: t.stage1_epochs,
            stage2_epochs: t.stage2_epochs,
            batch_size: t.batch_size,
            sgd: SgdConfig {
                lr: t.sgd.lr,
                decay: t.sgd.decay,
            },
            adam: AdamConfig {
                lr: t.adam.lr,
                beta1: t.adam.beta1,
                beta2: t.adam.beta2,
                eps: t.adam.eps,
            },
            clip: (t.clip > 0.0).then_some(t.clip),
            penalty_rate: (t.penalty_rate >= 0.0).then_some(t.penalty_rate),
            unk_replace: t.unk_replace,
            patience: (t.patience > 0).then_some(t.patience),
            samples: self.decode.samples,
            gamma_step: t.gamma_step,
            joint: t.joint,
            seed: self.seed,
        };
        c.validate().map_err(|e| AppError::config("train", e.to_string()))?;
        Ok(c)
    }

    /// Checks every section that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        self.encoder
            .core()
            .validate()
            .map_err(|e| AppError::config("encoder", e.to_string()))?;
        self.refiner
            .core()
            .validate()
            .map_err(|e| AppError::config("refiner", e.to_string()))?;
        self.decode.core()?;
        self.train_config()?;
        if self.data.source == DataSource::Synthetic {
            self.synthetic.spec()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolves relative data paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        for p in [&mut self.data.train, &mut self.data.dev, &mut self.data.test, &mut self.data.embeddings]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Parses TOML text, applies `key=value` overrides, and deserializes with
/// unknown keys rejected.
pub fn parse(text: &str, overrides: &[String]) -> Result<Config> {
    let mut value: toml::Value = toml::from_str(text).map_err(|e| {
        let key = e.span().map(|s| locate_key(text, s.start)).unwrap_or_default();
        AppError::config(key, e.message().to_string())
    })?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: Config = serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        AppError::config(key, e.inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    match path {
        Some(p) => {
            let mut cfg = parse(&read_to_string(p)?, overrides)?;
            cfg.rebase(p.parent().unwrap_or(Path::new(".")));
            Ok(cfg)
        }
        None => parse("", overrides),
    }
}

/// Best-effort key name for a syntax error at byte `offset`.
fn locate_key(text: &str, offset: usize) -> String {
    let line = text[..offset.min(text.len())].lines().last().unwrap_or("");
    line.split('=').next().unwrap_or("").trim().to_string()
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| AppError::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(AppError::config(key, "empty key segment"));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| AppError::config(parts[..i].join("."), "not a table"))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("key has at least one segment")
}
