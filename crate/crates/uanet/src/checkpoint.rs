//! JSON checkpoints: every parameter by name with its shape and row-major
//! values, plus what is needed to rebuild the tagger around them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use uanet_core::data::{SchemeKind, TagScheme, Vocabulary};
use uanet_core::model::Tagger;
use uanet_core::tensor::Tensor;
use uanet_core::ParamStore;

use crate::config::{DecodeSection, EncoderSection, RefinerSection};
use crate::error::{read_to_string, AppError, Result};

pub const FORMAT: &str = "uanet-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub metadata: Metadata,
    pub params: Vec<StoredParam>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub seed: u64,
    pub scheme: StoredScheme,
    pub vocab: StoredVocab,
    pub encoder: EncoderSection,
    pub refiner: RefinerSection,
    pub decode: DecodeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredScheme {
    /// `bioes` or `plain`.
    pub kind: String,
    /// Segment types (BIOES) or the tag set (plain), in id order.
    pub types: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredVocab {
    pub lowercase: bool,
    pub normalize_digits: bool,
    pub words: Vec<String>,
    pub chars: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

fn store_params(store: &ParamStore, out: &mut Vec<StoredParam>) {
    out.extend(store.iter().map(|p| StoredParam {
        name: p.name.clone(),
        shape: p.value.shape().to_vec(),
        values: p.value.data().to_vec(),
    }));
}

impl Checkpoint {
    pub fn from_tagger(t: &Tagger, seed: u64) -> Self {
        let mut params = Vec::new();
        store_params(&t.encoder.params, &mut params);
        store_params(&t.refiner.params, &mut params);
        let e = &t.encoder.config;
        let r = &t.refiner.config;
        let d = &t.decode;
        let policy = t.vocab.policy();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            metadata: Metadata {
                seed,
                scheme: StoredScheme {
                    kind: match t.scheme.kind() {
                        SchemeKind::Bioes => "bioes".into(),
                        SchemeKind::Plain => "plain".into(),
                    },
                    types: match t.scheme.kind() {
                        SchemeKind::Bioes => t.scheme.types().to_vec(),
                        SchemeKind::Plain => t.scheme.labels().to_vec(),
                    },
                },
                vocab: StoredVocab {
                    lowercase: policy.lowercase_words,
                    normalize_digits: policy.normalize_digits,
                    words: t.vocab.words().to_vec(),
                    chars: t.vocab.chars().iter().collect(),
                },
                encoder: EncoderSection {
                    word_dim: e.word_dim,
                    char_dim: e.char_dim,
                    char_filters: e.char_filters,
                    hidden: e.hidden,
                    embed_dropout: e.embed_dropout,
                    recurrent_dropout: e.recurrent_dropout,
                    mc_embedding_dropout: e.mc_embedding_dropout,
                    crf: e.crf,
                    crf_mask: t.crf_mask,
                },
                refiner: RefinerSection {
                    d_model: r.d_model,
                    heads: r.heads,
                    head_dim: r.head_dim,
                    layers: r.layers,
                    ff_dim: r.ff_dim,
                    max_len: r.max_len,
                    layer_norm_eps: r.layer_norm_eps,
                    label_stream: r.label_stream,
                },
                decode: DecodeSection {
                    decoder: d.decoder.name().into(),
                    gamma: d.gamma,
                    samples: d.samples,
                    legalize: d.legalize,
                },
            },
            params,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::error::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let bad = |detail: String| AppError::Checkpoint {
            path: path.to_path_buf(),
            detail,
        };
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if c.format != FORMAT {
            return Err(bad(format!("format `{}`, expected `{FORMAT}`", c.format)));
        }
        if c.version != VERSION {
            return Err(bad(format!("unsupported version {}", c.version)));
        }
        Ok(c)
    }

    /// Rebuilds the tagger; every stored parameter must be used exactly once.
    pub fn to_tagger(&self) -> std::result::Result<Tagger, String> {
        let m = &self.metadata;
        let scheme = match m.scheme.kind.as_str() {
            "bioes" => TagScheme::bioes(&m.scheme.types),
            "plain" => TagScheme::plain(&m.scheme.types).map_err(|e| e.to_string())?,
            k => return Err(format!("unknown scheme kind `{k}`")),
        };
        let vocab = Vocabulary::from_parts(
            uanet_core::data::CasePolicy {
                lowercase_words: m.vocab.lowercase,
                normalize_digits: m.vocab.normalize_digits,
            },
            m.vocab.words.clone(),
            m.vocab.chars.chars().collect(),
        );
        let decode = m.decode.core().map_err(|e| e.to_string())?;
        let mut t = Tagger::init(
            vocab,
            scheme,
            m.encoder.core(),
            m.refiner.core(),
            decode,
            m.encoder.crf_mask,
            None,
            m.seed,
        )
        .map_err(|e| e.to_string())?;
        let mut stored = ParamStore::new();
        for p in &self.params {
            let t = Tensor::new(p.shape.clone(), p.values.clone())
                .map_err(|e| format!("parameter {}: {e}", p.name))?;
            stored.add(p.name.clone(), t);
        }
        if stored.len() != t.encoder.params.len() + t.refiner.params.len() {
            return Err(format!(
                "{} stored parameters, model has {}",
                stored.len(),
                t.encoder.params.len() + t.refiner.params.len()
            ));
        }
        t.encoder.params.load_from(&stored).map_err(|e| e.to_string())?;
        t.refiner.params.load_from(&stored).map_err(|e| e.to_string())?;
        Ok(t)
    }
}

pub fn load_tagger(path: &Path) -> Result<Tagger> {
    Checkpoint::load(path)?.to_tagger().map_err(|detail| AppError::Checkpoint {
        path: path.to_path_buf(),
        detail,
    })
}
