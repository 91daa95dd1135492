//! The full two-stage tagger and its decoders.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::embeddings::init_word_table;
use crate::data::{SchemeKind, Sentence, TagScheme, Vocabulary};
use crate::decode::{effective_transitions, mix_labels, viterbi, DecodeConfig, DecoderKind, Source};
use crate::encoder::{BayesEncoder, DraftPrediction, EncodedSentence, EncoderConfig};
use crate::error::{contract, Result};
use crate::refiner::{RefinedPrediction, Refiner, RefinerConfig};
use crate::rng;
use crate::tensor::{softmax_in_place, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Tagger {
    pub vocab: Vocabulary,
    pub scheme: TagScheme,
    pub encoder: BayesEncoder,
    pub refiner: Refiner,
    pub decode: DecodeConfig,
    /// Hard-mask illegal BIOES transitions in the CRF.
    pub crf_mask: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub sources: Vec<Source>,
    pub draft: DraftPrediction,
    pub refined: Option<RefinedPrediction>,
}

impl Tagger {
    /// Fresh parameters. Rows of `pretrained` matching the vocabulary seed the
    /// word table.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        vocab: Vocabulary,
        scheme: TagScheme,
        encoder: EncoderConfig,
        refiner: RefinerConfig,
        decode: DecodeConfig,
        crf_mask: bool,
        pretrained: Option<&BTreeMap<String, Vec<f64>>>,
        seed: u64,
    ) -> Result<Self> {
        decode.validate()?;
        let mut r = rng::substream(seed, 1);
        let (table, _) = init_word_table(&vocab, pretrained, encoder.word_dim, &mut r);
        let c = scheme.len();
        let enc = BayesEncoder::new(encoder, table, vocab.num_chars(), c, &mut r)?;
        let refiner = Refiner::new(refiner, enc.config.input_dim(), c, &mut r)?;
        Ok(Self {
            vocab,
            scheme,
            encoder: enc,
            refiner,
            decode,
            crf_mask,
        })
    }

    pub fn encode(&self, s: &Sentence) -> EncodedSentence {
        EncodedSentence::new(&self.vocab, s)
    }

    /// Transition scores with the optional legality mask applied.
    pub fn transitions(&self) -> Option<Vec<f64>> {
        let id = self.encoder.ids.transitions?;
        let t = self.encoder.params.value(id).data();
        let mask = (self.crf_mask && self.scheme.kind() == SchemeKind::Bioes)
            .then(|| self.scheme.transition_mask());
        Some(effective_transitions(t, mask.as_deref()))
    }

    pub fn transition_mask(&self) -> Option<Vec<f64>> {
        (self.crf_mask && self.scheme.kind() == SchemeKind::Bioes).then(|| self.scheme.transition_mask())
    }

    /// Softmax of the mask-free network as a one-sample draft.
    pub fn deterministic_draft(&self, input: &EncodedSentence) -> Result<(Tensor, DraftPrediction)> {
        let e = self.encoder.emissions(input)?;
        let mut p = e.clone();
        let c = p.cols();
        for row in p.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok((e, DraftPrediction::from_probs(p)))
    }

    pub fn mc_draft(&self, input: &EncodedSentence, seed: u64) -> Result<DraftPrediction> {
        self.encoder.mc_forward(input, self.decode.samples, seed)
    }

    pub fn refine(&self, input: &EncodedSentence, drafts: &[usize]) -> Result<RefinedPrediction> {
        let repr = self.encoder.representation(input)?;
        self.refiner.predict(&repr, drafts)
    }

    /// Applies the threshold decoder to a precomputed MC draft.
    pub fn finish_mix(&self, input: &EncodedSentence, draft: DraftPrediction) -> Result<Prediction> {
        let refined = self.refine(input, &draft.labels)?;
        let mixed = mix_labels(&draft.labels, &draft.uncertainty, &refined.labels, self.decode.gamma)?;
        let (labels, sources) = mixed.into_iter().unzip();
        Ok(self.finalize(Prediction {
            labels,
            sources,
            draft,
            refined: Some(refined),
        }))
    }

    fn finalize(&self, mut p: Prediction) -> Prediction {
        if self.decode.legalize {
            p.labels = self.scheme.legalize(&p.labels);
        }
        p
    }

    /// Decodes one sentence; MC samples use `seed`.
    pub fn predict_encoded(&self, input: &EncodedSentence, seed: u64) -> Result<Prediction> {
        match self.decode.decoder {
            DecoderKind::Mix => {
                let draft = self.mc_draft(input, seed)?;
                self.finish_mix(input, draft)
            }
            DecoderKind::Softmax => {
                let (_, draft) = self.deterministic_draft(input)?;
                Ok(self.finalize(Prediction {
                    labels: draft.labels.clone(),
                    sources: alloc::vec![Source::Draft; draft.len()],
                    draft,
                    refined: None,
                }))
            }
            DecoderKind::Crf => {
                let trans = self
                    .transitions()
                    .ok_or_else(|| contract("the CRF decoder needs a model trained with a CRF layer"))?;
                let (e, draft) = self.deterministic_draft(input)?;
                let (labels, _) = viterbi(&e, &trans)?;
                Ok(self.finalize(Prediction {
                    labels,
                    sources: alloc::vec![Source::Draft; draft.len()],
                    draft,
                    refined: None,
                }))
            }
        }
    }

    pub fn predict(&self, s: &Sentence, seed: u64) -> Result<Prediction> {
        self.predict_encoded(&self.encode(s), seed)
    }
}

/// Seed of sentence `index` in a prediction run seeded with `seed`.
pub fn sentence_seed(seed: u64, index: usize) -> u64 {
    rng::derive(seed, index as u64)
}
