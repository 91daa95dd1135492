//! Losses, optimizers and the two-phase training schedule.
//!
//! Phase one fits the variational tagger with SGD on the mean token NLL plus
//! a `(1-r)/(2N)·‖θ‖²` weight penalty. Phase two freezes it, draws MC drafts
//! for every training sentence each epoch, and fits the refiner with Adam on
//! the mean token cross-entropy. Both phases keep the dev-best parameters.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::{Sentence, Vocabulary};
use crate::decode::{crf_nll_var, viterbi};
use crate::encoder::{BayesEncoder, DraftPrediction, EncodedSentence, Masks};
use crate::error::{contract, Error, Result};
use crate::eval::{gamma_grid, gamma_sweep, span_f1, GammaSweep};
use crate::model::Tagger;
use crate::params::{Gradients, Graph, ParamStore};
use crate::refiner::Refiner;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    /// Epoch `e` uses `lr / (1 + decay·e)`.
    pub decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip: Option<f64>,
    /// Rate in the weight penalty; defaults to the recurrent dropout rate.
    pub penalty_rate: Option<f64>,
    /// Probability of replacing a training singleton by the unknown word.
    pub unk_replace: f64,
    /// Stop a phase after this many epochs without dev improvement.
    pub patience: Option<usize>,
    /// MC samples per draft during refiner training and tuning.
    pub samples: usize,
    pub gamma_step: f64,
    /// Alternate one epoch of each phase instead of running them in turn.
    pub joint: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 30,
            stage2_epochs: 30,
            batch_size: 10,
            sgd: SgdConfig { lr: 0.015, decay: 0.05 },
            adam: AdamConfig::default(),
            clip: Some(5.0),
            penalty_rate: None,
            unk_replace: 0.5,
            patience: None,
            samples: 8,
            gamma_step: 0.05,
            joint: false,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.sgd.lr > 0.0) || !(self.adam.lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.sgd.decay < 0.0 {
            return bad("train.sgd.decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if self.samples == 0 {
            return bad("train.samples must be at least 1");
        }
        if let Some(r) = self.penalty_rate {
            if !(0.0..1.0).contains(&r) {
                return bad("train.penalty_rate must lie in [0, 1)");
            }
        }
        if !(0.0..=1.0).contains(&self.unk_replace) {
            return bad("train.unk_replace must lie in [0, 1]");
        }
        if !(self.gamma_step > 0.0) {
            return bad("train.gamma_step must be positive");
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return bad("train.clip must be positive");
        }
        Ok(())
    }
}

pub fn sgd_step(store: &mut ParamStore, lr: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let g = store.grad(id).to_vec();
        store
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .zip(&g)
            .for_each(|(p, g)| *p -= lr * g);
    }
}

pub fn sgd_lr(cfg: &SgdConfig, epoch: usize) -> f64 {
    cfg.lr / (1.0 + cfg.decay * epoch as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.t as f64);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = store.grad(id).to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((p, g), m), v) in store.value_mut(id).data_mut().iter_mut().zip(&g).zip(m).zip(v) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= c.lr * (*m / bc1) / (libm::sqrt(*v / bc2) + c.eps);
            }
        }
    }
}

/// A training sentence: ids plus gold labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: EncodedSentence,
    pub gold: Vec<usize>,
}

pub fn examples(vocab: &Vocabulary, sentences: &[Sentence]) -> Result<Vec<Example>> {
    sentences
        .iter()
        .map(|s| {
            Ok(Example {
                input: EncodedSentence::new(vocab, s),
                gold: s.gold()?.to_vec(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub nll: f64,
    pub penalty: f64,
    pub grads: Gradients,
}

/// `(1-r)/(2N)`.
pub fn penalty_weight(rate: f64, n_train: usize) -> f64 {
    (1.0 - rate) / (2.0 * n_train.max(1) as f64)
}

/// Stage-one objective on a batch: mean token NLL under the given masks
/// (or the CRF likelihood when the encoder has transitions) plus the weight
/// penalty, with gradients of both.
pub fn loss_stage1(
    encoder: &BayesEncoder,
    batch: &[(&EncodedSentence, &[usize])],
    masks: &[Masks],
    crf_mask: Option<&[f64]>,
    rate: f64,
    n_train: usize,
) -> Result<LossOutput> {
    if batch.len() != masks.len() || batch.is_empty() {
        return Err(contract("stage-one batch needs one mask set per sentence"));
    }
    let mut g = Graph::new(&encoder.params);
    let mut terms = Vec::with_capacity(batch.len());
    let mut tokens = 0;
    for ((input, gold), m) in batch.iter().zip(masks) {
        if gold.len() != input.len() {
            return Err(contract("gold length differs from sentence length"));
        }
        tokens += gold.len();
        let out = encoder.forward(&mut g, input, m)?;
        let term = match encoder.ids.transitions {
            Some(t) => {
                let tv = g.param(t);
                crf_nll_var(&mut g.tape, out.logits, tv, crf_mask, gold)?
            }
            None => {
                let ls = g.tape.log_softmax_rows(out.logits);
                let c = encoder.num_labels;
                let idx = gold.iter().enumerate().map(|(i, &y)| i * c + y).collect();
                let picked = g.tape.gather(ls, idx, 1, gold.len())?;
                let s = g.tape.sum(picked);
                g.tape.scale(s, -1.0)
            }
        };
        terms.push(term);
    }
    let all = g.tape.concat_cols(&terms)?;
    let total = g.tape.sum(all);
    let mean = g.tape.scale(total, 1.0 / tokens as f64);
    g.backward(mean)?;
    let nll = g.value(mean).item();
    let mut grads = g.gradients();
    let w = penalty_weight(rate, n_train);
    let mut penalty = 0.0;
    for id in encoder.penalized() {
        let v = encoder.params.value(id);
        penalty += w * v.sq_norm();
        grads.add_dense(id, v.data().iter().map(|x| 2.0 * w * x).collect());
    }
    Ok(LossOutput {
        value: nll + penalty,
        nll,
        penalty,
        grads,
    })
}

/// Mean token cross-entropy of the refiner on `(repr, drafts, gold)` triples.
pub fn loss_stage2(refiner: &Refiner, batch: &[(&Tensor, &[usize], &[usize])]) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(contract("empty stage-two batch"));
    }
    let mut g = Graph::new(&refiner.params);
    let mut terms = Vec::with_capacity(batch.len());
    let mut tokens = 0;
    for (repr, drafts, gold) in batch {
        if gold.len() != repr.rows() {
            return Err(contract("gold length differs from sentence length"));
        }
        tokens += gold.len();
        let z = refiner.forward(&mut g, repr, drafts)?;
        let ls = g.tape.log_softmax_rows(z);
        let c = refiner.num_labels;
        let idx = gold.iter().enumerate().map(|(i, &y)| i * c + y).collect();
        let picked = g.tape.gather(ls, idx, 1, gold.len())?;
        let s = g.tape.sum(picked);
        terms.push(g.tape.scale(s, -1.0));
    }
    let all = g.tape.concat_cols(&terms)?;
    let total = g.tape.sum(all);
    let mean = g.tape.scale(total, 1.0 / tokens as f64);
    g.backward(mean)?;
    let nll = g.value(mean).item();
    Ok(LossOutput {
        value: nll,
        nll,
        penalty: 0.0,
        grads: g.gradients(),
    })
}

/// Computes MC drafts for a list of sentences. Implementations may run in
/// parallel but must return exactly what [`BayesEncoder::mc_forward`] gives
/// for each `(input, seed)`.
pub trait DraftRunner {
    fn drafts(
        &self,
        encoder: &BayesEncoder,
        inputs: &[&EncodedSentence],
        seeds: &[u64],
        samples: usize,
    ) -> Result<Vec<DraftPrediction>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SequentialRunner;

impl DraftRunner for SequentialRunner {
    fn drafts(
        &self,
        encoder: &BayesEncoder,
        inputs: &[&EncodedSentence],
        seeds: &[u64],
        samples: usize,
    ) -> Result<Vec<DraftPrediction>> {
        inputs
            .iter()
            .zip(seeds)
            .map(|(i, &s)| encoder.mc_forward(i, samples, s))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Tagger,
    Refiner,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Tagger => "stage1",
            Phase::Refiner => "stage2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    /// Token-weighted mean training loss.
    pub loss: f64,
    /// Stage one: primary dev metric of the mask-free tagger. Stage two: best
    /// dev metric over the threshold grid.
    pub dev_metric: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub tagger: Tagger,
    pub history: Vec<EpochRecord>,
    pub sweep: GammaSweep,
}

const SALT_STAGE1: u64 = 2;
const SALT_STAGE2: u64 = 3;
const SALT_DRAFTS: u64 = 4;
const SALT_DEV: u64 = 5;

/// Seeds for the MC drafts of `count` sentences.
pub fn draft_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count).map(|i| rng::derive(base, i as u64)).collect()
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    train: &'a [Example],
    dev: &'a [Example],
    runner: &'a dyn DraftRunner,
    n_tokens: usize,
    adam: Option<Adam>,
}

impl Trainer<'_> {
    fn stage1_epoch(&self, t: &mut Tagger, epoch: usize) -> Result<f64> {
        let mut r = rng::substream(rng::derive(self.cfg.seed, SALT_STAGE1), epoch as u64);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut r);
        let rate = self.cfg.penalty_rate.unwrap_or(t.encoder.config.recurrent_dropout);
        let lr = sgd_lr(&self.cfg.sgd, epoch);
        let mask = t.transition_mask();
        let (mut sum, mut tokens) = (0.0, 0);
        for chunk in order.chunks(self.cfg.batch_size) {
            let inputs: Vec<EncodedSentence> = chunk
                .iter()
                .map(|&k| {
                    let e = &self.train[k].input;
                    EncodedSentence {
                        words: t.vocab.replace_singletons(&e.words, self.cfg.unk_replace, &mut r),
                        chars: e.chars.clone(),
                    }
                })
                .collect();
            let masks: Vec<Masks> = inputs
                .iter()
                .map(|i| t.encoder.sample_masks(i.len(), true, &mut r))
                .collect();
            let batch: Vec<(&EncodedSentence, &[usize])> = inputs
                .iter()
                .zip(chunk)
                .map(|(i, &k)| (i, self.train[k].gold.as_slice()))
                .collect();
            let out = loss_stage1(&t.encoder, &batch, &masks, mask.as_deref(), rate, self.n_tokens)?;
            if !out.value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    phase: Phase::Tagger.name(),
                    epoch,
                    batch: chunk.to_vec(),
                });
            }
            let n: usize = batch.iter().map(|b| b.1.len()).sum();
            sum += out.value * n as f64;
            tokens += n;
            let p = &mut t.encoder.params;
            p.zero_grads();
            p.accumulate(&out.grads);
            if let Some(c) = self.cfg.clip {
                p.clip_grad_norm(c);
            }
            sgd_step(p, lr);
        }
        Ok(sum / tokens.max(1) as f64)
    }

    fn stage1_dev(&self, t: &Tagger) -> Result<f64> {
        let trans = t.transitions();
        let mut pred = Vec::with_capacity(self.dev.len());
        for ex in self.dev {
            let e = t.encoder.emissions(&ex.input)?;
            pred.push(match &trans {
                Some(tr) => viterbi(&e, tr)?.0,
                None => e.argmax_rows(),
            });
        }
        let gold: Vec<Vec<usize>> = self.dev.iter().map(|e| e.gold.clone()).collect();
        Ok(span_f1(&t.scheme, &gold, &pred)?.primary(t.scheme.kind()))
    }

    fn stage2_epoch(&mut self, t: &mut Tagger, reprs: &[Tensor], epoch: usize) -> Result<f64> {
        let inputs: Vec<&EncodedSentence> = self.train.iter().map(|e| &e.input).collect();
        let base = rng::derive(rng::derive(self.cfg.seed, SALT_DRAFTS), epoch as u64);
        let drafts = self
            .runner
            .drafts(&t.encoder, &inputs, &draft_seeds(base, inputs.len()), self.cfg.samples)?;
        let mut r = rng::substream(rng::derive(self.cfg.seed, SALT_STAGE2), epoch as u64);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut r);
        let adam = self.adam.get_or_insert_with(|| Adam::new(self.cfg.adam.clone(), &t.refiner.params));
        let (mut sum, mut tokens) = (0.0, 0);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<(&Tensor, &[usize], &[usize])> = chunk
                .iter()
                .map(|&k| (&reprs[k], drafts[k].labels.as_slice(), self.train[k].gold.as_slice()))
                .collect();
            let out = loss_stage2(&t.refiner, &batch)?;
            if !out.value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    phase: Phase::Refiner.name(),
                    epoch,
                    batch: chunk.to_vec(),
                });
            }
            let n: usize = batch.iter().map(|b| b.2.len()).sum();
            sum += out.value * n as f64;
            tokens += n;
            let p = &mut t.refiner.params;
            p.zero_grads();
            p.accumulate(&out.grads);
            if let Some(c) = self.cfg.clip {
                p.clip_grad_norm(c);
            }
            adam.step(p);
        }
        Ok(sum / tokens.max(1) as f64)
    }

    fn dev_drafts(&self, t: &Tagger) -> Result<Vec<DraftPrediction>> {
        let inputs: Vec<&EncodedSentence> = self.dev.iter().map(|e| &e.input).collect();
        let seeds = draft_seeds(rng::derive(self.cfg.seed, SALT_DEV), inputs.len());
        self.runner.drafts(&t.encoder, &inputs, &seeds, self.cfg.samples)
    }

    fn sweep(&self, t: &Tagger, drafts: &[DraftPrediction]) -> Result<GammaSweep> {
        let mut refined = Vec::with_capacity(drafts.len());
        for (ex, d) in self.dev.iter().zip(drafts) {
            refined.push(t.refine(&ex.input, &d.labels)?.labels);
        }
        let gold: Vec<Vec<usize>> = self.dev.iter().map(|e| e.gold.clone()).collect();
        let labels: Vec<Vec<usize>> = drafts.iter().map(|d| d.labels.clone()).collect();
        let u: Vec<Vec<f64>> = drafts.iter().map(|d| d.uncertainty.clone()).collect();
        let grid = gamma_grid(t.scheme.len(), self.cfg.gamma_step);
        gamma_sweep(&t.scheme, &labels, &u, &refined, &gold, &grid)
    }
}

fn patience_over(cfg: &TrainConfig, since_best: usize) -> bool {
    matches!(cfg.patience, Some(p) if since_best > p)
}

/// Runs both phases and returns the dev-selected tagger with its tuned
/// threshold. `log` sees every epoch as it finishes.
pub fn train(
    init: Tagger,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    runner: &dyn DraftRunner,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(contract("training needs non-empty train and dev sets"));
    }
    let mut tr = Trainer {
        cfg,
        train,
        dev,
        runner,
        n_tokens: train.iter().map(|e| e.gold.len()).sum(),
        adam: None,
    };
    let mut t = init;
    t.decode.samples = cfg.samples;
    let mut history = Vec::new();

    if cfg.joint {
        return train_joint(&mut tr, t, history, log);
    }

    let mut best_enc = t.encoder.params.clone();
    let mut best = f64::NEG_INFINITY;
    let mut since = 0;
    for epoch in 0..cfg.stage1_epochs {
        let loss = tr.stage1_epoch(&mut t, epoch)?;
        let metric = tr.stage1_dev(&t)?;
        let improved = metric > best;
        if improved {
            best = metric;
            best_enc = t.encoder.params.clone();
            since = 0;
        } else {
            since += 1;
        }
        let rec = EpochRecord {
            phase: Phase::Tagger,
            epoch,
            loss,
            dev_metric: metric,
            improved,
        };
        log(&rec);
        history.push(rec);
        if patience_over(cfg, since) {
            break;
        }
    }
    t.encoder.params = best_enc;

    let reprs = train
        .iter()
        .map(|e| t.encoder.representation(&e.input))
        .collect::<Result<Vec<_>>>()?;
    let dev_drafts = tr.dev_drafts(&t)?;
    let mut best_sweep = tr.sweep(&t, &dev_drafts)?;
    let mut best_ref = t.refiner.params.clone();
    let mut best = f64::NEG_INFINITY;
    since = 0;
    for epoch in 0..cfg.stage2_epochs {
        let loss = tr.stage2_epoch(&mut t, &reprs, epoch)?;
        let sweep = tr.sweep(&t, &dev_drafts)?;
        let improved = sweep.best_f1 > best;
        let metric = sweep.best_f1;
        if improved {
            best = metric;
            best_ref = t.refiner.params.clone();
            best_sweep = sweep;
            since = 0;
        } else {
            since += 1;
        }
        let rec = EpochRecord {
            phase: Phase::Refiner,
            epoch,
            loss,
            dev_metric: metric,
            improved,
        };
        log(&rec);
        history.push(rec);
        if patience_over(cfg, since) {
            break;
        }
    }
    t.refiner.params = best_ref;
    t.decode.gamma = best_sweep.best_gamma;
    Ok(TrainOutcome {
        tagger: t,
        history,
        sweep: best_sweep,
    })
}

fn train_joint(
    tr: &mut Trainer<'_>,
    mut t: Tagger,
    mut history: Vec<EpochRecord>,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let cfg = tr.cfg;
    let mut best = (t.encoder.params.clone(), t.refiner.params.clone());
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_sweep = tr.sweep(&t, &tr.dev_drafts(&t)?)?;
    let mut since = 0;
    for epoch in 0..cfg.stage1_epochs.max(cfg.stage2_epochs) {
        if epoch < cfg.stage1_epochs {
            let loss = tr.stage1_epoch(&mut t, epoch)?;
            let metric = tr.stage1_dev(&t)?;
            let rec = EpochRecord {
                phase: Phase::Tagger,
                epoch,
                loss,
                dev_metric: metric,
                improved: false,
            };
            log(&rec);
            history.push(rec);
        }
        if epoch < cfg.stage2_epochs {
            let reprs = tr
                .train
                .iter()
                .map(|e| t.encoder.representation(&e.input))
                .collect::<Result<Vec<_>>>()?;
            let loss = tr.stage2_epoch(&mut t, &reprs, epoch)?;
            let sweep = tr.sweep(&t, &tr.dev_drafts(&t)?)?;
            let improved = sweep.best_f1 > best_metric;
            let rec = EpochRecord {
                phase: Phase::Refiner,
                epoch,
                loss,
                dev_metric: sweep.best_f1,
                improved,
            };
            if improved {
                best_metric = sweep.best_f1;
                best = (t.encoder.params.clone(), t.refiner.params.clone());
                best_sweep = sweep;
                since = 0;
            } else {
                since += 1;
            }
            log(&rec);
            history.push(rec);
            if patience_over(cfg, since) {
                break;
            }
        }
    }
    t.encoder.params = best.0;
    t.refiner.params = best.1;
    t.decode.gamma = best_sweep.best_gamma;
    Ok(TrainOutcome {
        tagger: t,
        history,
        sweep: best_sweep,
    })
}
