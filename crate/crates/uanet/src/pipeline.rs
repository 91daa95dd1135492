//! The work behind each subcommand, usable without the command line.

use std::path::{Path, PathBuf};
use std::time::Instant;

use uanet_core::data::{Sentence, Vocabulary};
use uanet_core::decode::{mix_labels, DecoderKind};
use uanet_core::encoder::EncodedSentence;
use uanet_core::eval::{
    constrained_span_f1, gamma_grid, gamma_sweep, span_f1, summary, uncertainty_audit, EvalReport, GammaSweep,
    SpanCounts, UncertaintyAudit,
};
use uanet_core::model::{sentence_seed, Prediction, Tagger};
use uanet_core::rng;
use uanet_core::train::{self, examples, EpochRecord, TrainOutcome};

use crate::bench::{decode_throughput, BenchReport};
use crate::checkpoint::{load_tagger, Checkpoint};
use crate::config::Config;
use crate::error::{write, AppError, Result};
use crate::io::{self, Corpus};
use crate::parallel::{par_map, ThreadedRunner};
use crate::report;

pub const CHECKPOINT: &str = "checkpoint.json";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// Where artifacts go and how many threads may produce them.
#[derive(Debug, Clone)]
pub struct Run {
    pub out: PathBuf,
    pub workers: usize,
}

impl Run {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        write(&self.path(name), contents)
    }

    pub fn snapshot(&self, cfg: &Config) -> Result<()> {
        self.write(RESOLVED_CONFIG, cfg.to_toml())
    }
}

/// Decode settings given on the command line; each replaces the
/// checkpoint's value when present.
#[derive(Debug, Clone, Default)]
pub struct DecodeOverrides {
    pub decoder: Option<DecoderKind>,
    pub gamma: Option<f64>,
    pub samples: Option<usize>,
    pub legalize: bool,
}

impl DecodeOverrides {
    pub fn apply(&self, t: &mut Tagger) -> Result<()> {
        let d = &mut t.decode;
        if let Some(k) = self.decoder {
            d.decoder = k;
        }
        if let Some(g) = self.gamma {
            d.gamma = g;
        }
        if let Some(m) = self.samples {
            d.samples = m;
        }
        d.legalize |= self.legalize;
        d.validate().map_err(|e| AppError::config("decode", e.to_string()))?;
        if d.decoder == DecoderKind::Crf && t.encoder.ids.transitions.is_none() {
            return Err(AppError::config("decode.decoder", "crf needs a checkpoint trained with encoder.crf = true"));
        }
        Ok(())
    }
}

pub fn synth(cfg: &Config, run: &Run) -> Result<Corpus> {
    let corpus = io::load_corpus(cfg)?;
    run.snapshot(cfg)?;
    let s = &corpus.splits;
    for (name, part) in [("train.txt", &s.train), ("dev.txt", &s.dev), ("test.txt", &s.test)] {
        run.write(name, io::corpus_text(part, &corpus.scheme))?;
    }
    log::info!(
        "wrote {} train, {} dev, {} test sentences to {}",
        s.train.len(),
        s.dev.len(),
        s.test.len(),
        run.out.display()
    );
    Ok(corpus)
}

pub fn init_tagger(cfg: &Config, corpus: &Corpus) -> Result<Tagger> {
    let vocab = Vocabulary::build(&corpus.splits.train, cfg.data.case_policy());
    let pretrained = io::load_embeddings(cfg)?;
    Ok(Tagger::init(
        vocab,
        corpus.scheme.clone(),
        cfg.encoder.core(),
        cfg.refiner.core(),
        cfg.decode.core()?,
        cfg.encoder.crf_mask,
        pretrained.as_ref(),
        cfg.seed,
    )?)
}

/// Trains from `init`, logging each epoch and writing the history.
pub fn fit(cfg: &Config, corpus: &Corpus, init: Tagger, run: &Run) -> Result<TrainOutcome> {
    let tc = cfg.train_config()?;
    let train_ex = examples(&init.vocab, &corpus.splits.train)?;
    let dev_ex = examples(&init.vocab, &corpus.splits.dev)?;
    let start = Instant::now();
    let mut lines = String::new();
    let mut log_epoch = |r: &EpochRecord| {
        let line = report::history_line(r, start.elapsed().as_secs_f64());
        log::info!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    };
    let outcome = train::train(
        init,
        &train_ex,
        &dev_ex,
        &tc,
        &ThreadedRunner { workers: run.workers },
        &mut log_epoch,
    )?;
    run.write("train.log", lines)?;
    run.write("history.csv", report::history_csv(&outcome.history))?;
    run.write("dev_sweep.csv", report::sweep_csv(&outcome.sweep))?;
    Ok(outcome)
}

pub fn train(cfg: &Config, run: &Run) -> Result<(Corpus, TrainOutcome)> {
    let corpus = io::load_corpus(cfg)?;
    run.snapshot(cfg)?;
    let init = init_tagger(cfg, &corpus)?;
    let outcome = fit(cfg, &corpus, init, run)?;
    Checkpoint::from_tagger(&outcome.tagger, cfg.seed).save(&run.path(CHECKPOINT))?;
    log::info!(
        "tuned gamma {:.4}, dev {:.4}; checkpoint at {}",
        outcome.sweep.best_gamma,
        outcome.sweep.best_f1,
        run.path(CHECKPOINT).display()
    );
    Ok((corpus, outcome))
}

/// Stage-two retraining of `base` with the label stream switched off. The
/// stage-one network is kept as trained.
pub fn train_without_labels(cfg: &Config, corpus: &Corpus, base: &Tagger, run: &Run) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.refiner.label_stream = false;
    cfg.train.stage1_epochs = 0;
    let mut init = init_tagger(&cfg, corpus)?;
    init.encoder.params = base.encoder.params.clone();
    fit(&cfg, corpus, init, run)
}

pub fn predict_all(t: &Tagger, sentences: &[Sentence], seed: u64, workers: usize) -> Result<Vec<Prediction>> {
    par_map(workers, sentences, |i, s| t.predict(s, sentence_seed(seed, i)))
        .into_iter()
        .map(|r| r.map_err(AppError::from))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub gamma: f64,
    pub predictions: Vec<Prediction>,
    pub gold: Vec<Vec<usize>>,
    pub finals: Vec<Vec<usize>>,
    pub drafts: Vec<Vec<usize>>,
    pub uncertainty: Vec<Vec<f64>>,
    /// Refined labels; empty unless the mix decoder ran.
    pub refined: Vec<Vec<usize>>,
    pub final_report: EvalReport,
    pub draft_report: EvalReport,
    pub refined_report: Option<EvalReport>,
    pub audit: UncertaintyAudit,
    /// `(draft, final)` span counts on constraint-target spans.
    pub constrained: Option<(SpanCounts, SpanCounts)>,
}

pub fn evaluate(t: &Tagger, corpus: &Corpus, sentences: &[Sentence], seed: u64, workers: usize) -> Result<Evaluation> {
    let predictions = predict_all(t, sentences, seed, workers)?;
    let gold: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| s.gold().map(<[usize]>::to_vec))
        .collect::<uanet_core::Result<_>>()?;
    let finals: Vec<Vec<usize>> = predictions.iter().map(|p| p.labels.clone()).collect();
    let drafts: Vec<Vec<usize>> = predictions.iter().map(|p| p.draft.labels.clone()).collect();
    let uncertainty: Vec<Vec<f64>> = predictions.iter().map(|p| p.draft.uncertainty.clone()).collect();
    let refined: Vec<Vec<usize>> = predictions
        .iter()
        .filter_map(|p| p.refined.as_ref().map(|r| r.labels.clone()))
        .collect();
    let scheme = &corpus.scheme;
    let refined_report = (!refined.is_empty()).then(|| span_f1(scheme, &gold, &refined)).transpose()?;
    let constrained = match corpus.target_positions(sentences) {
        Some(pos) => Some((
            constrained_span_f1(scheme, &gold, &drafts, &pos)?,
            constrained_span_f1(scheme, &gold, &finals, &pos)?,
        )),
        None => None,
    };
    Ok(Evaluation {
        gamma: t.decode.gamma,
        final_report: span_f1(scheme, &gold, &finals)?,
        draft_report: span_f1(scheme, &gold, &drafts)?,
        refined_report,
        audit: uncertainty_audit(&drafts, &uncertainty, &finals, &gold)?,
        constrained,
        predictions,
        gold,
        finals,
        drafts,
        uncertainty,
        refined,
    })
}

pub fn eval_summary(e: &Evaluation, decoder: DecoderKind) -> String {
    let mut s = format!("decoder {}\nfinal labels\n{}", decoder.name(), summary(&e.final_report));
    s.push_str(&format!("draft labels\n{}", summary(&e.draft_report)));
    if let Some(r) = &e.refined_report {
        s.push_str(&format!("refined labels\n{}", summary(r)));
    }
    if let Some((d, f)) = &e.constrained {
        s.push_str(&report::counts_line("constraint targets, draft", d));
        s.push_str(&report::counts_line("constraint targets, final", f));
    }
    s.push_str(&report::audit_text(&e.audit, e.gamma));
    s
}

pub fn write_evaluation(e: &Evaluation, t: &Tagger, sentences: &[Sentence], run: &Run) -> Result<()> {
    let mut rows = vec![("final", &e.final_report), ("draft", &e.draft_report)];
    if let Some(r) = &e.refined_report {
        rows.push(("refined", r));
    }
    run.write("eval.csv", report::eval_csv(&rows))?;
    run.write("eval.txt", eval_summary(e, t.decode.decoder))?;
    run.write("predictions.txt", io::prediction_text(sentences, &e.predictions, &t.scheme))?;
    run.write("drafts.txt", io::draft_text(sentences, &e.predictions, &t.scheme))
}

fn checkpoint_path(given: Option<&Path>, run: &Run) -> PathBuf {
    given.map_or_else(|| run.path(CHECKPOINT), Path::to_path_buf)
}

pub fn eval(cfg: &Config, checkpoint: Option<&Path>, overrides: &DecodeOverrides, run: &Run) -> Result<Evaluation> {
    let mut t = load_tagger(&checkpoint_path(checkpoint, run))?;
    overrides.apply(&mut t)?;
    let corpus = io::load_corpus(cfg)?;
    run.snapshot(cfg)?;
    let test = &corpus.splits.test;
    let e = evaluate(&t, &corpus, test, cfg.seed, run.workers)?;
    write_evaluation(&e, &t, test, run)?;
    log::info!(
        "test f1 {:.4} (draft {:.4}), accuracy {:.4}",
        e.final_report.f1,
        e.draft_report.f1,
        e.final_report.accuracy
    );
    Ok(e)
}

pub fn predict(
    cfg: &Config,
    checkpoint: Option<&Path>,
    input: &Path,
    labeled: bool,
    overrides: &DecodeOverrides,
    run: &Run,
) -> Result<Vec<Prediction>> {
    let mut t = load_tagger(&checkpoint_path(checkpoint, run))?;
    overrides.apply(&mut t)?;
    run.snapshot(cfg)?;
    let sentences = io::read_input(input, cfg, &t.scheme, labeled)?;
    let preds = predict_all(&t, &sentences, cfg.seed, run.workers)?;
    run.write("predictions.txt", io::prediction_text(&sentences, &preds, &t.scheme))?;
    run.write("drafts.txt", io::draft_text(&sentences, &preds, &t.scheme))?;
    Ok(preds)
}

#[derive(Debug, Clone)]
pub struct Sweeps {
    pub gamma: GammaSweep,
    /// `(M, draft metric, final metric)` on the test split.
    pub samples: Vec<(usize, f64, f64)>,
}

pub const SAMPLE_GRID: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Threshold sweep on dev and sample-count sweep on test.
pub fn sweep(cfg: &Config, checkpoint: Option<&Path>, run: &Run) -> Result<Sweeps> {
    let t = load_tagger(&checkpoint_path(checkpoint, run))?;
    let corpus = io::load_corpus(cfg)?;
    run.snapshot(cfg)?;
    let scheme = &corpus.scheme;
    let dev = &corpus.splits.dev;
    let dev_seed = rng::derive(cfg.seed, 5);
    let staged = stage(&t, dev, dev_seed, t.decode.samples, run.workers)?;
    let grid = gamma_grid(scheme.len(), cfg.train.gamma_step);
    let gold = golds(dev)?;
    let gamma = gamma_sweep(scheme, &staged.0, &staged.1, &staged.2, &gold, &grid)?;
    let test = &corpus.splits.test;
    let test_gold = golds(test)?;
    let mut samples = Vec::new();
    for m in SAMPLE_GRID {
        let (d, u, r) = stage(&t, test, cfg.seed, m, run.workers)?;
        let finals: Vec<Vec<usize>> = d
            .iter()
            .zip(&u)
            .zip(&r)
            .map(|((d, u), r)| mix_labels(d, u, r, t.decode.gamma).map(|v| v.into_iter().map(|p| p.0).collect()))
            .collect::<uanet_core::Result<_>>()?;
        let kind = scheme.kind();
        samples.push((
            m,
            span_f1(scheme, &test_gold, &d)?.primary(kind),
            span_f1(scheme, &test_gold, &finals)?.primary(kind),
        ));
    }
    run.write("sweep_gamma.csv", report::sweep_csv(&gamma))?;
    run.write(
        "sweep_gamma.gp",
        report::gnuplot("sweep_gamma.csv", "sweep_gamma.png", "threshold (nats)", "F1 change vs all-refined", &[(1, 3, "delta F1")], false),
    )?;
    run.write("sweep_samples.csv", report::samples_csv(&samples))?;
    run.write(
        "sweep_samples.gp",
        report::gnuplot(
            "sweep_samples.csv",
            "sweep_samples.png",
            "MC samples",
            "test metric",
            &[(1, 2, "draft"), (1, 3, "final")],
            false,
        ),
    )?;
    Ok(Sweeps { gamma, samples })
}

fn golds(s: &[Sentence]) -> Result<Vec<Vec<usize>>> {
    Ok(s.iter()
        .map(|s| s.gold().map(<[usize]>::to_vec))
        .collect::<uanet_core::Result<_>>()?)
}

type Staged = (Vec<Vec<usize>>, Vec<Vec<f64>>, Vec<Vec<usize>>);

/// Drafts, uncertainties and refined labels with `m` MC samples.
fn stage(t: &Tagger, sentences: &[Sentence], seed: u64, m: usize, workers: usize) -> Result<Staged> {
    let inputs: Vec<EncodedSentence> = sentences.iter().map(|s| t.encode(s)).collect();
    let out = par_map(workers, &inputs, |i, x| -> uanet_core::Result<_> {
        let d = t.encoder.mc_forward(x, m, sentence_seed(seed, i))?;
        let r = t.refine(x, &d.labels)?;
        Ok((d.labels, d.uncertainty, r.labels))
    });
    let mut staged: Staged = (Vec::new(), Vec::new(), Vec::new());
    for r in out {
        let (d, u, f) = r?;
        staged.0.push(d);
        staged.1.push(u);
        staged.2.push(f);
    }
    Ok(staged)
}

pub fn bench(cfg: &Config, run: &Run) -> Result<BenchReport> {
    run.snapshot(cfg)?;
    let r = decode_throughput(&cfg.bench, cfg.seed, run.workers);
    run.write("bench.csv", report::bench_csv(&r))?;
    run.write("bench_scaling.csv", report::scaling_csv(&r))?;
    run.write("bench.txt", report::bench_text(&r))?;
    run.write(
        "bench_scaling.gp",
        report::gnuplot(
            "bench_scaling.csv",
            "bench_scaling.png",
            "label-set size C",
            "seconds per token",
            &[(1, 2, "softmax"), (1, 3, "viterbi"), (1, 4, "mix")],
            true,
        ),
    )?;
    log::info!("{}", report::bench_text(&r).trim_end());
    Ok(r)
}
