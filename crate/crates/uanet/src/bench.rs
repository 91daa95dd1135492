//! Decoding-throughput benchmarks. Every decoder gets precomputed inputs, so
//! only the decoding step itself is timed.

use std::hint::black_box;
use std::time::Instant;

use rand::Rng as _;
use uanet_core::decode::{mix_labels, softmax_decode, viterbi};
use uanet_core::eval::{bucket_of, LENGTH_BUCKETS};
use uanet_core::tensor::Tensor;

use crate::config::BenchSection;
use crate::parallel::par_map;

/// Everything a decoder may consume for one sentence.
#[derive(Debug, Clone)]
pub struct DecodeInput {
    pub emissions: Tensor,
    pub drafts: Vec<usize>,
    pub uncertainty: Vec<f64>,
    pub refined: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchDecoder {
    Softmax,
    Viterbi,
    Mix,
}

impl BenchDecoder {
    pub const ALL: [BenchDecoder; 3] = [BenchDecoder::Softmax, BenchDecoder::Viterbi, BenchDecoder::Mix];

    pub fn name(self) -> &'static str {
        match self {
            BenchDecoder::Softmax => "softmax",
            BenchDecoder::Viterbi => "viterbi",
            BenchDecoder::Mix => "mix",
        }
    }
}

/// Random decode inputs: `count` sentences of length `len` over `labels`.
pub fn random_inputs(count: usize, len: usize, labels: usize, seed: u64) -> Vec<DecodeInput> {
    let mut r = uanet_core::rng::seeded(seed);
    let ln_c = (labels as f64).ln();
    (0..count)
        .map(|_| DecodeInput {
            emissions: Tensor::matrix(len, labels, (0..len * labels).map(|_| r.gen_range(-2.0..2.0)).collect()),
            drafts: (0..len).map(|_| r.gen_range(0..labels)).collect(),
            uncertainty: (0..len).map(|_| r.gen_range(0.0..=ln_c)).collect(),
            refined: (0..len).map(|_| r.gen_range(0..labels)).collect(),
        })
        .collect()
}

pub fn random_transitions(labels: usize, seed: u64) -> Vec<f64> {
    let mut r = uanet_core::rng::seeded(seed);
    (0..(labels + 2) * (labels + 2)).map(|_| r.gen_range(-0.5..0.5)).collect()
}

/// Decodes every input once; returns the total label count as a checksum.
pub fn run_decoder(kind: BenchDecoder, inputs: &[DecodeInput], trans: &[f64], gamma: f64) -> usize {
    let mut sum = 0;
    for x in inputs {
        sum += match kind {
            BenchDecoder::Softmax => softmax_decode(black_box(&x.emissions)).iter().sum::<usize>(),
            BenchDecoder::Viterbi => viterbi(black_box(&x.emissions), trans).expect("shapes agree").0.iter().sum(),
            BenchDecoder::Mix => mix_labels(black_box(&x.drafts), &x.uncertainty, &x.refined, gamma)
                .expect("lengths agree")
                .iter()
                .map(|p| p.0)
                .sum(),
        };
    }
    sum
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    /// Median seconds for one pass over the inputs.
    pub median: f64,
    /// Passes per timed sample, grown until a sample exceeds the minimum.
    pub passes: usize,
}

/// Median of `repeats` timed samples of `f`, after `warmup` untimed calls.
/// Samples shorter than `min_secs` are re-run with twice as many passes.
pub fn measure(mut f: impl FnMut() -> usize, repeats: usize, warmup: usize, min_secs: f64) -> Timing {
    for _ in 0..warmup {
        black_box(f());
    }
    let mut passes = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..passes {
            black_box(f());
        }
        if t.elapsed().as_secs_f64() >= min_secs || passes >= 1 << 24 {
            break;
        }
        passes *= 2;
    }
    let mut samples: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            for _ in 0..passes {
                black_box(f());
            }
            t.elapsed().as_secs_f64() / passes as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    Timing {
        median: samples[samples.len() / 2],
        passes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputRow {
    pub decoder: &'static str,
    pub bucket: &'static str,
    pub length: usize,
    pub labels: usize,
    pub sentences_per_sec: f64,
    pub passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub decoder: &'static str,
    pub labels: usize,
    pub secs_per_token: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub os: &'static str,
    pub arch: &'static str,
    pub cpus: usize,
    pub cpu_model: Option<String>,
    pub optimized: bool,
    pub version: &'static str,
}

impl Fingerprint {
    pub fn current() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        });
        Self {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cpu_model,
            optimized: !cfg!(debug_assertions),
            version: env!("CARGO_PKG_VERSION"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub fingerprint: Fingerprint,
    pub throughput: Vec<ThroughputRow>,
    pub scaling: Vec<ScalingRow>,
    /// Least-squares slope of log time per token against log C, per decoder.
    pub exponents: Vec<(&'static str, f64)>,
}

impl BenchReport {
    pub fn exponent(&self, decoder: &str) -> Option<f64> {
        self.exponents.iter().find(|e| e.0 == decoder).map(|e| e.1)
    }

    pub fn throughput(&self, decoder: &str, length: usize) -> Option<f64> {
        self.throughput
            .iter()
            .find(|r| r.decoder == decoder && r.length == length)
            .map(|r| r.sentences_per_sec)
    }
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

const GAMMA: f64 = 0.35;

/// Times `decoder` over `inputs`, optionally splitting the inputs over
/// `workers` threads.
pub fn time_decoder(
    decoder: BenchDecoder,
    inputs: &[DecodeInput],
    trans: &[f64],
    cfg: &BenchSection,
    workers: usize,
) -> Timing {
    if workers <= 1 {
        return measure(|| run_decoder(decoder, inputs, trans, GAMMA), cfg.repeats, cfg.warmup, cfg.min_batch_ms / 1e3);
    }
    let parts: Vec<&[DecodeInput]> = inputs.chunks(inputs.len().div_ceil(workers).max(1)).collect();
    measure(
        || par_map(workers, &parts, |_, p| run_decoder(decoder, p, trans, GAMMA)).iter().sum(),
        cfg.repeats,
        cfg.warmup,
        cfg.min_batch_ms / 1e3,
    )
}

/// Throughput per decoder and length bucket at `cfg.labels`, and per-token
/// time against the label-set size at `cfg.scaling_length`.
pub fn decode_throughput(cfg: &BenchSection, seed: u64, workers: usize) -> BenchReport {
    let mut throughput = Vec::new();
    if cfg.sentences > 0 {
        let trans = random_transitions(cfg.labels, seed);
        for (k, &len) in cfg.lengths.iter().enumerate() {
            if len == 0 {
                continue;
            }
            let inputs = random_inputs(cfg.sentences, len, cfg.labels, uanet_core::rng::derive(seed, k as u64 + 1));
            for d in BenchDecoder::ALL {
                let t = time_decoder(d, &inputs, &trans, cfg, workers);
                throughput.push(ThroughputRow {
                    decoder: d.name(),
                    bucket: LENGTH_BUCKETS[bucket_of(len)].0,
                    length: len,
                    labels: cfg.labels,
                    sentences_per_sec: inputs.len() as f64 / t.median,
                    passes: t.passes,
                });
            }
        }
    }
    let mut scaling = Vec::new();
    let mut exponents = Vec::new();
    if cfg.sentences > 0 && cfg.scaling_length > 0 && !cfg.label_sizes.is_empty() {
        for d in BenchDecoder::ALL {
            let mut pts = Vec::new();
            for &c in &cfg.label_sizes {
                let inputs = random_inputs(cfg.sentences, cfg.scaling_length, c, uanet_core::rng::derive(seed, 1000 + c as u64));
                let trans = random_transitions(c, seed ^ c as u64);
                let t = time_decoder(d, &inputs, &trans, cfg, workers);
                let per_token = t.median / (inputs.len() * cfg.scaling_length) as f64;
                scaling.push(ScalingRow {
                    decoder: d.name(),
                    labels: c,
                    secs_per_token: per_token,
                });
                pts.push((c as f64, per_token));
            }
            exponents.push((d.name(), loglog_slope(&pts)));
        }
    }
    BenchReport {
        fingerprint: Fingerprint::current(),
        throughput,
        scaling,
        exponents,
    }
}
