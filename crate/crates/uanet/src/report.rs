//! CSV tables, plain-text summaries and gnuplot scripts.

use std::fmt::Write as _;

use uanet_core::eval::{EvalReport, GammaSweep, SpanCounts, UncertaintyAudit};
use uanet_core::train::EpochRecord;

use crate::bench::BenchReport;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6}"))
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("phase,epoch,loss,dev_metric,improved\n");
    for r in history {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{}", r.phase.name(), r.epoch, r.loss, r.dev_metric, r.improved);
    }
    s
}

/// One JSON object per epoch for the training log.
pub fn history_line(r: &EpochRecord, elapsed_secs: f64) -> String {
    serde_json::json!({
        "phase": r.phase.name(),
        "epoch": r.epoch,
        "loss": r.loss,
        "dev_metric": r.dev_metric,
        "improved": r.improved,
        "elapsed_secs": elapsed_secs,
    })
    .to_string()
}

pub fn sweep_csv(sweep: &GammaSweep) -> String {
    let mut s = String::from("gamma,f1,delta_f1,refined_fraction\n");
    for p in &sweep.points {
        let _ = writeln!(s, "{:.4},{:.6},{:.6},{:.6}", p.gamma, p.f1, p.delta, p.refined_fraction);
    }
    s
}

/// Metric against MC sample count.
pub fn samples_csv(rows: &[(usize, f64, f64)]) -> String {
    let mut s = String::from("samples,draft_f1,final_f1\n");
    for (m, d, f) in rows {
        let _ = writeln!(s, "{m},{d:.6},{f:.6}");
    }
    s
}

pub fn eval_csv(rows: &[(&str, &EvalReport)]) -> String {
    let mut s = String::from("output,bucket,sentences,correct,predicted,gold,precision,recall,f1\n");
    for (name, r) in rows {
        let c = r.counts;
        let _ = writeln!(
            s,
            "{name},all,,{},{},{},{:.6},{:.6},{:.6}",
            c.correct, c.predicted, c.gold, r.precision, r.recall, r.f1
        );
        for b in &r.buckets {
            let c = b.counts;
            let _ = writeln!(
                s,
                "{name},{},{},{},{},{},{:.6},{:.6},{:.6}",
                b.label,
                b.sentences,
                c.correct,
                c.predicted,
                c.gold,
                c.precision(),
                c.recall(),
                c.f1()
            );
        }
    }
    s
}

pub fn audit_text(a: &UncertaintyAudit, gamma: f64) -> String {
    format!(
        "uncertainty audit at gamma {gamma:.4}\n  tokens {}\n  draft correct {} (mean u {})\n  draft incorrect {} (mean u {})\n  ratio incorrect/correct {}\n  correct->wrong {}\n  wrong->correct {}\n  wrong->wrong {}\n  unchanged {}\n",
        a.tokens,
        a.draft_correct,
        opt(a.mean_u_correct),
        a.draft_incorrect,
        opt(a.mean_u_incorrect),
        opt(a.ratio()),
        a.correct_to_wrong,
        a.wrong_to_correct,
        a.wrong_to_wrong,
        a.unchanged
    )
}

pub fn counts_line(name: &str, c: &SpanCounts) -> String {
    format!(
        "{name}: f1 {:.4} ({} correct, {} predicted, {} gold)\n",
        c.f1(),
        c.correct,
        c.predicted,
        c.gold
    )
}

pub fn bench_csv(r: &BenchReport) -> String {
    let mut s = String::from("decoder,bucket,length,labels,sentences_per_sec,passes\n");
    for t in &r.throughput {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.3},{}",
            t.decoder, t.bucket, t.length, t.labels, t.sentences_per_sec, t.passes
        );
    }
    s
}

/// Seconds per token, one column per decoder.
pub fn scaling_csv(r: &BenchReport) -> String {
    let mut decoders: Vec<&str> = r.scaling.iter().map(|t| t.decoder).collect();
    decoders.dedup();
    let mut labels: Vec<usize> = r.scaling.iter().map(|t| t.labels).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut s = format!("labels,{}\n", decoders.join(","));
    for c in labels {
        let _ = write!(s, "{c}");
        for d in &decoders {
            match r.scaling.iter().find(|t| t.decoder == *d && t.labels == c) {
                Some(t) => {
                    let _ = write!(s, ",{:.6e}", t.secs_per_token);
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

pub fn bench_text(r: &BenchReport) -> String {
    let f = &r.fingerprint;
    let mut s = format!(
        "environment: {} {} cpus {} model {} optimized {} version {}\n",
        f.os,
        f.arch,
        f.cpus,
        f.cpu_model.as_deref().unwrap_or("unknown"),
        f.optimized,
        f.version
    );
    let mut lengths: Vec<usize> = r.throughput.iter().map(|t| t.length).collect();
    lengths.dedup();
    for len in lengths {
        let _ = write!(s, "length {len:>3}:");
        for t in r.throughput.iter().filter(|t| t.length == len) {
            let _ = write!(s, " {} {:.1}/s", t.decoder, t.sentences_per_sec);
        }
        if let (Some(m), Some(v)) = (r.throughput("mix", len), r.throughput("viterbi", len)) {
            let _ = write!(s, " (mix/viterbi {:.2}x)", m / v);
        }
        s.push('\n');
    }
    for (d, e) in &r.exponents {
        let _ = writeln!(s, "time-per-token exponent in C for {d}: {e:.3}");
    }
    s
}

/// Gnuplot script plotting column pairs of `csv`, optionally on log-log axes.
pub fn gnuplot(csv: &str, png: &str, xlabel: &str, ylabel: &str, series: &[(usize, usize, &str)], logscale: bool) -> String {
    let mut s = String::from("set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 800,500\n");
    let _ = writeln!(s, "set output '{png}'\nset xlabel '{xlabel}'\nset ylabel '{ylabel}'");
    if logscale {
        s.push_str("set logscale xy\n");
    }
    let plots: Vec<String> = series
        .iter()
        .map(|(x, y, title)| format!("'{csv}' using {x}:{y} with linespoints title '{title}'"))
        .collect();
    let _ = writeln!(s, "plot {}", plots.join(", \\\n     "));
    s
}
