//! Span F1, token accuracy, uncertainty and refinement audits, threshold
//! sweeps.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{SchemeKind, Span, TagScheme};
use crate::decode::{mix_labels, Source};
use crate::error::{contract, Result};

/// Sentence-length buckets `(label, min, max)` inclusive.
pub const LENGTH_BUCKETS: [(&str, usize, usize); 5] = [
    ("1-10", 1, 10),
    ("11-20", 11, 20),
    ("21-30", 21, 30),
    ("31-40", 31, 40),
    (">40", 41, usize::MAX),
];

pub fn bucket_of(len: usize) -> usize {
    LENGTH_BUCKETS
        .iter()
        .position(|&(_, lo, hi)| (lo..=hi).contains(&len))
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SpanCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    fn add(&mut self, o: SpanCounts) {
        self.correct += o.correct;
        self.predicted += o.predicted;
        self.gold += o.gold;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn count(gold: &[Span], pred: &[Span]) -> SpanCounts {
    SpanCounts {
        correct: pred.iter().filter(|s| gold.contains(s)).count(),
        predicted: pred.len(),
        gold: gold.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketScore {
    pub label: &'static str,
    pub sentences: usize,
    pub counts: SpanCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub counts: SpanCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tokens: usize,
    pub correct_tokens: usize,
    pub accuracy: f64,
    pub buckets: Vec<BucketScore>,
    /// Token confusion counts `[gold][pred]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    /// F1 for BIOES schemes, token accuracy for plain tag sets.
    pub fn primary(&self, kind: SchemeKind) -> f64 {
        match kind {
            SchemeKind::Bioes => self.f1,
            SchemeKind::Plain => self.accuracy,
        }
    }
}

fn check_aligned(gold: &[Vec<usize>], pred: &[Vec<usize>]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(contract(format!(
            "{} gold sentences vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    for (k, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(contract(format!(
                "sentence {k}: gold length {} vs predicted {}",
                g.len(),
                p.len()
            )));
        }
    }
    Ok(())
}

/// Exact-match span scores: a predicted span is correct when its type and
/// both boundaries equal a gold span.
pub fn span_f1(scheme: &TagScheme, gold: &[Vec<usize>], pred: &[Vec<usize>]) -> Result<EvalReport> {
    check_aligned(gold, pred)?;
    let c = scheme.len();
    let mut counts = SpanCounts::default();
    let mut buckets: Vec<BucketScore> = LENGTH_BUCKETS
        .iter()
        .map(|&(label, _, _)| BucketScore {
            label,
            sentences: 0,
            counts: SpanCounts::default(),
        })
        .collect();
    let mut confusion = vec![vec![0usize; c]; c];
    let (mut tokens, mut correct_tokens) = (0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let sc = count(&scheme.spans(g), &scheme.spans(p));
        counts.add(sc);
        let b = &mut buckets[bucket_of(g.len())];
        b.sentences += 1;
        b.counts.add(sc);
        for (&a, &b) in g.iter().zip(p) {
            tokens += 1;
            if a == b {
                correct_tokens += 1;
            }
            if a < c && b < c {
                confusion[a][b] += 1;
            }
        }
    }
    Ok(EvalReport {
        counts,
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        tokens,
        correct_tokens,
        accuracy: ratio(correct_tokens, tokens),
        buckets,
        confusion,
    })
}

/// Span scores restricted to gold and predicted spans covering one of the
/// given positions of each sentence.
pub fn constrained_span_f1(
    scheme: &TagScheme,
    gold: &[Vec<usize>],
    pred: &[Vec<usize>],
    positions: &[Vec<usize>],
) -> Result<SpanCounts> {
    check_aligned(gold, pred)?;
    if positions.len() != gold.len() {
        return Err(contract("one position list per sentence required"));
    }
    let mut counts = SpanCounts::default();
    for ((g, p), pos) in gold.iter().zip(pred).zip(positions) {
        let covers = |s: &Span| pos.iter().any(|&i| s.start <= i && i < s.end);
        let gs: Vec<Span> = scheme.spans(g).into_iter().filter(covers).collect();
        let ps: Vec<Span> = scheme.spans(p).into_iter().filter(covers).collect();
        counts.add(count(&gs, &ps));
    }
    Ok(counts)
}

/// Token accuracy at the given positions.
pub fn positional_accuracy(gold: &[Vec<usize>], pred: &[Vec<usize>], positions: &[Vec<usize>]) -> Result<f64> {
    check_aligned(gold, pred)?;
    let (mut ok, mut total) = (0, 0);
    for ((g, p), pos) in gold.iter().zip(pred).zip(positions) {
        for &i in pos {
            if i < g.len() {
                total += 1;
                if g[i] == p[i] {
                    ok += 1;
                }
            }
        }
    }
    Ok(ratio(ok, total))
}

/// Draft uncertainty split by draft correctness, plus what the final labels
/// changed.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyAudit {
    pub tokens: usize,
    pub draft_correct: usize,
    pub draft_incorrect: usize,
    pub mean_u_correct: Option<f64>,
    pub mean_u_incorrect: Option<f64>,
    /// Draft correct, final wrong.
    pub correct_to_wrong: usize,
    /// Draft wrong, final correct.
    pub wrong_to_correct: usize,
    /// Draft wrong, final a different wrong label.
    pub wrong_to_wrong: usize,
    pub unchanged: usize,
}

impl UncertaintyAudit {
    pub fn ratio(&self) -> Option<f64> {
        match (self.mean_u_incorrect, self.mean_u_correct) {
            (Some(i), Some(c)) if c > 0.0 => Some(i / c),
            (Some(_), Some(_)) => Some(f64::INFINITY),
            _ => None,
        }
    }

    pub fn changed(&self) -> usize {
        self.correct_to_wrong + self.wrong_to_correct + self.wrong_to_wrong
    }
}

pub fn uncertainty_audit(
    drafts: &[Vec<usize>],
    uncertainty: &[Vec<f64>],
    finals: &[Vec<usize>],
    gold: &[Vec<usize>],
) -> Result<UncertaintyAudit> {
    check_aligned(gold, drafts)?;
    check_aligned(gold, finals)?;
    check_aligned(
        gold,
        &uncertainty.iter().map(|u| vec![0; u.len()]).collect::<Vec<_>>(),
    )?;
    let mut a = UncertaintyAudit {
        tokens: 0,
        draft_correct: 0,
        draft_incorrect: 0,
        mean_u_correct: None,
        mean_u_incorrect: None,
        correct_to_wrong: 0,
        wrong_to_correct: 0,
        wrong_to_wrong: 0,
        unchanged: 0,
    };
    let (mut su_c, mut su_i) = (0.0, 0.0);
    for k in 0..gold.len() {
        for i in 0..gold[k].len() {
            let (g, d, f, u) = (gold[k][i], drafts[k][i], finals[k][i], uncertainty[k][i]);
            a.tokens += 1;
            if d == g {
                a.draft_correct += 1;
                su_c += u;
            } else {
                a.draft_incorrect += 1;
                su_i += u;
            }
            if f == d {
                a.unchanged += 1;
            } else if d == g {
                a.correct_to_wrong += 1;
            } else if f == g {
                a.wrong_to_correct += 1;
            } else {
                a.wrong_to_wrong += 1;
            }
        }
    }
    a.mean_u_correct = (a.draft_correct > 0).then(|| su_c / a.draft_correct as f64);
    a.mean_u_incorrect = (a.draft_incorrect > 0).then(|| su_i / a.draft_incorrect as f64);
    Ok(a)
}

/// `{0, step, 2·step, …} ∪ {ln C}`, all below or at `ln C`.
pub fn gamma_grid(num_labels: usize, step: f64) -> Vec<f64> {
    let top = libm::log(num_labels.max(1) as f64);
    let mut grid = Vec::new();
    let mut k = 0usize;
    loop {
        let g = k as f64 * step;
        if g >= top - 1e-12 || step <= 0.0 && k > 0 {
            break;
        }
        grid.push(g);
        k += 1;
    }
    grid.push(top);
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub gamma: f64,
    pub f1: f64,
    /// F1 minus the F1 at the first grid point (`Γ = 0`).
    pub delta: f64,
    pub refined_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaSweep {
    pub points: Vec<SweepPoint>,
    pub best_gamma: f64,
    pub best_f1: f64,
}

/// Mixed-decoder scores at every threshold of `grid`. The best point is the
/// first maximum, i.e. the smallest threshold among ties.
pub fn gamma_sweep(
    scheme: &TagScheme,
    drafts: &[Vec<usize>],
    uncertainty: &[Vec<f64>],
    refined: &[Vec<usize>],
    gold: &[Vec<usize>],
    grid: &[f64],
) -> Result<GammaSweep> {
    if grid.is_empty() {
        return Err(contract("empty threshold grid"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &gamma in grid {
        let mut finals = Vec::with_capacity(gold.len());
        let (mut refined_n, mut total) = (0usize, 0usize);
        for k in 0..gold.len() {
            let m = mix_labels(&drafts[k], &uncertainty[k], &refined[k], gamma)?;
            refined_n += m.iter().filter(|p| p.1 == Source::Refined).count();
            total += m.len();
            finals.push(m.into_iter().map(|p| p.0).collect());
        }
        let r = span_f1(scheme, gold, &finals)?;
        points.push(SweepPoint {
            gamma,
            f1: r.primary(scheme.kind()),
            delta: 0.0,
            refined_fraction: ratio(refined_n, total),
        });
    }
    let base = points[0].f1;
    let mut best = 0;
    for p in points.iter_mut() {
        p.delta = p.f1 - base;
    }
    for k in 1..points.len() {
        if points[k].f1 > points[best].f1 {
            best = k;
        }
    }
    Ok(GammaSweep {
        best_gamma: points[best].gamma,
        best_f1: points[best].f1,
        points,
    })
}

/// Plain-text rendering of a report.
pub fn summary(report: &EvalReport) -> String {
    let mut s = format!(
        "precision {:.4} recall {:.4} f1 {:.4} accuracy {:.4} ({} spans predicted, {} gold, {} correct)\n",
        report.precision,
        report.recall,
        report.f1,
        report.accuracy,
        report.counts.predicted,
        report.counts.gold,
        report.counts.correct
    );
    for b in &report.buckets {
        if b.sentences > 0 {
            s.push_str(&format!(
                "  length {:>6}: {:>5} sentences f1 {:.4}\n",
                b.label,
                b.sentences,
                b.counts.f1()
            ));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(s: &TagScheme, labels: &str) -> Vec<usize> {
        s.encode(&labels.split_whitespace().collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identical_sequences_score_one() {
        let s = TagScheme::bioes(&["PER", "LOC"]);
        let g = vec![enc(&s, "B-PER E-PER O S-LOC")];
        let r = span_f1(&s, &g, &g).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.accuracy), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn no_predictions_give_zero() {
        let s = TagScheme::bioes(&["PER"]);
        let g = vec![enc(&s, "S-PER O")];
        let p = vec![enc(&s, "O O")];
        let r = span_f1(&s, &g, &p).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn length_mismatch_is_error() {
        let s = TagScheme::bioes(&["PER"]);
        assert!(span_f1(&s, &[vec![0, 0]], &[vec![0]]).is_err());
        assert!(span_f1(&s, &[vec![0]], &[]).is_err());
    }

    /// Ten sentences tallied by hand:
    ///
    /// | # | gold spans          | predicted spans         | correct |
    /// |---|---------------------|-------------------------|---------|
    /// | 0 | PER[0,2)            | PER[0,2)                | 1       |
    /// | 1 | LOC[1,2)            | PER[1,2)                | 0       |
    /// | 2 | PER[0,1) LOC[2,3)   | PER[0,1) LOC[2,3)       | 2       |
    /// | 3 | ORG[0,3)            | ORG[0,2)                | 0       |
    /// | 4 | -                   | LOC[0,1)                | 0       |
    /// | 5 | PER[1,3)            | -                       | 0       |
    /// | 6 | LOC[0,1) LOC[1,2)   | LOC[0,2)                | 0       |
    /// | 7 | ORG[2,4)            | ORG[2,4)                | 1       |
    /// | 8 | PER[0,1)            | PER[0,1) ORG[2,3)       | 1       |
    /// | 9 | -                   | -                       | 0       |
    ///
    /// Totals: 10 gold, 10 predicted, 5 correct.
    #[test]
    fn hand_tallied_fixture() {
        let s = TagScheme::bioes(&["PER", "LOC", "ORG"]);
        let gold = [
            "B-PER E-PER O",
            "O S-LOC O",
            "S-PER O S-LOC",
            "B-ORG I-ORG E-ORG",
            "O O",
            "O B-PER E-PER",
            "S-LOC S-LOC",
            "O O B-ORG E-ORG",
            "S-PER O O",
            "O",
        ];
        let pred = [
            "B-PER E-PER O",
            "O S-PER O",
            "S-PER O S-LOC",
            "B-ORG E-ORG O",
            "S-LOC O",
            "O O O",
            "B-LOC E-LOC",
            "O O B-ORG E-ORG",
            "S-PER O S-ORG",
            "O",
        ];
        let g: Vec<_> = gold.iter().map(|l| enc(&s, l)).collect();
        let p: Vec<_> = pred.iter().map(|l| enc(&s, l)).collect();
        let r = span_f1(&s, &g, &p).unwrap();
        assert_eq!(r.counts, SpanCounts { correct: 5, predicted: 10, gold: 10 });
        assert!((r.f1 - 0.5).abs() < 1e-15);
        // Tokens: 27 in total; mismatches: s1 1, s3 2, s4 1, s5 2, s6 2, s8 1.
        assert_eq!(r.tokens, 27);
        assert_eq!(r.correct_tokens, 18);
        assert_eq!(r.buckets[0].sentences, 10);
    }

    #[test]
    fn constrained_scores_only_cover_positions() {
        let s = TagScheme::bioes(&["PER", "LOC"]);
        let g = vec![enc(&s, "S-PER O O B-LOC E-LOC")];
        let p = vec![enc(&s, "S-LOC O O B-LOC E-LOC")];
        let c = constrained_span_f1(&s, &g, &p, &[vec![4]]).unwrap();
        assert_eq!(c, SpanCounts { correct: 1, predicted: 1, gold: 1 });
        let c = constrained_span_f1(&s, &g, &p, &[vec![0]]).unwrap();
        assert_eq!(c, SpanCounts { correct: 0, predicted: 1, gold: 1 });
    }

    #[test]
    fn audit_conserves_tokens() {
        let gold = vec![vec![0, 1, 2, 1, 0]];
        let draft = vec![vec![0, 2, 2, 0, 0]];
        let u = vec![vec![0.1, 0.9, 0.2, 0.8, 0.05]];
        let finals = vec![vec![1, 1, 2, 2, 0]];
        let a = uncertainty_audit(&draft, &u, &finals, &gold).unwrap();
        assert_eq!(a.correct_to_wrong, 1);
        assert_eq!(a.wrong_to_correct, 1);
        assert_eq!(a.wrong_to_wrong, 1);
        assert_eq!(a.unchanged, 2);
        assert_eq!(a.changed() + a.unchanged, a.tokens);
        assert!((a.mean_u_incorrect.unwrap() - 0.85).abs() < 1e-12);
        assert!((a.mean_u_correct.unwrap() - 0.35 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn audit_without_errors_has_no_incorrect_mean() {
        let g = vec![vec![0, 1]];
        let a = uncertainty_audit(&g, &[vec![0.1, 0.2]], &g, &g).unwrap();
        assert_eq!(a.mean_u_incorrect, None);
        assert_eq!(a.ratio(), None);
    }

    #[test]
    fn infinite_threshold_has_no_flips() {
        let gold = vec![vec![0, 1, 2]];
        let draft = vec![vec![0, 2, 2]];
        let refined = vec![vec![1, 1, 0]];
        let u = vec![vec![0.3, 0.9, 1.0]];
        let m = mix_labels(&draft[0], &u[0], &refined[0], f64::INFINITY).unwrap();
        let finals = vec![m.into_iter().map(|p| p.0).collect()];
        let a = uncertainty_audit(&draft, &u, &finals, &gold).unwrap();
        assert_eq!(a.changed(), 0);
    }

    #[test]
    fn grid_covers_both_ends() {
        let g = gamma_grid(13, 0.05);
        assert_eq!(g[0], 0.0);
        assert!((g[g.len() - 1] - libm::log(13.0)).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(gamma_grid(1, 0.05), vec![0.0]);
    }

    #[test]
    fn sweep_endpoints_are_refined_and_draft() {
        let s = TagScheme::bioes(&["PER", "LOC"]);
        let gold = vec![enc(&s, "S-PER O S-LOC"), enc(&s, "O S-LOC O")];
        let draft = vec![enc(&s, "S-PER O S-PER"), enc(&s, "O S-LOC O")];
        let refined = vec![enc(&s, "S-LOC O S-LOC"), enc(&s, "O S-LOC O")];
        let u = vec![vec![0.2, 0.01, 1.2], vec![0.1, 0.1, 0.1]];
        let grid = gamma_grid(s.len(), 0.05);
        let sw = gamma_sweep(&s, &draft, &u, &refined, &gold, &grid).unwrap();
        let all_ref = span_f1(&s, &gold, &refined).unwrap().f1;
        let all_draft = span_f1(&s, &gold, &draft).unwrap().f1;
        assert_eq!(sw.points[0].f1, all_ref);
        assert_eq!(sw.points.last().unwrap().f1, all_draft);
        assert!(sw.best_f1 >= all_ref && sw.best_f1 >= all_draft);
        assert_eq!(sw.best_f1, 1.0);
        assert!(sw.best_gamma >= 0.2 && sw.best_gamma < 1.2);
    }
}
