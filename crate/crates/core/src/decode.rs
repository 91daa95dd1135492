//! Label decoders: per-position argmax, linear-chain CRF (Viterbi, forward
//! algorithm, likelihood gradients) and the uncertainty-threshold mixer.
//!
//! CRF transition matrices are `(C+2)×(C+2)`, indexed `[prev][next]`, with the
//! virtual start state at `C` and the stop state at `C+1`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::encoder::DraftPrediction;
use crate::error::{contract, Result};
use crate::refiner::RefinedPrediction;
use crate::tensor::{argmax, log_sum_exp, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Softmax,
    Crf,
    Mix,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Softmax => "softmax",
            DecoderKind::Crf => "crf",
            DecoderKind::Mix => "mix",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax" => Some(DecoderKind::Softmax),
            "crf" => Some(DecoderKind::Crf),
            "mix" | "threshold-mix" => Some(DecoderKind::Mix),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub decoder: DecoderKind,
    /// Uncertainty threshold in nats.
    pub gamma: f64,
    pub samples: usize,
    pub legalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderKind::Mix,
            gamma: 0.35,
            samples: 8,
            legalize: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(crate::Error::Config(format!("decode.gamma must be >= 0, got {}", self.gamma)));
        }
        if self.samples == 0 {
            return Err(crate::Error::Config("decode.samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Row-wise argmax of `[n×C]` scores.
pub fn softmax_decode(scores: &Tensor) -> Vec<usize> {
    scores.argmax_rows()
}

fn check_crf(emissions: &Tensor, trans: &[f64]) -> Result<(usize, usize)> {
    let n = emissions.rows();
    let c = emissions.cols();
    if trans.len() != (c + 2) * (c + 2) {
        return Err(contract(format!(
            "transition matrix has {} entries, expected ({c}+2)^2",
            trans.len()
        )));
    }
    if n == 0 {
        return Err(contract("CRF needs at least one position"));
    }
    Ok((n, c))
}

/// Adds an optional `0/-inf` legality mask to the transition scores.
pub fn effective_transitions(trans: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    match mask {
        Some(m) => trans.iter().zip(m).map(|(a, b)| a + b).collect(),
        None => trans.to_vec(),
    }
}

/// Score of one label path including start and stop transitions.
pub fn path_score(emissions: &Tensor, trans: &[f64], path: &[usize]) -> f64 {
    let c = emissions.cols();
    let w = c + 2;
    let mut s = trans[c * w + path[0]];
    for (t, &y) in path.iter().enumerate() {
        s += emissions.at(t, y);
        if t > 0 {
            s += trans[path[t - 1] * w + y];
        }
    }
    s + trans[path[path.len() - 1] * w + c + 1]
}

/// Highest-scoring path and its score. Ties go to the lowest label id at each
/// backpointer and at the final state.
pub fn viterbi(emissions: &Tensor, trans: &[f64]) -> Result<(Vec<usize>, f64)> {
    let (n, c) = check_crf(emissions, trans)?;
    let w = c + 2;
    let mut delta: Vec<f64> = (0..c).map(|j| trans[c * w + j] + emissions.at(0, j)).collect();
    let mut back = vec![0usize; n * c];
    let mut next = vec![0.0; c];
    for t in 1..n {
        for j in 0..c {
            let mut best = 0;
            let mut best_s = delta[0] + trans[j];
            for i in 1..c {
                let s = delta[i] + trans[i * w + j];
                if s > best_s {
                    best_s = s;
                    best = i;
                }
            }
            back[t * c + j] = best;
            next[j] = best_s + emissions.at(t, j);
        }
        core::mem::swap(&mut delta, &mut next);
    }
    let mut last = 0;
    let mut score = delta[0] + trans[c + 1];
    for j in 1..c {
        let s = delta[j] + trans[j * w + c + 1];
        if s > score {
            score = s;
            last = j;
        }
    }
    let mut path = vec![last; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t * c + path[t]];
    }
    Ok((path, score))
}

/// Forward log-scores `alpha[t][j]`, row-major `[n×C]`.
fn forward_scores(emissions: &Tensor, trans: &[f64], n: usize, c: usize) -> Vec<f64> {
    let w = c + 2;
    let mut alpha = vec![0.0; n * c];
    for j in 0..c {
        alpha[j] = trans[c * w + j] + emissions.at(0, j);
    }
    let mut buf = vec![0.0; c];
    for t in 1..n {
        for j in 0..c {
            for i in 0..c {
                buf[i] = alpha[(t - 1) * c + i] + trans[i * w + j];
            }
            alpha[t * c + j] = log_sum_exp(&buf) + emissions.at(t, j);
        }
    }
    alpha
}

fn backward_scores(emissions: &Tensor, trans: &[f64], n: usize, c: usize) -> Vec<f64> {
    let w = c + 2;
    let mut beta = vec![0.0; n * c];
    for i in 0..c {
        beta[(n - 1) * c + i] = trans[i * w + c + 1];
    }
    let mut buf = vec![0.0; c];
    for t in (0..n - 1).rev() {
        for i in 0..c {
            for j in 0..c {
                buf[j] = trans[i * w + j] + emissions.at(t + 1, j) + beta[(t + 1) * c + j];
            }
            beta[t * c + i] = log_sum_exp(&buf);
        }
    }
    beta
}

/// Log partition function by the forward algorithm.
pub fn log_partition(emissions: &Tensor, trans: &[f64]) -> Result<f64> {
    let (n, c) = check_crf(emissions, trans)?;
    let w = c + 2;
    let alpha = forward_scores(emissions, trans, n, c);
    let last: Vec<f64> = (0..c)
        .map(|j| alpha[(n - 1) * c + j] + trans[j * w + c + 1])
        .collect();
    Ok(log_sum_exp(&last))
}

/// Negative log-likelihood of `gold` and its gradients with respect to the
/// emissions and the transition scores.
pub fn crf_nll_with_grad(
    emissions: &Tensor,
    trans: &[f64],
    gold: &[usize],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (n, c) = check_crf(emissions, trans)?;
    if gold.len() != n || gold.iter().any(|&y| y >= c) {
        return Err(contract("gold labels do not match the emission matrix"));
    }
    let w = c + 2;
    let alpha = forward_scores(emissions, trans, n, c);
    let beta = backward_scores(emissions, trans, n, c);
    let last: Vec<f64> = (0..c)
        .map(|j| alpha[(n - 1) * c + j] + trans[j * w + c + 1])
        .collect();
    let log_z = log_sum_exp(&last);
    let loss = log_z - path_score(emissions, trans, gold);

    let prob = |s: f64| if s == f64::NEG_INFINITY { 0.0 } else { libm::exp(s - log_z) };
    let mut d_e = vec![0.0; n * c];
    let mut d_t = vec![0.0; w * w];
    for t in 0..n {
        for j in 0..c {
            d_e[t * c + j] = prob(alpha[t * c + j] + beta[t * c + j]);
        }
    }
    for j in 0..c {
        d_t[c * w + j] += prob(trans[c * w + j] + emissions.at(0, j) + beta[j]);
        d_t[j * w + c + 1] += prob(alpha[(n - 1) * c + j] + trans[j * w + c + 1]);
    }
    for t in 1..n {
        for i in 0..c {
            for j in 0..c {
                let s = alpha[(t - 1) * c + i] + trans[i * w + j] + emissions.at(t, j) + beta[t * c + j];
                d_t[i * w + j] += prob(s);
            }
        }
    }
    d_t[c * w + gold[0]] -= 1.0;
    d_t[gold[n - 1] * w + c + 1] -= 1.0;
    for t in 0..n {
        d_e[t * c + gold[t]] -= 1.0;
        if t > 0 {
            d_t[gold[t - 1] * w + gold[t]] -= 1.0;
        }
    }
    Ok((loss, d_e, d_t))
}

pub fn crf_nll(emissions: &Tensor, trans: &[f64], gold: &[usize]) -> Result<f64> {
    crf_nll_with_grad(emissions, trans, gold).map(|r| r.0)
}

/// CRF negative log-likelihood recorded on the tape. `mask` is added to the
/// transitions and receives no gradient.
pub fn crf_nll_var(
    tape: &mut Tape,
    emissions: Var,
    transitions: Var,
    mask: Option<&[f64]>,
    gold: &[usize],
) -> Result<Var> {
    let trans = effective_transitions(tape.value(transitions).data(), mask);
    let (loss, d_e, d_t) = crf_nll_with_grad(tape.value(emissions), &trans, gold)?;
    tape.custom_scalar(loss, vec![(emissions, d_e), (transitions, d_t)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Draft,
    Refined,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Draft => "draft",
            Source::Refined => "refined",
        }
    }
}

/// Picks `refined[i]` where `uncertainty[i] > gamma` (strictly), else
/// `draft[i]`.
pub fn mix_labels(
    draft: &[usize],
    uncertainty: &[f64],
    refined: &[usize],
    gamma: f64,
) -> Result<Vec<(usize, Source)>> {
    if draft.len() != uncertainty.len() || draft.len() != refined.len() {
        return Err(contract(format!(
            "threshold mix lengths differ: draft {}, uncertainty {}, refined {}",
            draft.len(),
            uncertainty.len(),
            refined.len()
        )));
    }
    Ok(draft
        .iter()
        .zip(uncertainty)
        .zip(refined)
        .map(|((&d, &u), &r)| if u > gamma { (r, Source::Refined) } else { (d, Source::Draft) })
        .collect())
}

pub fn threshold_mix(
    draft: &DraftPrediction,
    refined: &RefinedPrediction,
    gamma: f64,
) -> Result<Vec<(usize, Source)>> {
    mix_labels(&draft.labels, &draft.uncertainty, &refined.labels, gamma)
}

/// Index of the best entry, breaking ties toward the lowest index.
pub fn best_label(scores: &[f64]) -> usize {
    argmax(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_instance(n: usize, c: usize, r: &mut rng::Rng) -> (Tensor, Vec<f64>) {
        let e = Tensor::matrix(n, c, (0..n * c).map(|_| r.gen_range(-2.0..2.0)).collect());
        let t = (0..(c + 2) * (c + 2)).map(|_| r.gen_range(-2.0..2.0)).collect();
        (e, t)
    }

    fn all_paths(n: usize, c: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let total = c.pow(n as u32);
        for mut k in 0..total {
            let mut p = vec![0; n];
            for t in (0..n).rev() {
                p[t] = k % c;
                k /= c;
            }
            out.push(p);
        }
        out
    }

    fn brute_force(e: &Tensor, t: &[f64]) -> (Vec<usize>, f64, f64) {
        let paths = all_paths(e.rows(), e.cols());
        let scores: Vec<f64> = paths.iter().map(|p| path_score(e, t, p)).collect();
        let mut best = 0;
        for k in 1..paths.len() {
            if scores[k] > scores[best] {
                best = k;
            }
        }
        (paths[best].clone(), scores[best], log_sum_exp(&scores))
    }

    #[test]
    fn viterbi_and_log_partition_match_enumeration() {
        let mut r = rng::seeded(2024);
        for n in 1..=6 {
            for c in 1..=5 {
                for _ in 0..200 {
                    let (e, t) = random_instance(n, c, &mut r);
                    let (path, score) = viterbi(&e, &t).unwrap();
                    let (bp, bs, lz) = brute_force(&e, &t);
                    assert_eq!(path, bp, "n={n} c={c}");
                    assert!((score - bs).abs() < 1e-12);
                    assert!((log_partition(&e, &t).unwrap() - lz).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn single_position_uses_start_and_stop() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let mut t = vec![0.0; 16];
        t[2 * 4 + 1] = 0.6; // start -> 1
        t[4 + 3] = 0.6; // 1 -> stop
        assert_eq!(viterbi(&e, &t).unwrap().0, vec![1]);
    }

    #[test]
    fn zero_transitions_decouple_positions() {
        let mut r = rng::seeded(5);
        let (e, _) = random_instance(7, 4, &mut r);
        let t = vec![0.0; 36];
        assert_eq!(viterbi(&e, &t).unwrap().0, softmax_decode(&e));
    }

    #[test]
    fn ties_prefer_lowest_labels() {
        let e = Tensor::zeros(3, 3);
        let t = vec![0.0; 25];
        assert_eq!(viterbi(&e, &t).unwrap().0, vec![0, 0, 0]);
    }

    #[test]
    fn one_label_has_zero_loss() {
        let e = Tensor::from_rows(&[vec![0.3], vec![-1.2], vec![2.0]]);
        let t = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        assert!(crf_nll(&e, &t, &[0, 0, 0]).unwrap().abs() < 1e-12);
    }

    fn central(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let a = f(&p);
                p[i] -= 2.0 * h;
                let b = f(&p);
                (a - b) / (2.0 * h)
            })
            .collect()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let mut r = rng::seeded(77);
        for (n, c) in [(1, 3), (4, 3), (5, 4)] {
            let (e, t) = random_instance(n, c, &mut r);
            let gold: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
            let (_, de, dt) = crf_nll_with_grad(&e, &t, &gold).unwrap();
            let nt = central(|tt| crf_nll(&e, tt, &gold).unwrap(), &t, 1e-5);
            for (a, b) in dt.iter().zip(&nt) {
                assert!(rel(*a, *b) < 1e-4, "{a} vs {b}");
            }
            let ne = central(
                |ee| crf_nll(&Tensor::matrix(n, c, ee.to_vec()), &t, &gold).unwrap(),
                e.data(),
                1e-5,
            );
            for (a, b) in de.iter().zip(&ne) {
                assert!(rel(*a, *b) < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn masked_transitions_get_no_probability() {
        use crate::data::TagScheme;
        let s = TagScheme::bioes(&["PER"]);
        let mask = s.transition_mask();
        let mut r = rng::seeded(3);
        let (e, t) = random_instance(4, s.len(), &mut r);
        let tt = effective_transitions(&t, Some(&mask));
        let (path, _) = viterbi(&e, &tt).unwrap();
        assert!(s.is_legal(&path));
        let gold = s.encode(&["B-PER", "E-PER", "O", "S-PER"]).unwrap();
        let (loss, _, dt) = crf_nll_with_grad(&e, &tt, &gold).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        for (g, m) in dt.iter().zip(&mask) {
            if *m == f64::NEG_INFINITY {
                assert_eq!(*g, 0.0);
            }
        }
    }

    #[test]
    fn tape_op_routes_gradients() {
        let mut tape = Tape::new();
        let e = tape.leaf(Tensor::from_rows(&[vec![0.5, -0.5], vec![0.1, 0.9]]), true);
        let t = tape.leaf(Tensor::zeros(4, 4), true);
        let l = crf_nll_var(&mut tape, e, t, None, &[0, 1]).unwrap();
        let l2 = tape.scale(l, 2.0);
        tape.backward(l2).unwrap();
        let (_, de, dt) = crf_nll_with_grad(tape.value(e), tape.value(t).data(), &[0, 1]).unwrap();
        for (a, b) in tape.grad(e).unwrap().iter().zip(&de) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
        for (a, b) in tape.grad(t).unwrap().iter().zip(&dt) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn mix_worked_example() {
        let out = mix_labels(&[0, 0, 0], &[0.5, 0.1, 0.8], &[1, 1, 1], 0.35).unwrap();
        let src: Vec<Source> = out.iter().map(|p| p.1).collect();
        assert_eq!(src, vec![Source::Refined, Source::Draft, Source::Refined]);
        assert_eq!(out.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 0, 1]);
    }

    #[test]
    fn mix_equal_uncertainty_keeps_draft() {
        let out = mix_labels(&[2], &[0.35], &[1], 0.35).unwrap();
        assert_eq!(out, vec![(2, Source::Draft)]);
    }

    #[test]
    fn mix_length_mismatch_is_error() {
        assert!(mix_labels(&[0, 1], &[0.1], &[0, 1], 0.2).is_err());
    }

    proptest! {
        #[test]
        fn emission_shift_leaves_nll_unchanged(
            seed in any::<u64>(), n in 1usize..6, c in 1usize..5, shift in -5.0f64..5.0, at in 0usize..6
        ) {
            let mut r = rng::seeded(seed);
            let (e, t) = random_instance(n, c, &mut r);
            let gold: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
            let mut e2 = e.clone();
            let pos = at % n;
            for j in 0..c {
                e2.data_mut()[pos * c + j] += shift;
            }
            let a = crf_nll(&e, &t, &gold).unwrap();
            let b = crf_nll(&e2, &t, &gold).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn raising_gamma_never_adds_refined(
            seed in any::<u64>(), n in 1usize..30, g1 in 0.0f64..2.0, dg in 0.0f64..1.0
        ) {
            let mut r = rng::seeded(seed);
            let u: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..2.0)).collect();
            let d: Vec<usize> = (0..n).map(|_| r.gen_range(0..5)).collect();
            let f: Vec<usize> = (0..n).map(|_| r.gen_range(0..5)).collect();
            let lo = mix_labels(&d, &u, &f, g1).unwrap();
            let hi = mix_labels(&d, &u, &f, g1 + dg).unwrap();
            for (a, b) in lo.iter().zip(&hi) {
                if a.1 == Source::Draft {
                    prop_assert_eq!(b.1, Source::Draft);
                }
            }
        }
    }
}
