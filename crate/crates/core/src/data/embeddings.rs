//! Pretrained embedding text files (`word v1 v2 … vd` per line).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;

use super::Vocabulary;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub fn parse_embeddings(text: &str, dim: usize) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let mut cols = line.split_whitespace();
        let Some(word) = cols.next() else { continue };
        let values = cols
            .map(|c| c.parse::<f64>())
            .collect::<core::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: n + 1,
                detail: format!("bad float: {e}"),
            })?;
        if values.len() != dim {
            return Err(Error::Parse {
                line: n + 1,
                detail: format!("expected {dim} values, found {}", values.len()),
            });
        }
        out.insert(word.to_string(), values);
    }
    Ok(out)
}

/// Bound of the uniform initializer for rows missing from the file.
pub fn init_bound(dim: usize) -> f64 {
    libm::sqrt(3.0 / dim as f64)
}

/// Word table `[V×dim]`: rows found in `pretrained` (by exact token, then by
/// normalized form) are copied, the rest drawn from `U[-√(3/dim), √(3/dim)]`.
/// Returns the table and the number of copied rows.
pub fn init_word_table(
    vocab: &Vocabulary,
    pretrained: Option<&BTreeMap<String, Vec<f64>>>,
    dim: usize,
    rng: &mut Rng,
) -> (Tensor, usize) {
    let bound = init_bound(dim);
    let mut data = Vec::with_capacity(vocab.num_words() * dim);
    let mut matched = 0;
    for id in 0..vocab.num_words() {
        let word = vocab.word(id);
        let found = pretrained.and_then(|p| {
            p.get(word)
                .or_else(|| p.get(&vocab.policy().normalize(word)))
                .filter(|_| id != super::vocab::UNK)
        });
        match found {
            Some(v) => {
                data.extend_from_slice(v);
                matched += 1;
            }
            None => data.extend((0..dim).map(|_| rng.gen_range(-bound..=bound))),
        }
    }
    (Tensor::matrix(vocab.num_words(), dim, data), matched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CasePolicy, Sentence};
    use crate::rng;
    use alloc::vec;

    #[test]
    fn parses_a_line() {
        let m = parse_embeddings("the 0.1 0.2\n", 2).unwrap();
        assert_eq!(m["the"], vec![0.1, 0.2]);
    }

    #[test]
    fn dimension_mismatch_reports_line() {
        let err = parse_embeddings("a 1 2\nb 1 2 3\n", 2).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_embeddings("a 1 x\n", 2).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn five_file_rows_match_exactly() {
        let text = "alpha 0.5 -0.25 1e-3\nbeta 1 2 3\ngamma -1.5 0 0.125\ndelta 9 8 7\neps 0.1 0.2 0.3\n";
        let pre = parse_embeddings(text, 3).unwrap();
        let words: Vec<String> = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let corpus = vec![Sentence::new(words.clone(), None).unwrap()];
        let vocab = Vocabulary::build(&corpus, CasePolicy::default());
        assert_eq!(vocab.num_words(), 9);
        let (table, matched) = init_word_table(&vocab, Some(&pre), 3, &mut rng::seeded(7));
        assert_eq!(matched, 5);
        let bound = init_bound(3);
        let mut exact = 0;
        for w in &words {
            let row = table.row_slice(vocab.word_id(w));
            match pre.get(w.as_str()) {
                Some(v) => {
                    assert_eq!(row, v.as_slice());
                    exact += 1;
                }
                None => assert!(row.iter().all(|x| x.abs() <= bound)),
            }
        }
        assert_eq!(exact, 5);
    }

    #[test]
    fn absent_words_use_uniform_bounds() {
        let corpus = vec![Sentence::new(vec!["a".into(), "b".into()], None).unwrap()];
        let vocab = Vocabulary::build(&corpus, CasePolicy::default());
        let (table, matched) = init_word_table(&vocab, None, 100, &mut rng::seeded(1));
        assert_eq!(matched, 0);
        let b = init_bound(100);
        assert!(table.data().iter().all(|x| x.abs() <= b));
        assert!(table.data().iter().any(|x| x.abs() > 0.5 * b));
    }
}
