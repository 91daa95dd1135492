//! Word and character vocabularies.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use super::Sentence;
use crate::rng::Rng;

/// Id reserved for unknown words and characters.
pub const UNK: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// How tokens are normalized before word lookup. Characters always keep
/// their original case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CasePolicy {
    pub lowercase_words: bool,
    /// Replace every ASCII digit by `0`.
    pub normalize_digits: bool,
}

impl Default for CasePolicy {
    fn default() -> Self {
        Self {
            lowercase_words: true,
            normalize_digits: true,
        }
    }
}

impl CasePolicy {
    pub fn normalize(&self, token: &str) -> String {
        token
            .chars()
            .flat_map(|c| {
                let c = if self.normalize_digits && c.is_ascii_digit() { '0' } else { c };
                let lowered: Vec<char> = if self.lowercase_words {
                    c.to_lowercase().collect()
                } else {
                    alloc::vec![c]
                };
                lowered
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    policy: CasePolicy,
    words: Vec<String>,
    word_ids: BTreeMap<String, usize>,
    freq: Vec<usize>,
    chars: Vec<char>,
    char_ids: BTreeMap<char, usize>,
}

impl Vocabulary {
    /// Builds dense ids in order of first appearance; id 0 is the unknown
    /// word (and unknown character).
    pub fn build(sentences: &[Sentence], policy: CasePolicy) -> Self {
        let mut v = Self::from_parts(policy, Vec::new(), Vec::new());
        for s in sentences {
            for (tok, chars) in s.tokens.iter().zip(&s.chars) {
                let w = policy.normalize(tok);
                let id = match v.word_ids.get(&w) {
                    Some(&id) => id,
                    None => {
                        v.words.push(w.clone());
                        v.freq.push(0);
                        v.word_ids.insert(w, v.words.len() - 1);
                        v.words.len() - 1
                    }
                };
                v.freq[id] += 1;
                for &c in chars {
                    if !v.char_ids.contains_key(&c) {
                        v.chars.push(c);
                        v.char_ids.insert(c, v.chars.len() - 1);
                    }
                }
            }
        }
        v
    }

    /// Rebuilds a vocabulary from stored word and character lists (excluding
    /// the unknown entries).
    pub fn from_parts(policy: CasePolicy, words: Vec<String>, chars: Vec<char>) -> Self {
        let mut v = Self {
            policy,
            words: alloc::vec![String::from(UNK_TOKEN)],
            word_ids: BTreeMap::new(),
            freq: alloc::vec![0],
            chars: alloc::vec!['\u{0}'],
            char_ids: BTreeMap::new(),
        };
        v.word_ids.insert(String::from(UNK_TOKEN), UNK);
        for w in words {
            if !v.word_ids.contains_key(&w) {
                v.word_ids.insert(w.clone(), v.words.len());
                v.words.push(w);
                v.freq.push(0);
            }
        }
        for c in chars {
            if !v.char_ids.contains_key(&c) && c != '\u{0}' {
                v.char_ids.insert(c, v.chars.len());
                v.chars.push(c);
            }
        }
        v
    }

    pub fn policy(&self) -> CasePolicy {
        self.policy
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    /// Known words without the unknown entry, in id order.
    pub fn words(&self) -> &[String] {
        &self.words[1..]
    }

    pub fn chars(&self) -> &[char] {
        &self.chars[1..]
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn frequency(&self, id: usize) -> usize {
        self.freq[id]
    }

    pub fn word_id(&self, token: &str) -> usize {
        self.word_ids
            .get(&self.policy.normalize(token))
            .copied()
            .unwrap_or(UNK)
    }

    pub fn char_id(&self, c: char) -> usize {
        self.char_ids.get(&c).copied().unwrap_or(UNK)
    }

    pub fn word_ids(&self, sentence: &Sentence) -> Vec<usize> {
        sentence.tokens.iter().map(|t| self.word_id(t)).collect()
    }

    /// Word ids where each training singleton is swapped for the unknown id
    /// with probability `p`.
    pub fn word_ids_with_unk_replacement(
        &self,
        sentence: &Sentence,
        p: f64,
        rng: &mut Rng,
    ) -> Vec<usize> {
        self.replace_singletons(&self.word_ids(sentence), p, rng)
    }

    pub fn replace_singletons(&self, ids: &[usize], p: f64, rng: &mut Rng) -> Vec<usize> {
        ids.iter()
            .map(|&id| {
                if id != UNK && id < self.freq.len() && self.freq[id] == 1 && rng.gen_bool(p) {
                    UNK
                } else {
                    id
                }
            })
            .collect()
    }

    pub fn char_ids(&self, sentence: &Sentence) -> Vec<Vec<usize>> {
        sentence
            .chars
            .iter()
            .map(|cs| cs.iter().map(|&c| self.char_id(c)).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use alloc::string::ToString;
    use alloc::vec;

    fn sent(words: &[&str]) -> Sentence {
        Sentence::new(words.iter().map(|w| w.to_string()).collect(), None).unwrap()
    }

    #[test]
    fn ids_are_dense_and_stable() {
        let corpus = vec![sent(&["The", "cat", "sat"]), sent(&["the", "Dog", "2019"])];
        let v = Vocabulary::build(&corpus, CasePolicy::default());
        assert_eq!(v.num_words(), 6);
        assert_eq!(v.word_id("THE"), 1);
        assert_eq!(v.word_id("1999"), v.word_id("2019"));
        assert_eq!(v.word(v.word_id("2019")), "0000");
        assert_eq!(v.word_id("unseen"), UNK);
        assert_eq!(v.frequency(1), 2);
        assert_ne!(v.char_id('T'), v.char_id('t'));
        assert_eq!(v.char_id('#'), UNK);
        let again = Vocabulary::build(&corpus, CasePolicy::default());
        assert_eq!(v, again);
        let rebuilt = Vocabulary::from_parts(v.policy(), v.words().to_vec(), v.chars().to_vec());
        assert_eq!(rebuilt.word_id("dog"), v.word_id("dog"));
        assert_eq!(rebuilt.char_id('D'), v.char_id('D'));
    }

    #[test]
    fn singleton_replacement_only_touches_singletons() {
        let corpus = vec![sent(&["a", "a", "b"])];
        let v = Vocabulary::build(&corpus, CasePolicy::default());
        let mut r = rng::seeded(1);
        let mut unk = 0;
        for _ in 0..400 {
            let ids = v.word_ids_with_unk_replacement(&corpus[0], 0.5, &mut r);
            assert_eq!(ids[0], v.word_id("a"));
            if ids[2] == UNK {
                unk += 1;
            }
        }
        assert!((150..250).contains(&unk), "{unk}");
    }
}
