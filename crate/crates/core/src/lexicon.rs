//! Prefix trie over a word list and Levenshtein nearest-word lookup.

use std::collections::BTreeMap;

use crate::alphabet::Alphabet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
struct Node {
    children: BTreeMap<usize, usize>,
    word_end: bool,
}

/// Arena-allocated trie keyed by symbol index. Node 0 is the root.
#[derive(Clone, Debug, PartialEq)]
pub struct LexiconTrie {
    nodes: Vec<Node>,
    words: usize,
}

pub const ROOT: usize = 0;

impl Default for LexiconTrie {
    fn default() -> Self {
        LexiconTrie {
            nodes: vec![Node::default()],
            words: 0,
        }
    }
}

impl LexiconTrie {
    pub fn build<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut trie = LexiconTrie::default();
        for w in words {
            trie.insert(w.as_ref())?;
        }
        Ok(trie)
    }

    pub fn insert(&mut self, word: &str) -> Result<()> {
        if word.is_empty() {
            return Err(Error::input("lexicon words must not be empty"));
        }
        let mut node = ROOT;
        for s in Alphabet.encode(word)? {
            node = match self.nodes[node].children.get(&s) {
                Some(&n) => n,
                None => {
                    self.nodes.push(Node::default());
                    let n = self.nodes.len() - 1;
                    self.nodes[node].children.insert(s, n);
                    n
                }
            };
        }
        if !self.nodes[node].word_end {
            self.nodes[node].word_end = true;
            self.words += 1;
        }
        Ok(())
    }

    /// Nodes excluding the root.
    pub fn node_count(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn word_count(&self) -> usize {
        self.words
    }

    pub fn child(&self, node: usize, symbol: usize) -> Option<usize> {
        self.nodes[node].children.get(&symbol).copied()
    }

    pub fn is_word_end(&self, node: usize) -> bool {
        self.nodes[node].word_end
    }

    fn walk(&self, prefix: &str) -> Option<usize> {
        let mut node = ROOT;
        for c in prefix.chars() {
            node = self.child(node, Alphabet.index_of(c)?)?;
        }
        Some(node)
    }

    /// `(is_valid_prefix, is_complete_word)`. The empty prefix is valid
    /// only when the trie holds at least one word.
    pub fn has_prefix(&self, prefix: &str) -> (bool, bool) {
        if self.words == 0 {
            return (false, false);
        }
        match self.walk(prefix) {
            Some(n) => (true, self.nodes[n].word_end),
            None => (false, false),
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.has_prefix(word).1
    }

    /// Stored words in lexicographic symbol order (a–z before digits).
    pub fn words(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.words);
        let mut stack = vec![(ROOT, String::new())];
        while let Some((node, prefix)) = stack.pop() {
            if self.nodes[node].word_end {
                out.push(prefix.clone());
            }
            for (&s, &child) in self.nodes[node].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(Alphabet.char_of(s).expect("trie holds only character symbols"));
                stack.push((child, p));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.words().into_iter().map(|w| w + "\n").collect()
    }
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word with the smallest edit distance to `query`; ties go to the
/// lexicographically smallest word.
pub fn nearest_word<S: AsRef<str>>(words: &[S], query: &str) -> Result<String> {
    words
        .iter()
        .map(|w| (levenshtein(w.as_ref(), query), w.as_ref()))
        .min()
        .map(|(_, w)| w.to_string())
        .ok_or_else(|| Error::input("lexicon is empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn hand_built_trie() {
        let t = LexiconTrie::build(&["cat", "car", "do"]).unwrap();
        assert_eq!(t.node_count(), 6);
        assert_eq!(t.word_count(), 3);
        assert_eq!(t.has_prefix("ca"), (true, false));
        assert_eq!(t.has_prefix("cat"), (true, true));
        assert_eq!(t.has_prefix(""), (true, false));
        assert_eq!(t.has_prefix("cb"), (false, false));
        assert_eq!(t.has_prefix("C"), (false, false));
        assert_eq!(t.words(), ["car", "cat", "do"]);
    }

    #[test]
    fn empty_and_duplicate_lists() {
        let t = LexiconTrie::build::<&str>(&[]).unwrap();
        assert_eq!(t.has_prefix(""), (false, false));
        assert_eq!(t.has_prefix("a"), (false, false));
        assert_eq!(LexiconTrie::build(&["a", "a"]).unwrap(), LexiconTrie::build(&["a"]).unwrap());
        assert!(LexiconTrie::build(&["ok", "n0t-ok"]).is_err());
    }

    #[test]
    fn nearest_word_examples() {
        assert_eq!(nearest_word(&["cat", "car"], "car").unwrap(), "car");
        assert_eq!(nearest_word(&["cat", "car"], "cax").unwrap(), "car");
        assert_eq!(nearest_word(&["abc"], "").unwrap(), "abc");
        assert!(nearest_word::<&str>(&[], "x").is_err());
        assert_eq!(levenshtein("kitten", "sitting"), 3);
    }

    fn small_word() -> impl Strategy<Value = String> {
        proptest::collection::vec(prop::sample::select(vec!['a', 'b', 'c', '1']), 1..5)
            .prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn trie_agrees_with_naive_scan(
            words in proptest::collection::vec(small_word(), 0..15),
            queries in proptest::collection::vec(proptest::collection::vec(prop::sample::select(vec!['a', 'b', 'c', '1']), 0..5), 20),
        ) {
            let t = LexiconTrie::build(&words).unwrap();
            let set: BTreeSet<&String> = words.iter().collect();
            for q in queries {
                let q: String = q.into_iter().collect();
                prop_assert_eq!(t.contains(&q), set.contains(&q));
                prop_assert_eq!(t.has_prefix(&q).0, words.iter().any(|w| w.starts_with(&q)));
            }
            prop_assert_eq!(t.word_count(), set.len());
        }

        #[test]
        fn levenshtein_is_a_metric(a in "[ab]{0,6}", b in "[ab]{0,6}", c in "[ab]{0,6}") {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert_eq!(levenshtein(&a, &a), 0);
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }
    }
}
