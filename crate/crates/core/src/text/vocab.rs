use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNKNOWN: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Word-level vocabulary with dense ids; ids 0..4 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercased alphanumeric runs.
pub fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Vocabulary {
    /// Every word seen at least once, sorted, after the special tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).chain(set)).expect("specials first")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::InvalidArgument("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNKNOWN)
    }

    /// Space-joined words for content ids; special ids are skipped except
    /// `<unk>`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != START && i != END)
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercase, split on non-alphanumerics, map through the vocabulary,
/// truncate to `max_len - 1` and append the end id.
pub fn tokenize(s: &str, v: &Vocabulary, max_len: usize) -> Vec<usize> {
    let keep = max_len.saturating_sub(1);
    let mut ids: Vec<usize> = words(s).iter().take(keep).map(|w| v.id(w)).collect();
    ids.push(END);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_string_is_end_only() {
        let v = Vocabulary::build(["a cat"]);
        assert_eq!(tokenize("", &v, 8), vec![END]);
    }

    #[test]
    fn case_folding() {
        let v = Vocabulary::build(["cat"]);
        let ids = tokenize("Cat cat CAT", &v, 8);
        assert_eq!(ids.len(), 4);
        assert!(ids[0] == ids[1] && ids[1] == ids[2] && ids[0] != UNKNOWN);
        assert_eq!(ids[3], END);
    }

    #[test]
    fn unknown_and_truncation() {
        let v = Vocabulary::build(["one two"]);
        assert_eq!(tokenize("three", &v, 8), vec![UNKNOWN, END]);
        let ids = tokenize("one two one two one", &v, 3);
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[2], END);
    }

    #[test]
    fn specials_are_distinct_and_dense() {
        let v = Vocabulary::build(["b a", "c"]);
        assert_eq!(v.tokens()[..4], SPECIALS);
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), 4);
        let again = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(again, v);
        assert!(Vocabulary::from_tokens(vec!["x".to_string()]).is_err());
    }

    proptest! {
        #[test]
        fn tokenize_stable_through_detokenize(
            picks in proptest::collection::vec(0usize..6, 0..20),
            max_len in 1usize..12,
        ) {
            let lexicon = ["red", "circle", "has", "four", "Legs", "handle"];
            let v = Vocabulary::build(lexicon);
            let s = picks.iter().map(|&i| lexicon[i]).collect::<Vec<_>>().join(" ");
            let ids = tokenize(&s, &v, max_len);
            let again = tokenize(&v.detokenize(&ids), &v, max_len);
            prop_assert_eq!(ids, again);
        }
    }
}
