//! Word-level tokenizer over a corpus-built vocabulary.

use std::collections::{BTreeSet, HashMap};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
const RESERVED: u32 = 4;

/// Lowercases, strips punctuation and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    vocab: HashMap<String, u32>,
    words: Vec<String>,
    vocab_size: usize,
    max_len: usize,
}

impl Tokenizer {
    /// Builds the vocabulary from the sorted unique words of `corpus`. Words
    /// that do not fit in `vocab_size` map to [`UNK`].
    pub fn from_corpus<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        vocab_size: usize,
        max_len: usize,
    ) -> Self {
        let unique: BTreeSet<String> = corpus.into_iter().flat_map(normalize_words).collect();
        let capacity = vocab_size.saturating_sub(RESERVED as usize);
        let words: Vec<String> = unique.into_iter().take(capacity).collect();
        let vocab = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32 + RESERVED))
            .collect();
        Self {
            vocab,
            words,
            vocab_size,
            max_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn id(&self, word: &str) -> u32 {
        self.vocab.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        match id {
            PAD => Some("<pad>"),
            UNK => Some("<unk>"),
            BOS => Some("<bos>"),
            EOS => Some("<eos>"),
            _ => self.words.get((id - RESERVED) as usize).map(String::as_str),
        }
    }

    /// Word ids without BOS/EOS framing.
    pub fn ids(&self, text: &str) -> Vec<u32> {
        normalize_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// `[BOS, words.., EOS]`, truncated to `max_len` with EOS kept last.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.max_len);
        out.push(BOS);
        out.extend(self.ids(text).into_iter().take(self.max_len.saturating_sub(2)));
        out.push(EOS);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::from_corpus(["A photo of surprise.", "photo of anger"], 1024, 77)
    }

    #[test]
    fn empty_text_is_framed() {
        assert_eq!(tok().tokenize(""), vec![BOS, EOS]);
    }

    #[test]
    fn direct_lookup() {
        let t = tok();
        let ids = t.tokenize("a photo of surprise");
        let expected = vec![BOS, t.id("a"), t.id("photo"), t.id("of"), t.id("surprise"), EOS];
        assert_eq!(ids, expected);
        assert!(ids[1..5].iter().all(|&i| i >= RESERVED));
        assert_eq!(t.word(t.id("anger")), Some("anger"));
    }

    #[test]
    fn punctuation_and_case_are_normalized() {
        let t = tok();
        assert_eq!(t.tokenize("SURPRISE!!"), t.tokenize("surprise"));
        assert_eq!(t.ids("joy"), vec![UNK]);
    }

    #[test]
    fn long_text_is_truncated_with_eos_last() {
        let t = tok();
        let text = vec!["photo"; 100].join(" ");
        let ids = t.tokenize(&text);
        assert_eq!(ids.len(), 77);
        assert_eq!(*ids.last().unwrap(), EOS);
    }

    #[test]
    fn small_vocab_overflows_to_unk() {
        let t = Tokenizer::from_corpus(["b a c"], 6, 10);
        assert_eq!(t.ids("a b c"), vec![4, 5, UNK]);
    }
}
