//! Word-level tokenizer.
//!
//! Vocabulary file: UTF-8, one token per line, line number (from 0) is the
//! id. Lines 0, 1, 2 must be `<pad>`, `<unk>`, `<eos>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const EOS_ID: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercased alphanumeric runs of `text`.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

impl Vocab {
    /// Reserved tokens followed by `words` in order, duplicates dropped.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in [PAD, UNK, EOS] {
            v.push(w);
        }
        for w in words {
            for n in normalize_words(w.as_ref()) {
                v.push(&n);
            }
        }
        v
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.tokens.len());
            self.tokens.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let fmt = |msg: String| Error::Format {
            kind: "vocabulary",
            path: path.to_path_buf(),
            msg,
        };
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 3 || lines[..3] != [PAD, UNK, EOS] {
            return Err(fmt(format!("first lines must be {PAD}, {UNK}, {EOS}")));
        }
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, l) in lines.iter().enumerate() {
            if l.is_empty() || v.index.contains_key(*l) {
                return Err(fmt(format!("line {}: empty or duplicate token {l:?}", i + 1)));
            }
            v.push(l);
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Word ids, truncated so the end-of-sequence token fits, then `<eos>`,
    /// then padding up to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenizedText {
        assert!(max_len >= 1, "max_len must leave room for <eos>");
        let mut ids: Vec<usize> = normalize_words(text)
            .iter()
            .take(max_len - 1)
            .map(|w| self.id(w))
            .collect();
        let end_position = ids.len();
        ids.push(EOS_ID);
        ids.resize(max_len, PAD_ID);
        TokenizedText { ids, end_position }
    }

    /// Words before the first `<eos>`, joined by single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS_ID)
            .filter(|&&i| i != PAD_ID)
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    /// Index of the `<eos>` token.
    pub end_position: usize,
}

impl TokenizedText {
    /// Number of tokens up to and including `<eos>`.
    pub fn len(&self) -> usize {
        self.end_position + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_just_eos() {
        let v = Vocab::new(&["red circle"]);
        let t = v.tokenize("", 4);
        assert_eq!(t.ids, vec![EOS_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(t.end_position, 0);
    }

    #[test]
    fn three_words_then_eos() {
        let v = Vocab::new(&["a", "red", "circle"]);
        let t = v.tokenize("A red circle", 6);
        assert_eq!(t.ids, vec![3, 4, 5, EOS_ID, PAD_ID, PAD_ID]);
        assert_eq!(t.end_position, 3);
        assert_eq!(v.tokenize("a red CIRCLE!!", 6), t);
    }

    #[test]
    fn unknown_words_and_truncation() {
        let v = Vocab::new(&["a"]);
        let t = v.tokenize("a zebra a a a", 3);
        assert_eq!(t.ids, vec![3, UNK_ID, EOS_ID]);
        assert_eq!(t.end_position, 2);
    }

    #[test]
    fn file_round_trip_and_rejects() {
        let v = Vocab::new(&["a photo of", "red"]);
        let p = Path::new("vocab.txt");
        assert_eq!(Vocab::parse(&v.to_file_string(), p).unwrap(), v);
        assert!(Vocab::parse("a\nb\nc\n", p).is_err());
        assert!(Vocab::parse("<pad>\n<unk>\n<eos>\nx\nx\n", p).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_tokenize(words in proptest::collection::vec(0usize..6, 0..8)) {
            let lexicon = ["a", "photo", "of", "red", "circle", "and"];
            let v = Vocab::new(&lexicon);
            let text: Vec<&str> = words.iter().map(|&i| lexicon[i]).collect();
            let text = text.join(" ");
            let t = v.tokenize(&text, 10);
            prop_assert_eq!(v.decode(&t.ids), text);
        }
    }
}
