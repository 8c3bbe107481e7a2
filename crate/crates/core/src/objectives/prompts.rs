//! Noun prompts for the multi-label loss and for class embeddings.
//!
//! Templates file: one template per line, each containing `{noun}`.
//! Lexicon file: one noun per line. Blank lines are skipped in both.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoders::tokenizer::normalize_words;
use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{noun}";

pub const DEFAULT_TEMPLATES: [&str; 8] = [
    "a photo of a {noun}.",
    "a photo of the {noun}.",
    "a picture of a {noun}.",
    "an image of a {noun}.",
    "a rendering of a {noun}.",
    "a drawing of a {noun}.",
    "there is a {noun} in the scene.",
    "a close photo of a {noun}.",
];

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub templates: Vec<String>,
    pub lexicon: BTreeSet<String>,
    pub k: usize,
}

impl PromptSet {
    pub fn new<S: AsRef<str>>(templates: &[S], lexicon: &[S], k: usize) -> Result<Self> {
        let set = PromptSet {
            templates: templates.iter().map(|t| t.as_ref().to_string()).collect(),
            lexicon: lexicon.iter().map(|n| n.as_ref().to_lowercase()).collect(),
            k,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("loss.k must be at least 1".into()));
        }
        if self.templates.is_empty() {
            return Err(Error::Config("prompt template list is empty".into()));
        }
        if let Some(t) = self.templates.iter().find(|t| !t.contains(PLACEHOLDER)) {
            return Err(Error::Config(format!("template {t:?} lacks {PLACEHOLDER}")));
        }
        Ok(())
    }

    pub fn load(templates: &Path, lexicon: &Path, k: usize) -> Result<Self> {
        let read = |p: &Path| -> Result<Vec<String>> {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
        };
        Self::new(&read(templates)?, &read(lexicon)?, k)
    }

    pub fn fill(template: &str, noun: &str) -> String {
        template.replace(PLACEHOLDER, noun)
    }

    /// Distinct lexicon nouns of `caption`, in order of first appearance.
    pub fn nouns(&self, caption: &str) -> Vec<String> {
        let mut seen = BTreeSet::new();
        normalize_words(caption)
            .into_iter()
            .filter(|w| self.lexicon.contains(w) && seen.insert(w.clone()))
            .collect()
    }
}

/// `k` prompts for `caption`: each distinct noun is used at most once while
/// nouns remain, then nouns repeat; each prompt gets a uniformly drawn
/// template. A caption without nouns is repeated `k` times as is.
pub fn generate_prompts(caption: &str, set: &PromptSet, rng: &mut impl Rng) -> Vec<String> {
    let mut nouns = set.nouns(caption);
    if nouns.is_empty() {
        return vec![caption.to_string(); set.k];
    }
    nouns.shuffle(rng);
    let mut picked: Vec<&String> = nouns.iter().take(set.k).collect();
    while picked.len() < set.k {
        picked.push(&nouns[rng.gen_range(0..nouns.len())]);
    }
    picked
        .into_iter()
        .map(|n| {
            let t = &set.templates[rng.gen_range(0..set.templates.len())];
            PromptSet::fill(t, n)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn template_fill() {
        assert_eq!(PromptSet::fill("A photo of a {noun}", "dog"), "A photo of a dog");
    }

    #[test]
    fn zero_noun_caption_falls_back() {
        let set = PromptSet::new(&DEFAULT_TEMPLATES, &["circle"], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(generate_prompts("a blue sky", &set, &mut rng), vec!["a blue sky"; 3]);
    }

    #[test]
    fn rejects_bad_sets() {
        assert!(PromptSet::new(&["no placeholder"], &["x"], 1).is_err());
        assert!(PromptSet::new(&DEFAULT_TEMPLATES, &["x"], 0).is_err());
    }
}
