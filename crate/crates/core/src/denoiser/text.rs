//! Closed word-level vocabulary for prompts.

use crate::error::{Error, Result};

/// The subject placeholder token; its embedding is supplied per block by the customization.
pub const PLACEHOLDER: &str = "<subject>";

/// Names of the sprite family the base model is pretrained on.
pub const FAMILY_WORDS: [&str; 8] = ["cat", "dog", "fox", "owl", "frog", "bear", "bird", "fish"];

const WORDS: &[&str] = &[
    PLACEHOLDER,
    "a",
    "an",
    "the",
    "and",
    "on",
    "in",
    "at",
    "with",
    "of",
    "character",
    "subject",
    "cat",
    "dog",
    "fox",
    "owl",
    "frog",
    "bear",
    "bird",
    "fish",
    "kitty",
    "walks",
    "moves",
    "runs",
    "bounces",
    "stands",
    "still",
    "left",
    "right",
    "up",
    "down",
    "slowly",
    "quickly",
    "solid",
    "gradient",
    "checker",
    "background",
    "scene",
    "red",
    "green",
    "blue",
    "yellow",
    "purple",
    "orange",
    "gray",
    "white",
    "black",
    "pink",
    "brown",
    "beach",
    "forest",
    "city",
    "day",
    "night",
];

/// Word-level tokenizer over the fixed vocabulary.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Vocab {
    pub fn builtin() -> Self {
        Self { words: WORDS.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| *w == word)
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }

    pub fn placeholder_id(&self) -> usize {
        0
    }

    /// Lower-cases, splits on whitespace and strips surrounding punctuation
    /// (the placeholder's angle brackets are kept).
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for raw in prompt.split_whitespace() {
            let lower = raw.to_lowercase();
            let word = if lower.contains(PLACEHOLDER) {
                PLACEHOLDER
            } else {
                lower.trim_matches(|c: char| !c.is_alphanumeric())
            };
            if word.is_empty() {
                continue;
            }
            ids.push(self.id(word).ok_or_else(|| Error::UnknownToken(word.to_string()))?);
        }
        if ids.is_empty() {
            return Err(Error::invalid("prompt contains no tokens"));
        }
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_with_placeholder_and_punctuation() {
        let v = Vocab::builtin();
        let ids = v.tokenize("A <subject> walks right, quickly.").unwrap();
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[1], v.placeholder_id());
        assert_eq!(v.word(ids[4]), Some("quickly"));
    }

    #[test]
    fn unknown_word_is_named() {
        let err = Vocab::builtin().tokenize("a spaceship").unwrap_err();
        assert!(err.to_string().contains("spaceship"));
    }

    #[test]
    fn family_words_are_in_vocab() {
        let v = Vocab::builtin();
        assert!(FAMILY_WORDS.iter().all(|w| v.id(w).is_some()));
    }
}
