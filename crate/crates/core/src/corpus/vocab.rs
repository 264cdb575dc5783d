use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{CorpusError, PageSample, Result};

/// Catch-all class for characters outside the vocabulary.
pub const OTHER_TOKEN: &str = "OTHER";

/// Ordered class tokens; index 0 is always [`OTHER_TOKEN`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CharacterVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl CharacterVocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(OTHER_TOKEN) {
            return Err(CorpusError::Vocabulary(format!("index 0 must be {OTHER_TOKEN}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Keeps the `max_classes − 1` most frequent tokens of the labelled
    /// pages (ties broken lexicographically) behind [`OTHER_TOKEN`].
    pub fn build(samples: &[PageSample], max_classes: usize) -> Result<Self> {
        if max_classes < 2 {
            return Err(CorpusError::Vocabulary(format!(
                "max_classes must be at least 2, got {max_classes}"
            )));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for b in samples.iter().filter(|s| !s.is_excluded()).flat_map(|s| &s.boxes) {
            *counts.entry(b.codepoint.as_str()).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(CorpusError::NoLabels);
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = std::iter::once(OTHER_TOKEN.to_string())
            .chain(
                ranked
                    .into_iter()
                    .filter(|(t, _)| *t != OTHER_TOKEN)
                    .take(max_classes - 1)
                    .map(|(t, _)| t.to_string()),
            )
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Class index of a token; unknown tokens map to 0 (`OTHER`).
    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// The token as the model can express it: itself if known, else `OTHER`.
    pub fn canonical<'a>(&'a self, token: &'a str) -> &'a str {
        if self.index.contains_key(token) {
            token
        } else {
            OTHER_TOKEN
        }
    }
}

impl TryFrom<Vec<String>> for CharacterVocabulary {
    type Error = CorpusError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<CharacterVocabulary> for Vec<String> {
    fn from(v: CharacterVocabulary) -> Self {
        v.tokens
    }
}
