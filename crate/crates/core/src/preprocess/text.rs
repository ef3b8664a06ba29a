//! Character-level normalization and word splitting.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;

use super::entities::EntityTag;
use super::PreprocessError;

/// Lowercases and strips combining accents (`é` → `e`).
pub fn normalize(text: &str) -> String {
    text.to_lowercase()
        .nfd()
        .filter(|c| get_general_category(*c) != GeneralCategory::NonspacingMark)
        .collect()
}

pub fn is_punctuation(c: char) -> bool {
    if c.is_ascii() {
        return c.is_ascii_punctuation();
    }
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        ConnectorPunctuation
            | DashPunctuation
            | OpenPunctuation
            | ClosePunctuation
            | InitialPunctuation
            | FinalPunctuation
            | OtherPunctuation
    )
}

/// Splits on whitespace and makes every punctuation character its own word.
/// Control characters are dropped.
pub fn split_words(text: &str, out: &mut Vec<String>) {
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut current, out);
        } else if is_punctuation(c) {
            flush(&mut current, out);
            out.push(c.to_string());
        } else if !c.is_control() {
            current.push(c);
        }
    }
    flush(&mut current, out);
}

fn flush(current: &mut String, out: &mut Vec<String>) {
    if !current.is_empty() {
        out.push(std::mem::take(current));
    }
}

/// An entity label or the digit index that follows one.
pub fn is_tag_token(word: &str) -> bool {
    EntityTag::from_label(word).is_some() || (!word.is_empty() && word.bytes().all(|b| b.is_ascii_digit()))
}

#[derive(Clone, Debug, Default)]
pub struct StopWords {
    words: HashSet<String>,
}

impl StopWords {
    /// One word per line; blank lines and `#` comments are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PreprocessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PreprocessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::parse(&text))
    }

    /// One word per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        Self::from_words(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        StopWords {
            words: words.into_iter().map(|w| normalize(w.as_ref())).collect(),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Drops stop words, keeping survivor order. Entity labels and their
/// indices are never removed.
pub fn remove_stopwords(tokens: &[String], stoplist: &StopWords) -> Vec<String> {
    tokens
        .iter()
        .filter(|t| is_tag_token(t) || !stoplist.contains(t))
        .cloned()
        .collect()
}
