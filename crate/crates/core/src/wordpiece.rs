//! WordPiece sub-word tokenization against a BERT-style `vocab.txt`.
//!
//! Continuation pieces carry a `##` prefix. Tokenization is greedy
//! longest-match-first; a word that cannot be covered becomes `[UNK]`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const CONTINUATION_PREFIX: &str = "##";
/// Words longer than this many characters map straight to `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot read vocabulary {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary is empty")]
    Empty,
    #[error("duplicate token {token:?} on line {line} (first seen on line {first_line})")]
    Duplicate {
        token: String,
        first_line: usize,
        line: usize,
    },
    #[error("reserved token {0:?} missing from vocabulary")]
    MissingReserved(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WordPieceError {
    #[error("malformed token sequence: starts with continuation piece {0:?}")]
    LeadingContinuation(String),
}

/// Names of the reserved tokens a vocabulary must contain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: String,
    pub unk: String,
    pub bos: String,
    pub eos: String,
    pub separator: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        SpecialTokens {
            pad: "[PAD]".into(),
            unk: "[UNK]".into(),
            bos: "[BOS]".into(),
            eos: "[EOS]".into(),
            separator: "*".into(),
        }
    }
}

impl SpecialTokens {
    /// The stock BERT file has no `[BOS]`/`[EOS]`; `[CLS]`/`[SEP]` stand in.
    pub fn bert() -> Self {
        SpecialTokens {
            bos: "[CLS]".into(),
            eos: "[SEP]".into(),
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub bos: u32,
    pub eos: u32,
    pub separator: u32,
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    special_names: SpecialTokens,
    special: SpecialIds,
}

impl Vocabulary {
    /// Loads a vocabulary with the default reserved tokens.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        Self::load_with(path, SpecialTokens::default())
    }

    pub fn load_with(path: impl AsRef<Path>, special: SpecialTokens) -> Result<Self, VocabError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, special)
    }

    /// One token per line; the line number (from 0) is the id.
    pub fn parse(text: &str, special: SpecialTokens) -> Result<Self, VocabError> {
        let tokens = text
            .lines()
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
            .collect();
        Self::from_tokens(tokens, special)
    }

    pub fn from_tokens(tokens: Vec<String>, special: SpecialTokens) -> Result<Self, VocabError> {
        if tokens.is_empty() {
            return Err(VocabError::Empty);
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if let Some(&first) = ids.get(tok) {
                return Err(VocabError::Duplicate {
                    token: tok.clone(),
                    first_line: first as usize + 1,
                    line: i + 1,
                });
            }
            ids.insert(tok.clone(), i as u32);
        }
        let find = |name: &String| {
            ids.get(name)
                .copied()
                .ok_or_else(|| VocabError::MissingReserved(name.clone()))
        };
        let special_ids = SpecialIds {
            pad: find(&special.pad)?,
            unk: find(&special.unk)?,
            bos: find(&special.bos)?,
            eos: find(&special.eos)?,
            separator: find(&special.separator)?,
        };
        Ok(Vocabulary {
            tokens,
            ids,
            special_names: special,
            special: special_ids,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn special_tokens(&self) -> &SpecialTokens {
        &self.special_names
    }

    pub fn is_control(&self, id: u32) -> bool {
        let s = self.special;
        id == s.pad || id == s.bos || id == s.eos
    }

    /// Visible ASCII characters (after optional lowercasing) that have no
    /// single-character token. Empty means every word over that alphabet
    /// can be tokenized without `[UNK]`.
    pub fn missing_visible_ascii(&self, lowercase: bool) -> Vec<char> {
        let mut missing: Vec<char> = ('!'..='~')
            .map(|c| if lowercase { c.to_ascii_lowercase() } else { c })
            .filter(|c| !self.contains(&c.to_string()))
            .collect();
        missing.dedup();
        missing
    }

    /// Greedy longest-match-first segmentation of a single word.
    pub fn tokenize(&self, word: &str) -> TokenSequence {
        let mut out = TokenSequence::default();
        self.tokenize_into(word, &mut out);
        out
    }

    /// Tokenizes each whitespace-separated word of `text`.
    pub fn tokenize_text(&self, text: &str) -> TokenSequence {
        let mut out = TokenSequence::default();
        for word in text.split_whitespace() {
            self.tokenize_into(word, &mut out);
        }
        out
    }

    pub fn tokenize_into(&self, word: &str, out: &mut TokenSequence) {
        if word.is_empty() {
            return;
        }
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.special_names.unk.clone(), self.special.unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut candidate = String::new();
        while start < chars.len() {
            let from = chars[start].0;
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let to = chars.get(end).map_or(word.len(), |c| c.0);
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION_PREFIX);
                }
                candidate.push_str(&word[from..to]);
                if let Some(id) = self.id(&candidate) {
                    found = Some((candidate.clone(), id));
                    break;
                }
                end -= 1;
            }
            match found {
                Some(piece) => {
                    pieces.push(piece);
                    start = end;
                }
                None => {
                    out.push(self.special_names.unk.clone(), self.special.unk);
                    return;
                }
            }
        }
        for (tok, id) in pieces {
            out.push(tok, id);
        }
    }

    /// Rebuilds a sequence from ids; unknown ids become `[UNK]`.
    pub fn sequence_from_ids(&self, ids: &[u32]) -> TokenSequence {
        let mut out = TokenSequence::default();
        for &id in ids {
            match self.token(id) {
                Some(t) => out.push(t.to_string(), id),
                None => out.push(self.special_names.unk.clone(), self.special.unk),
            }
        }
        out
    }
}

/// Parallel lists of piece strings and their vocabulary ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn push(&mut self, token: String, id: u32) {
        self.tokens.push(token);
        self.ids.push(id);
    }

    pub fn extend(&mut self, other: TokenSequence) {
        self.tokens.extend(other.tokens);
        self.ids.extend(other.ids);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn is_continuation(token: &str) -> bool {
    token.starts_with(CONTINUATION_PREFIX) && token.len() > CONTINUATION_PREFIX.len()
}

/// Merges `##` continuations onto the preceding piece and joins words with
/// single spaces.
pub fn detokenize(tokens: &[String]) -> Result<String, WordPieceError> {
    let mut out = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        if is_continuation(tok) {
            if i == 0 {
                return Err(WordPieceError::LeadingContinuation(tok.clone()));
            }
            out.push_str(&tok[CONTINUATION_PREFIX.len()..]);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
    }
    Ok(out)
}
