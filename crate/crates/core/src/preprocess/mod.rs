//! Text normalization: entity tagging, indexed tag replacement,
//! lowercasing, stop-word removal, and model-input assembly.

mod entities;
mod tagging;
mod text;

use std::path::PathBuf;

use thiserror::Error;

use crate::wordpiece::{detokenize, TokenSequence, Vocabulary, WordPieceError};

pub use entities::{tag_entities, validate_spans, EntitySpan, EntityTag, EntityTagger, GazetteerTagger};
pub use tagging::{replace_with_indexed_tags, replace_with_map, tag_with_map, EntityMap, TaggedPassage};
pub use text::{is_punctuation, is_tag_token, normalize, remove_stopwords, split_words, StopWords};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gazetteer line {line}: {message}")]
    Gazetteer { line: usize, message: String },
    #[error("unknown entity tag {0:?}")]
    UnknownTag(String),
    #[error("text is empty")]
    EmptyText,
    #[error("span {start}..{end} is not valid for text of length {len}")]
    InvalidSpan { start: usize, end: usize, len: usize },
    #[error("spans {first:?} and {second:?} overlap")]
    OverlappingSpans { first: String, second: String },
    #[error("tagger failed: {0}")]
    Tagger(String),
    #[error("entity tag {0:?} has no vocabulary entry")]
    MissingTagToken(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PreprocessError>,
    },
}

impl PreprocessError {
    fn at(stage: &'static str) -> impl FnOnce(PreprocessError) -> PreprocessError {
        move |e| PreprocessError::Stage {
            stage,
            source: Box::new(e),
        }
    }
}

/// Output of [`Preprocessor::preprocess_pair`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreprocessedPair {
    /// `pieces(answer) ⧺ [*] ⧺ pieces(passage)`.
    pub input: TokenSequence,
    /// Number of leading input tokens that belong to the answer.
    pub answer_len: usize,
    /// The tagged passage; its entity map also holds any surfaces first
    /// seen in the answer.
    pub passage: TaggedPassage,
}

/// Immutable bundle of tagger, stop list, and vocabulary. Safe to share
/// across threads.
pub struct Preprocessor<'a> {
    pub tagger: &'a dyn EntityTagger,
    pub stopwords: &'a StopWords,
    pub vocab: &'a Vocabulary,
}

impl<'a> Preprocessor<'a> {
    pub fn new(tagger: &'a dyn EntityTagger, stopwords: &'a StopWords, vocab: &'a Vocabulary) -> Self {
        Preprocessor {
            tagger,
            stopwords,
            vocab,
        }
    }

    /// Tags the raw passage first, then the answer against the passage's
    /// entity map, strips stop words from both, and joins the WordPiece
    /// sequences around the separator. A literal separator in either text
    /// is dropped so the output holds exactly one.
    pub fn preprocess_pair(&self, answer: &str, passage: &str) -> Result<PreprocessedPair, PreprocessError> {
        if answer.trim().is_empty() {
            return Err(PreprocessError::at("answer")(PreprocessError::EmptyText));
        }
        let spans = tag_entities(passage, self.tagger).map_err(PreprocessError::at("tag passage"))?;
        let mut tagged = replace_with_indexed_tags(passage, &spans).map_err(PreprocessError::at("replace passage"))?;
        let answer_spans =
            tag_with_map(answer, self.tagger, &tagged.entity_map).map_err(PreprocessError::at("tag answer"))?;
        let answer_words = replace_with_map(answer, &answer_spans, &mut tagged.entity_map)
            .map_err(PreprocessError::at("replace answer"))?;

        let sep = self.vocab.special_tokens().separator.clone();
        let keep = |words: &[String]| -> Vec<String> {
            remove_stopwords(words, self.stopwords)
                .into_iter()
                .filter(|w| *w != sep)
                .collect()
        };
        let mut input = self
            .pieces(&keep(&answer_words))
            .map_err(PreprocessError::at("wordpiece answer"))?;
        let answer_len = input.len();
        input.push(sep.clone(), self.vocab.special().separator);
        input.extend(
            self.pieces(&keep(&tagged.words))
                .map_err(PreprocessError::at("wordpiece passage"))?,
        );
        Ok(PreprocessedPair {
            input,
            answer_len,
            passage: tagged,
        })
    }

    /// Lowercases and tags a question against `map` (extending it with new
    /// surfaces) and tokenizes it. Stop words are kept.
    pub fn preprocess_question(&self, question: &str, map: &mut EntityMap) -> Result<TokenSequence, PreprocessError> {
        if question.trim().is_empty() {
            return Err(PreprocessError::at("question")(PreprocessError::EmptyText));
        }
        let spans = tag_with_map(question, self.tagger, map).map_err(PreprocessError::at("tag question"))?;
        let words = replace_with_map(question, &spans, map).map_err(PreprocessError::at("replace question"))?;
        self.pieces(&words).map_err(PreprocessError::at("wordpiece question"))
    }

    /// WordPiece over already-split words; entity labels map straight to
    /// their reserved vocabulary entries.
    pub fn pieces(&self, words: &[String]) -> Result<TokenSequence, PreprocessError> {
        let mut out = TokenSequence::default();
        for w in words {
            if EntityTag::from_label(w).is_some() {
                let id = self
                    .vocab
                    .id(w)
                    .ok_or_else(|| PreprocessError::MissingTagToken(w.clone()))?;
                out.push(w.clone(), id);
            } else {
                self.vocab.tokenize_into(w, &mut out);
            }
        }
        Ok(out)
    }
}

/// Detokenizes a generated sequence: drops `[PAD]`/`[BOS]`/`[EOS]`, merges
/// `##` continuations, attaches `?` to the preceding word, and collapses
/// whitespace. A stray leading continuation is kept without its prefix.
pub fn postprocess_question(t: &TokenSequence, vocab: &Vocabulary) -> String {
    let names = vocab.special_tokens();
    let mut tokens: Vec<String> = t
        .tokens
        .iter()
        .zip(&t.ids)
        .filter(|(tok, &id)| !vocab.is_control(id) && **tok != names.pad && **tok != names.bos && **tok != names.eos)
        .map(|(tok, _)| tok.clone())
        .collect();
    let text = match detokenize(&tokens) {
        Ok(s) => s,
        Err(WordPieceError::LeadingContinuation(_)) => {
            tokens[0] = tokens[0].trim_start_matches('#').to_string();
            detokenize(&tokens).unwrap_or_default()
        }
    };
    let joined = text.split_whitespace().collect::<Vec<_>>().join(" ");
    joined.replace(" ?", "?")
}
