//! Vocabulary, gazetteer and stop-word list shipped with the crate.

use crate::preprocess::{GazetteerTagger, PreprocessError, StopWords};
use crate::wordpiece::{SpecialTokens, VocabError, Vocabulary};

pub const VOCAB: &str = include_str!("../data/vocab.txt");
pub const GAZETTEER: &str = include_str!("../data/gazetteer.tsv");
pub const STOPWORDS: &str = include_str!("../data/stopwords.txt");

pub fn vocabulary() -> Result<Vocabulary, VocabError> {
    Vocabulary::parse(VOCAB, SpecialTokens::default())
}

pub fn gazetteer() -> Result<GazetteerTagger, PreprocessError> {
    GazetteerTagger::parse(GAZETTEER)
}

pub fn stopwords() -> StopWords {
    StopWords::parse(STOPWORDS)
}
