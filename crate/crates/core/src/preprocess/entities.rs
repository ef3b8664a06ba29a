//! Named-entity labels, spans, and the gazetteer tagger.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PreprocessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum EntityTag {
    Person,
    Norp,
    Fac,
    Org,
    Gpe,
    Loc,
    Product,
    Event,
    WorkOfArt,
    Law,
    Language,
    Date,
    Time,
    Percent,
    Money,
    Quantity,
    Ordinal,
    Cardinal,
}

impl EntityTag {
    pub const ALL: [EntityTag; 18] = [
        EntityTag::Person,
        EntityTag::Norp,
        EntityTag::Fac,
        EntityTag::Org,
        EntityTag::Gpe,
        EntityTag::Loc,
        EntityTag::Product,
        EntityTag::Event,
        EntityTag::WorkOfArt,
        EntityTag::Law,
        EntityTag::Language,
        EntityTag::Date,
        EntityTag::Time,
        EntityTag::Percent,
        EntityTag::Money,
        EntityTag::Quantity,
        EntityTag::Ordinal,
        EntityTag::Cardinal,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EntityTag::Person => "PERSON",
            EntityTag::Norp => "NORP",
            EntityTag::Fac => "FAC",
            EntityTag::Org => "ORG",
            EntityTag::Gpe => "GPE",
            EntityTag::Loc => "LOC",
            EntityTag::Product => "PRODUCT",
            EntityTag::Event => "EVENT",
            EntityTag::WorkOfArt => "WORK_OF_ART",
            EntityTag::Law => "LAW",
            EntityTag::Language => "LANGUAGE",
            EntityTag::Date => "DATE",
            EntityTag::Time => "TIME",
            EntityTag::Percent => "PERCENT",
            EntityTag::Money => "MONEY",
            EntityTag::Quantity => "QUANTITY",
            EntityTag::Ordinal => "ORDINAL",
            EntityTag::Cardinal => "CARDINAL",
        }
    }

    pub fn from_label(label: &str) -> Option<EntityTag> {
        EntityTag::ALL.into_iter().find(|t| t.label() == label)
    }
}

impl fmt::Display for EntityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EntityTag {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityTag::from_label(s).ok_or_else(|| PreprocessError::UnknownTag(s.to_string()))
    }
}

impl From<EntityTag> for String {
    fn from(t: EntityTag) -> String {
        t.label().to_string()
    }
}

impl TryFrom<String> for EntityTag {
    type Error = PreprocessError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// A tagged byte range `[start, end)` of the raw text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub tag: EntityTag,
    pub surface: String,
}

impl EntitySpan {
    pub fn new(text: &str, start: usize, end: usize, tag: EntityTag) -> Self {
        EntitySpan {
            start,
            end,
            tag,
            surface: text[start..end].to_string(),
        }
    }
}

pub trait EntityTagger: Send + Sync {
    fn tag(&self, text: &str) -> Result<Vec<EntitySpan>, PreprocessError>;
}

/// Checks span invariants and returns the spans sorted by start offset.
pub fn validate_spans(text: &str, mut spans: Vec<EntitySpan>) -> Result<Vec<EntitySpan>, PreprocessError> {
    spans.sort_by_key(|s| (s.start, s.end));
    let mut last_end = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.start >= s.end
            || s.end > text.len()
            || !text.is_char_boundary(s.start)
            || !text.is_char_boundary(s.end)
            || text[s.start..s.end] != s.surface
        {
            return Err(PreprocessError::InvalidSpan {
                start: s.start,
                end: s.end,
                len: text.len(),
            });
        }
        if i > 0 && s.start < last_end {
            return Err(PreprocessError::OverlappingSpans {
                first: spans[i - 1].surface.clone(),
                second: s.surface.clone(),
            });
        }
        last_end = s.end;
    }
    Ok(spans)
}

pub fn tag_entities(text: &str, tagger: &dyn EntityTagger) -> Result<Vec<EntitySpan>, PreprocessError> {
    if text.trim().is_empty() {
        return Err(PreprocessError::EmptyText);
    }
    validate_spans(text, tagger.tag(text)?)
}

fn starts_word(text: &str, at: usize) -> bool {
    let prev = text[..at].chars().next_back();
    let cur = text[at..].chars().next();
    match (prev, cur) {
        (None, _) => true,
        (Some(p), Some(c)) => !(p.is_alphanumeric() && c.is_alphanumeric()),
        (Some(_), None) => false,
    }
}

fn ends_word(text: &str, at: usize) -> bool {
    let prev = text[..at].chars().next_back();
    let next = text[at..].chars().next();
    match (prev, next) {
        (_, None) => true,
        (Some(p), Some(n)) => !(p.is_alphanumeric() && n.is_alphanumeric()),
        (None, Some(_)) => false,
    }
}

/// Leftmost-longest matching against `haystack` at word
/// boundaries. `lookup` maps a candidate substring to its tag.
pub(crate) fn scan_longest<F>(haystack: &str, max_len: usize, lookup: F) -> Vec<(usize, usize, EntityTag)>
where
    F: Fn(&str) -> Option<EntityTag>,
{
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < haystack.len() {
        let c = haystack[pos..].chars().next().expect("in bounds");
        if c.is_whitespace() || !starts_word(haystack, pos) {
            pos += c.len_utf8();
            continue;
        }
        let mut limit = (pos + max_len).min(haystack.len());
        while !haystack.is_char_boundary(limit) {
            limit -= 1;
        }
        let mut ends: Vec<usize> = haystack[pos..limit]
            .char_indices()
            .map(|(i, ch)| pos + i + ch.len_utf8())
            .filter(|&e| ends_word(haystack, e))
            .collect();
        ends.reverse();
        match ends.into_iter().find_map(|e| lookup(&haystack[pos..e]).map(|t| (e, t))) {
            Some((end, tag)) => {
                out.push((pos, end, tag));
                pos = end;
            }
            None => pos += c.len_utf8(),
        }
    }
    out
}

/// Case-sensitive surface-form lookup table read from `surface<TAB>TAG` lines.
#[derive(Clone, Debug, Default)]
pub struct GazetteerTagger {
    entries: HashMap<String, EntityTag>,
    max_len: usize,
}

impl GazetteerTagger {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PreprocessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PreprocessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, PreprocessError> {
        let mut tagger = GazetteerTagger::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (surface, tag) = line.split_once('\t').ok_or_else(|| PreprocessError::Gazetteer {
                line: i + 1,
                message: "expected surface<TAB>TAG".into(),
            })?;
            let tag = EntityTag::from_label(tag.trim()).ok_or_else(|| PreprocessError::Gazetteer {
                line: i + 1,
                message: format!("unknown tag {:?}", tag.trim()),
            })?;
            if surface.trim().is_empty() {
                return Err(PreprocessError::Gazetteer {
                    line: i + 1,
                    message: "empty surface form".into(),
                });
            }
            tagger.insert(surface.trim(), tag);
        }
        Ok(tagger)
    }

    pub fn from_entries<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, EntityTag)>,
        S: AsRef<str>,
    {
        let mut tagger = GazetteerTagger::default();
        for (s, t) in entries {
            tagger.insert(s.as_ref(), t);
        }
        tagger
    }

    pub fn insert(&mut self, surface: &str, tag: EntityTag) {
        self.max_len = self.max_len.max(surface.len());
        self.entries.insert(surface.to_string(), tag);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl EntityTagger for GazetteerTagger {
    fn tag(&self, text: &str) -> Result<Vec<EntitySpan>, PreprocessError> {
        Ok(scan_longest(text, self.max_len, |s| self.entries.get(s).copied())
            .into_iter()
            .map(|(start, end, tag)| EntitySpan::new(text, start, end, tag))
            .collect())
    }
}
