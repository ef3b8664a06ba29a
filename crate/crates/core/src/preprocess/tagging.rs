//! Indexed tag replacement (`Denver Broncos` → `ORG 3`).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::entities::{scan_longest, validate_spans, EntitySpan, EntityTag, EntityTagger};
use super::text::{normalize, split_words};
use super::PreprocessError;

/// Per tag type, the surface forms in first-occurrence order; position `i`
/// is the surface behind the token pair `TAG i`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityMap {
    entries: BTreeMap<EntityTag, Vec<String>>,
}

impl EntityMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Case-insensitive lookup of an existing index.
    pub fn index_of(&self, tag: EntityTag, surface: &str) -> Option<usize> {
        let key = surface.to_lowercase();
        self.entries
            .get(&tag)?
            .iter()
            .position(|s| s.to_lowercase() == key)
    }

    pub fn get_or_insert(&mut self, tag: EntityTag, surface: &str) -> usize {
        if let Some(i) = self.index_of(tag, surface) {
            return i;
        }
        let list = self.entries.entry(tag).or_default();
        list.push(surface.to_string());
        list.len() - 1
    }

    pub fn surface(&self, tag: EntityTag, index: usize) -> Option<&str> {
        self.entries.get(&tag)?.get(index).map(String::as_str)
    }

    pub fn count(&self, tag: EntityTag) -> usize {
        self.entries.get(&tag).map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.values().all(Vec::is_empty)
    }

    /// `(tag, index, surface)` triples in tag order.
    pub fn iter(&self) -> impl Iterator<Item = (EntityTag, usize, &str)> + '_ {
        self.entries
            .iter()
            .flat_map(|(&t, v)| v.iter().enumerate().map(move |(i, s)| (t, i, s.as_str())))
    }
}

/// A passage with entities replaced by indexed tags and everything else
/// lowercased and split into words.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedPassage {
    pub text: String,
    pub words: Vec<String>,
    pub entity_map: EntityMap,
}

/// Replaces each span with `TAG i`, reusing indices in `map` for surfaces
/// already seen, and returns the resulting word list.
pub fn replace_with_map(
    text: &str,
    spans: &[EntitySpan],
    map: &mut EntityMap,
) -> Result<Vec<String>, PreprocessError> {
    let spans = validate_spans(text, spans.to_vec())?;
    let mut words = Vec::new();
    let mut pos = 0;
    for span in &spans {
        split_words(&normalize(&text[pos..span.start]), &mut words);
        let index = map.get_or_insert(span.tag, &span.surface);
        words.push(span.tag.label().to_string());
        words.push(index.to_string());
        pos = span.end;
    }
    split_words(&normalize(&text[pos..]), &mut words);
    Ok(words)
}

pub fn replace_with_indexed_tags(text: &str, spans: &[EntitySpan]) -> Result<TaggedPassage, PreprocessError> {
    let mut entity_map = EntityMap::new();
    let words = replace_with_map(text, spans, &mut entity_map)?;
    Ok(TaggedPassage {
        text: words.join(" "),
        words,
        entity_map,
    })
}

/// Tagger spans merged with case-insensitive occurrences of surfaces
/// already in `map`, so text that mentions a passage entity in different
/// casing still receives the passage's index. Leftmost-longest wins; on
/// equal extent the map's tag is preferred.
pub fn tag_with_map(
    text: &str,
    tagger: &dyn EntityTagger,
    map: &EntityMap,
) -> Result<Vec<EntitySpan>, PreprocessError> {
    let mut candidates: Vec<(EntitySpan, u8)> = Vec::new();
    let known: HashMap<String, EntityTag> = map
        .iter()
        .map(|(t, _, s)| (s.to_lowercase(), t))
        .collect();
    if !known.is_empty() {
        let (lower, offsets) = lowercase_with_offsets(text);
        let max_len = known.keys().map(String::len).max().unwrap_or(0);
        for (s, e, tag) in scan_longest(&lower, max_len, |c| known.get(c).copied()) {
            let start = offsets[s];
            let end = offsets.get(e).copied().unwrap_or(text.len());
            candidates.push((EntitySpan::new(text, start, end, tag), 0));
        }
    }
    candidates.extend(tagger.tag(text)?.into_iter().map(|s| (s, 1)));
    candidates.sort_by_key(|(s, src)| (s.start, std::cmp::Reverse(s.end), *src));
    let mut spans = Vec::new();
    let mut last_end = 0;
    for (s, _) in candidates {
        if s.start >= last_end {
            last_end = s.end;
            spans.push(s);
        }
    }
    validate_spans(text, spans)
}

/// Lowercased text plus, for every byte of it, the byte offset of the
/// original character it came from.
fn lowercase_with_offsets(text: &str) -> (String, Vec<usize>) {
    let mut lower = String::with_capacity(text.len());
    let mut offsets = Vec::with_capacity(text.len());
    for (i, c) in text.char_indices() {
        for lc in c.to_lowercase() {
            lower.push(lc);
            offsets.extend(std::iter::repeat_n(i, lc.len_utf8()));
        }
    }
    (lower, offsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::entities::{tag_entities, GazetteerTagger};

    fn gaz() -> GazetteerTagger {
        GazetteerTagger::from_entries([
            ("Super Bowl", EntityTag::Event),
            ("the National Football League", EntityTag::Org),
            ("NFL", EntityTag::Org),
            ("Denver Broncos", EntityTag::Org),
        ])
    }

    fn tagged(text: &str) -> TaggedPassage {
        let spans = tag_entities(text, &gaz()).unwrap();
        replace_with_indexed_tags(text, &spans).unwrap()
    }

    #[test]
    fn distinct_surfaces_distinct_indices() {
        let p = tagged("the National Football League (NFL) rules");
        assert_eq!(p.text, "ORG 0 ( ORG 1 ) rules");
        assert_eq!(p.entity_map.surface(EntityTag::Org, 1), Some("NFL"));
    }

    #[test]
    fn repeated_surface_shares_index() {
        let text = "Super Bowl one. Super Bowl two. Super Bowl three. Super Bowl. Super Bowl!";
        let p = tagged(text);
        assert_eq!(p.words.iter().filter(|w| *w == "EVENT").count(), 5);
        assert!(!p.words.iter().any(|w| w == "1"));
        assert_eq!(p.entity_map.count(EntityTag::Event), 1);
    }

    #[test]
    fn no_spans_lowercases() {
        let p = replace_with_indexed_tags("A Quiet Day.", &[]).unwrap();
        assert_eq!(p.text, "a quiet day .");
        assert!(p.entity_map.is_empty());
    }

    #[test]
    fn case_insensitive_reuse() {
        let mut map = EntityMap::new();
        assert_eq!(map.get_or_insert(EntityTag::Org, "NFL"), 0);
        assert_eq!(map.get_or_insert(EntityTag::Org, "nfl"), 0);
        assert_eq!(map.get_or_insert(EntityTag::Org, "AFC"), 1);
        assert_eq!(map.get_or_insert(EntityTag::Gpe, "NFL"), 0);
    }

    #[test]
    fn map_surfaces_match_in_any_case() {
        let mut map = EntityMap::new();
        map.get_or_insert(EntityTag::Org, "x");
        map.get_or_insert(EntityTag::Org, "Denver Broncos");
        let text = "who beat the denver broncos?";
        let spans = tag_with_map(text, &gaz(), &map).unwrap();
        let words = replace_with_map(text, &spans, &mut map).unwrap();
        assert_eq!(words.join(" "), "who beat the ORG 1 ?");
    }

    #[test]
    fn lowercase_offsets_handle_expansion() {
        let (lower, offsets) = lowercase_with_offsets("İa");
        assert_eq!(lower.len(), offsets.len());
        assert_eq!(*offsets.last().unwrap(), "İ".len());
    }

    #[test]
    fn entity_map_serializes_by_label() {
        let mut map = EntityMap::new();
        map.get_or_insert(EntityTag::WorkOfArt, "Hamlet");
        let json = serde_json::to_string(&map).unwrap();
        assert_eq!(json, r#"{"WORK_OF_ART":["Hamlet"]}"#);
        let back: EntityMap = serde_json::from_str(&json).unwrap();
        assert_eq!(back, map);
    }
}
