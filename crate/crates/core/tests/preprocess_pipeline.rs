//! Preprocessing against the worked Super Bowl example and pipeline
//! invariants over random passages.

use std::path::PathBuf;
use std::sync::OnceLock;

use proptest::prelude::*;
use qgen_core::preprocess::{
    remove_stopwords, replace_with_indexed_tags, tag_entities, EntityTag, GazetteerTagger, Preprocessor, StopWords,
    TaggedPassage,
};
use qgen_core::wordpiece::Vocabulary;

struct Resources {
    vocab: Vocabulary,
    gazetteer: GazetteerTagger,
    stopwords: StopWords,
}

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn resources() -> &'static Resources {
    static R: OnceLock<Resources> = OnceLock::new();
    R.get_or_init(|| Resources {
        vocab: Vocabulary::load(data("vocab.txt")).unwrap(),
        gazetteer: GazetteerTagger::load(data("gazetteer.tsv")).unwrap(),
        stopwords: StopWords::load(data("stopwords.txt")).unwrap(),
    })
}

const SUPER_BOWL: &str = "Super Bowl 50 was an American football game to determine the champion of the National Football League (NFL) for the 2015 season. The American Football Conference (AFC) champion Denver Broncos defeated the National Football Conference (NFC) champion Carolina Panthers 24–10 to earn their third Super Bowl title. The game was played on February 7, 2016, at Levi's Stadium in the San Francisco Bay Area at Santa Clara, California. As this was the 50th Super Bowl, the league emphasized the \"golden anniversary\" with various gold-themed initiatives, as well as temporarily suspending the tradition of naming each Super Bowl game with Roman numerals (under which the game would have been known as \"Super Bowl L\"), so that the logo could prominently feature the Arabic numerals 50.";

const SUPER_BOWL_TAGGED: &str = "EVENT 0 DATE 0 was an NORP 0 football game to determine the champion of ORG 0 ( ORG 1 ) for DATE 1 . the NORP 0 football conference ( ORG 2 ) champion ORG 3 defeated ORG 4 ( ORG 5 ) champion ORG 6 24 – 10 to earn their ORDINAL 0 EVENT 0 title . the game was played on DATE 2 , at FAC 0 in FAC 1 at GPE 0 , GPE 1 . as this was the ORDINAL 1 EVENT 0 , the league emphasized the \" golden anniversary \" with various gold - themed initiatives , as well as temporarily suspend ##ing the tradition of naming each EVENT 0 game with LANGUAGE 0 nu ##meral ##s ( under which the game would have been known as \" EVENT 0 l \" ) , so that the logo could prominently feature the LANGUAGE 1 nu ##meral ##s DATE 0 .";

#[test]
fn super_bowl_passage_matches_worked_example() {
    let r = resources();
    let empty = StopWords::empty();
    let p = Preprocessor::new(&r.gazetteer, &empty, &r.vocab);
    let out = p.preprocess_pair("Denver Broncos", SUPER_BOWL).unwrap();
    let passage_side = out.input.tokens[out.answer_len + 1..].join(" ");
    assert_eq!(passage_side, SUPER_BOWL_TAGGED);
    assert_eq!(out.passage.entity_map.surface(EntityTag::Org, 3), Some("Denver Broncos"));
    assert_eq!(out.passage.entity_map.count(EntityTag::Event), 1);
}

#[test]
fn answer_reuses_passage_index() {
    let r = resources();
    let p = Preprocessor::new(&r.gazetteer, &r.stopwords, &r.vocab);
    let out = p.preprocess_pair("Denver Broncos", SUPER_BOWL).unwrap();
    assert_eq!(&out.input.tokens[..out.answer_len], ["ORG", "3"]);
    assert_eq!(out.input.tokens[out.answer_len], "*");
    let passage_side = &out.input.tokens[out.answer_len + 1..];
    assert!(!passage_side.iter().any(|t| t == "the" || t == "was"));
    assert!(passage_side.windows(2).any(|w| w == ["ORG", "3"]));
}

#[test]
fn stopword_list_example() {
    let r = resources();
    let words: Vec<String> = ["the", "game", "was", "played"].iter().map(|s| s.to_string()).collect();
    assert_eq!(remove_stopwords(&words, &r.stopwords), ["game", "played"]);
}

fn check_index_coherence(p: &TaggedPassage) -> Result<(), TestCaseError> {
    for pair in p.words.windows(2) {
        if let Some(tag) = EntityTag::from_label(&pair[0]) {
            let i: usize = pair[1].parse().map_err(|_| TestCaseError::fail("tag without index"))?;
            prop_assert!(i < p.entity_map.count(tag));
        }
    }
    for tag in EntityTag::ALL {
        let mut seen: Vec<String> = (0..p.entity_map.count(tag))
            .map(|i| p.entity_map.surface(tag, i).unwrap().to_lowercase())
            .collect();
        let n = seen.len();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), n);
    }
    Ok(())
}

fn passage_strategy() -> impl Strategy<Value = String> {
    let pool = prop_oneof![
        Just("Denver Broncos"),
        Just("denver broncos"),
        Just("Broncos"),
        Just("NFL"),
        Just("Super Bowl"),
        Just("the National Football League"),
        Just("California"),
        Just("game"),
        Just("the"),
        Just("was"),
        Just("played"),
        Just("*"),
        Just("50"),
        Just("third"),
        Just(","),
        Just("."),
        Just("(Paris)"),
    ];
    proptest::collection::vec(pool, 1..40).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tagged_passages_are_coherent(text in passage_strategy()) {
        let r = resources();
        let spans = tag_entities(&text, &r.gazetteer).unwrap();
        let a = replace_with_indexed_tags(&text, &spans).unwrap();
        let b = replace_with_indexed_tags(&text, &spans).unwrap();
        prop_assert_eq!(&a, &b);
        check_index_coherence(&a)?;
    }

    #[test]
    fn pair_has_exactly_one_separator(answer in passage_strategy(), passage in passage_strategy()) {
        let r = resources();
        let p = Preprocessor::new(&r.gazetteer, &r.stopwords, &r.vocab);
        let out = p.preprocess_pair(&answer, &passage).unwrap();
        let sep = r.vocab.special().separator;
        prop_assert_eq!(out.input.ids.iter().filter(|&&i| i == sep).count(), 1);
        prop_assert_eq!(out.input.ids[out.answer_len], sep);
        check_index_coherence(&out.passage)?;
    }
}
