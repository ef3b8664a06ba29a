//! Loading and inverting the bundled SQuAD-format sample.

use std::path::PathBuf;

use qgen_core::preprocess::{postprocess_question, GazetteerTagger, Preprocessor, StopWords};
use qgen_core::squad::{bucket_by_length, invert, invert_all, load_squad, InvertConfig, DEFAULT_BUCKETS};
use qgen_core::wordpiece::Vocabulary;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

struct Res {
    vocab: Vocabulary,
    gaz: GazetteerTagger,
    stop: StopWords,
}

fn res() -> Res {
    Res {
        vocab: Vocabulary::load(root().join("data/vocab.txt")).unwrap(),
        gaz: GazetteerTagger::load(root().join("data/gazetteer.tsv")).unwrap(),
        stop: StopWords::load(root().join("data/stopwords.txt")).unwrap(),
    }
}

#[test]
fn sample_loads_with_valid_offsets() {
    let records = load_squad(root().join("tests/fixtures/squad_sample.json")).unwrap();
    assert_eq!(records.len(), 36);
    assert!(records.iter().all(|r| r.offsets_valid()), "misaligned answer offsets");
}

#[test]
fn inversion_is_deterministic_and_well_formed() {
    let r = res();
    let pre = Preprocessor::new(&r.gaz, &r.stop, &r.vocab);
    let records = load_squad(root().join("tests/fixtures/squad_sample.json")).unwrap();
    let a = invert(&records, &pre, InvertConfig::default()).unwrap();
    let b = invert(&records, &pre, InvertConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), records.len());
    assert!(a.windows(2).all(|w| w[0].id < w[1].id));
    let s = r.vocab.special();
    for ex in &a {
        assert_eq!(ex.input.iter().filter(|&&i| i == s.separator).count(), 1, "{}", ex.id);
        assert!(ex.target.len() >= 2);
        assert_eq!(ex.target[0], s.bos);
        assert_eq!(*ex.target.last().unwrap(), s.eos);
    }
    let buckets = bucket_by_length(&a, &DEFAULT_BUCKETS).unwrap();
    assert_eq!(buckets.iter().map(|b| b.examples.len()).sum::<usize>(), a.len());
}

#[test]
fn questions_on_one_passage_share_passage_ids() {
    let r = res();
    let pre = Preprocessor::new(&r.gaz, &r.stop, &r.vocab);
    let records = load_squad(root().join("tests/fixtures/squad_sample.json")).unwrap();
    let out = invert_all(&records[..12], &pre, InvertConfig::default()).unwrap();
    let sep = r.vocab.special().separator;
    let passage_side = |ids: &[u32]| ids[ids.iter().position(|&i| i == sep).unwrap() + 1..].to_vec();
    let first = passage_side(&out[0].example.input);
    assert!(out.iter().all(|i| passage_side(&i.example.input) == first));
}

#[test]
fn target_decodes_to_tagged_question() {
    let r = res();
    let pre = Preprocessor::new(&r.gaz, &r.stop, &r.vocab);
    let records = load_squad(root().join("tests/fixtures/squad_sample.json")).unwrap();
    let rec = records
        .iter()
        .find(|r| r.question == "Which NFL team represented the AFC at Super Bowl 50?")
        .unwrap();
    let out = invert_all(std::slice::from_ref(rec), &pre, InvertConfig::default()).unwrap();
    let target = r.vocab.sequence_from_ids(&out[0].example.target);
    assert_eq!(
        postprocess_question(&target, &r.vocab),
        "which ORG 1 team represented the ORG 2 at EVENT 0 DATE 0?"
    );
    let input = r.vocab.sequence_from_ids(&out[0].example.input);
    assert_eq!(&input.tokens[..3], ["ORG", "3", "*"]);
}

#[test]
fn truncation_bounds_hold() {
    let r = res();
    let pre = Preprocessor::new(&r.gaz, &r.stop, &r.vocab);
    let records = load_squad(root().join("tests/fixtures/squad_sample.json")).unwrap();
    let cfg = InvertConfig {
        max_input: 20,
        max_target: 6,
    };
    let out = invert_all(&records, &pre, cfg).unwrap();
    let s = r.vocab.special();
    for i in &out {
        assert!(i.example.input.len() <= 20);
        assert!(i.example.target.len() <= 6);
        assert_eq!(*i.example.target.last().unwrap(), s.eos);
        assert_eq!(i.example.input.iter().filter(|&&x| x == s.separator).count(), 1);
    }
    assert!(out.iter().any(|i| i.input_truncated));
}
