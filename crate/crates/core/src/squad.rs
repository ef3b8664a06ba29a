//! SQuAD v1.1 ingestion, answer selection, inversion into
//! (answer ⧺ `*` ⧺ passage → question) examples, and length bucketing.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::preprocess::{EntityMap, PreprocessError, Preprocessor};

pub const DEFAULT_MAX_INPUT: usize = 512;
pub const DEFAULT_MAX_TARGET: usize = 48;
pub const DEFAULT_BUCKETS: [(usize, usize); 4] = [(64, 16), (128, 24), (256, 32), (512, 48)];
/// Version tag written as the first line of an example cache.
pub const CACHE_HEADER: &str = "qgen-examples v1";

#[derive(Debug, Error)]
pub enum SquadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("question {id}: {source}")]
    Preprocess {
        id: String,
        #[source]
        source: PreprocessError,
    },
    #[error("example {id} ({input}, {target}) exceeds the largest bucket bound")]
    ExceedsBuckets { id: String, input: usize, target: usize },
    #[error("bucket bounds must be non-empty and strictly ascending")]
    BadBounds,
    #[error("example cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    /// Character (not byte) offset into the passage.
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SquadRecord {
    pub title: String,
    /// Shared by every question on the same paragraph.
    pub passage: Arc<str>,
    pub id: String,
    pub question: String,
    pub answers: Vec<Answer>,
}

impl SquadRecord {
    /// True when every answer's offset points at its text in the passage.
    pub fn offsets_valid(&self) -> bool {
        self.answers.iter().all(|a| {
            let tail: String = self.passage.chars().skip(a.start).take(a.text.chars().count()).collect();
            tail == a.text
        })
    }
}

fn schema(path: &str, message: impl Into<String>) -> SquadError {
    SquadError::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

fn field<'v>(v: &'v Value, key: &str, path: &str) -> Result<&'v Value, SquadError> {
    v.get(key).ok_or_else(|| schema(path, format!("missing field {key:?}")))
}

fn array<'v>(v: &'v Value, key: &str, path: &str) -> Result<&'v Vec<Value>, SquadError> {
    field(v, key, path)?
        .as_array()
        .ok_or_else(|| schema(path, format!("field {key:?} is not an array")))
}

fn string(v: &Value, key: &str, path: &str) -> Result<String, SquadError> {
    field(v, key, path)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| schema(path, format!("field {key:?} is not a string")))
}

/// Parses SQuAD v1.1 JSON text. Errors name the JSON path of the offending
/// object, e.g. `data[0].paragraphs[0].qas[0]`.
pub fn parse_squad(text: &str, source: &Path) -> Result<Vec<SquadRecord>, SquadError> {
    let root: Value = serde_json::from_str(text).map_err(|e| SquadError::Json {
        path: source.to_path_buf(),
        source: e,
    })?;
    let mut records = Vec::new();
    for (a, article) in array(&root, "data", "$")?.iter().enumerate() {
        let ap = format!("data[{a}]");
        let title = string(article, "title", &ap)?;
        for (p, para) in array(article, "paragraphs", &ap)?.iter().enumerate() {
            let pp = format!("{ap}.paragraphs[{p}]");
            let passage: Arc<str> = string(para, "context", &pp)?.into();
            for (q, qa) in array(para, "qas", &pp)?.iter().enumerate() {
                let qp = format!("{pp}.qas[{q}]");
                let id = string(qa, "id", &qp)?;
                let question = string(qa, "question", &qp)?;
                let raw = array(qa, "answers", &qp)?;
                if raw.is_empty() {
                    return Err(schema(&qp, "empty \"answers\" array"));
                }
                let mut answers = Vec::with_capacity(raw.len());
                for (n, ans) in raw.iter().enumerate() {
                    let np = format!("{qp}.answers[{n}]");
                    let text = string(ans, "text", &np)?;
                    let start = field(ans, "answer_start", &np)?
                        .as_u64()
                        .ok_or_else(|| schema(&np, "field \"answer_start\" is not a non-negative integer"))?;
                    answers.push(Answer {
                        text,
                        start: start as usize,
                    });
                }
                records.push(SquadRecord {
                    title: title.clone(),
                    passage: Arc::clone(&passage),
                    id,
                    question,
                    answers,
                });
            }
        }
    }
    Ok(records)
}

pub fn load_squad(path: impl AsRef<Path>) -> Result<Vec<SquadRecord>, SquadError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| SquadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_squad(&text, path)
}

/// The most frequent answer (case-insensitive); ties go to the smallest
/// offset, then the lexicographically smallest text. Independent of input
/// order. Panics on an empty list.
pub fn select_answer(answers: &[Answer]) -> Answer {
    assert!(!answers.is_empty(), "select_answer needs at least one answer");
    let mut groups: HashMap<String, (usize, &Answer)> = HashMap::new();
    for a in answers {
        let entry = groups.entry(a.text.to_lowercase()).or_insert((0, a));
        entry.0 += 1;
        if (a.start, &a.text) < (entry.1.start, &entry.1.text) {
            entry.1 = a;
        }
    }
    let (_, best) = groups
        .into_values()
        .min_by(|(ca, a), (cb, b)| cb.cmp(ca).then(a.start.cmp(&b.start)).then(a.text.cmp(&b.text)))
        .expect("non-empty");
    best.clone()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvertedExample {
    pub id: String,
    /// `answer ⧺ [*] ⧺ passage` WordPiece ids.
    pub input: Vec<u32>,
    /// `[BOS] question [EOS]` WordPiece ids.
    pub target: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvertConfig {
    pub max_input: usize,
    pub max_target: usize,
}

impl Default for InvertConfig {
    fn default() -> Self {
        InvertConfig {
            max_input: DEFAULT_MAX_INPUT,
            max_target: DEFAULT_MAX_TARGET,
        }
    }
}

/// Everything produced for one record; the entity map lets callers
/// substitute surfaces back into generated questions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inversion {
    pub example: InvertedExample,
    pub entity_map: EntityMap,
    pub answer: Answer,
    pub input_truncated: bool,
    pub target_truncated: bool,
}

/// Inverts one record. Inputs keep the whole answer and lose the passage
/// tail; an answer that alone overflows the bound is cut as well.
/// Targets keep `[EOS]` as their last id.
pub fn invert_record(
    record: &SquadRecord,
    pre: &Preprocessor<'_>,
    cfg: InvertConfig,
) -> Result<Inversion, SquadError> {
    let wrap = |source| SquadError::Preprocess {
        id: record.id.clone(),
        source,
    };
    let answer = select_answer(&record.answers);
    let pair = pre.preprocess_pair(&answer.text, &record.passage).map_err(wrap)?;
    let mut entity_map = pair.passage.entity_map;
    let mut input = pair.input.ids;
    let input_truncated = truncate_input(&mut input, pair.answer_len, cfg.max_input, pre.vocab.special().separator);
    let question = pre.preprocess_question(&record.question, &mut entity_map).map_err(wrap)?;
    let special = pre.vocab.special();
    let body = cfg.max_target.saturating_sub(2);
    let target_truncated = question.len() > body;
    let mut target = Vec::with_capacity(question.len().min(body) + 2);
    target.push(special.bos);
    target.extend(question.ids.iter().take(body));
    target.push(special.eos);
    Ok(Inversion {
        example: InvertedExample {
            id: record.id.clone(),
            input,
            target,
        },
        entity_map,
        answer,
        input_truncated,
        target_truncated,
    })
}

/// Cuts `answer ⧺ [*] ⧺ passage` to `max_input` ids, dropping passage
/// tail first; an answer that alone overflows is cut too and the separator
/// kept last. Returns whether anything was removed.
pub fn truncate_input(input: &mut Vec<u32>, answer_len: usize, max_input: usize, separator: u32) -> bool {
    if input.len() <= max_input {
        return false;
    }
    if answer_len + 1 > max_input {
        input.truncate(max_input.saturating_sub(1));
        input.push(separator);
    } else {
        input.truncate(max_input);
    }
    true
}

/// Inverts every record in parallel; output is sorted by question id.
pub fn invert_all(
    records: &[SquadRecord],
    pre: &Preprocessor<'_>,
    cfg: InvertConfig,
) -> Result<Vec<Inversion>, SquadError> {
    let mut out = records
        .par_iter()
        .map(|r| invert_record(r, pre, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort_by(|a, b| a.example.id.cmp(&b.example.id));
    Ok(out)
}

pub fn invert(
    records: &[SquadRecord],
    pre: &Preprocessor<'_>,
    cfg: InvertConfig,
) -> Result<Vec<InvertedExample>, SquadError> {
    Ok(invert_all(records, pre, cfg)?.into_iter().map(|i| i.example).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bucket {
    pub max_input: usize,
    pub max_target: usize,
    pub examples: Vec<InvertedExample>,
}

/// Places each example in the smallest bucket whose bounds fit both its
/// input and target.
pub fn bucket_by_length(examples: &[InvertedExample], bounds: &[(usize, usize)]) -> Result<Vec<Bucket>, SquadError> {
    if bounds.is_empty() || bounds.windows(2).any(|w| w[0].0 >= w[1].0 || w[0].1 > w[1].1) {
        return Err(SquadError::BadBounds);
    }
    let mut buckets: Vec<Bucket> = bounds
        .iter()
        .map(|&(i, t)| Bucket {
            max_input: i,
            max_target: t,
            examples: Vec::new(),
        })
        .collect();
    for ex in examples {
        let slot = buckets
            .iter_mut()
            .find(|b| ex.input.len() <= b.max_input && ex.target.len() <= b.max_target)
            .ok_or_else(|| SquadError::ExceedsBuckets {
                id: ex.id.clone(),
                input: ex.input.len(),
                target: ex.target.len(),
            })?;
        slot.examples.push(ex.clone());
    }
    Ok(buckets)
}

/// Right-pads `ids` with `pad` to `len`.
pub fn pad_to(ids: &[u32], len: usize, pad: u32) -> Vec<u32> {
    let mut out = ids.to_vec();
    out.resize(len.max(ids.len()), pad);
    out
}

/// Writes a versioned JSON-lines cache: a header line, then one example
/// per line.
pub fn write_examples(path: impl AsRef<Path>, examples: &[InvertedExample]) -> Result<(), SquadError> {
    let path = path.as_ref();
    let io = |source| SquadError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(w, "{CACHE_HEADER}").map_err(io)?;
    for ex in examples {
        let line = serde_json::to_string(ex).expect("examples serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<InvertedExample>, SquadError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| SquadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let cache_err = |message: String| SquadError::Cache {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == CACHE_HEADER => {}
        Some(Ok(h)) => return Err(cache_err(format!("unexpected header {h:?}"))),
        Some(Err(source)) => {
            return Err(SquadError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
        None => return Err(cache_err("file is empty".into())),
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|source| SquadError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: InvertedExample =
            serde_json::from_str(&line).map_err(|e| cache_err(format!("line {}: {e}", n + 2)))?;
        if !seen.insert(ex.id.clone()) {
            return Err(cache_err(format!("duplicate id {}", ex.id)));
        }
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ans(text: &str, start: usize) -> Answer {
        Answer {
            text: text.into(),
            start,
        }
    }

    #[test]
    fn majority_answer_wins() {
        let a = [ans("Denver Broncos", 177), ans("Denver Broncos", 177), ans("Broncos", 184)];
        assert_eq!(select_answer(&a), ans("Denver Broncos", 177));
        assert_eq!(select_answer(&[ans("x", 3)]), ans("x", 3));
    }

    #[test]
    fn distinct_answers_tie_break_on_offset_then_text() {
        let a = [ans("c", 9), ans("a", 4), ans("b", 2)];
        assert_eq!(select_answer(&a), ans("b", 2));
        let a = [ans("zeta", 2), ans("alpha", 2)];
        assert_eq!(select_answer(&a), ans("alpha", 2));
    }

    #[test]
    fn case_insensitive_grouping() {
        let a = [ans("Gold", 5), ans("gold", 5), ans("silver", 1)];
        assert_eq!(select_answer(&a), ans("Gold", 5));
    }

    const MINIMAL: &str = r#"{"version":"1.1","data":[{"title":"T","paragraphs":[{"context":"Alpha beat Beta.","qas":[{"id":"q1","question":"Who beat Beta?","answers":[{"text":"Alpha","answer_start":0}]}]}]}]}"#;

    #[test]
    fn minimal_file_has_one_record() {
        let r = parse_squad(MINIMAL, Path::new("x.json")).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].id, "q1");
        assert!(r[0].offsets_valid());
    }

    #[test]
    fn missing_answers_names_path() {
        let text = MINIMAL.replace(r#""answers""#, r#""responses""#);
        match parse_squad(&text, Path::new("x.json")).unwrap_err() {
            SquadError::Schema { path, .. } => assert_eq!(path, "data[0].paragraphs[0].qas[0]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn passages_shared_by_reference() {
        let text = r#"{"data":[{"title":"T","paragraphs":[{"context":"Alpha beat Beta.","qas":[
            {"id":"q1","question":"Who won?","answers":[{"text":"Alpha","answer_start":0}]},
            {"id":"q2","question":"Who lost?","answers":[{"text":"Beta","answer_start":11}]}]}]}]}"#;
        let r = parse_squad(text, Path::new("x.json")).unwrap();
        assert_eq!(r.len(), 2);
        assert!(Arc::ptr_eq(&r[0].passage, &r[1].passage));
    }

    fn ex(id: &str, input: usize, target: usize) -> InvertedExample {
        InvertedExample {
            id: id.into(),
            input: vec![7; input],
            target: vec![7; target],
        }
    }

    #[test]
    fn smallest_fitting_bucket() {
        let bounds = [(64, 16), (256, 32), (512, 48)];
        let b = bucket_by_length(&[ex("a", 300, 20)], &bounds).unwrap();
        assert_eq!(b[2].examples.len(), 1);
        let b = bucket_by_length(&[ex("a", 10, 5), ex("b", 64, 16)], &bounds).unwrap();
        assert_eq!(b[0].examples.len(), 2);
        let b = bucket_by_length(&[], &bounds).unwrap();
        assert!(b.iter().all(|b| b.examples.is_empty()));
        assert!(matches!(
            bucket_by_length(&[ex("a", 513, 2)], &bounds),
            Err(SquadError::ExceedsBuckets { .. })
        ));
        assert!(matches!(bucket_by_length(&[], &[(64, 16), (32, 8)]), Err(SquadError::BadBounds)));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ex.jsonl");
        let examples = vec![ex("a", 3, 2), ex("b", 1, 4)];
        write_examples(&path, &examples).unwrap();
        assert_eq!(read_examples(&path).unwrap(), examples);
        fs::write(&path, "other\n").unwrap();
        assert!(matches!(read_examples(&path), Err(SquadError::Cache { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn select_answer_is_permutation_invariant(
                raw in proptest::collection::vec((prop_oneof![Just("a"), Just("A"), Just("b"), Just("c")], 0usize..5), 1..6),
                seed in any::<u64>(),
            ) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let answers: Vec<Answer> = raw.iter().map(|(t, s)| ans(t, *s)).collect();
                let mut shuffled = answers.clone();
                shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                prop_assert_eq!(select_answer(&answers), select_answer(&shuffled));
            }

            #[test]
            fn buckets_partition(lens in proptest::collection::vec((1usize..512, 2usize..48), 0..60)) {
                let examples: Vec<_> = lens.iter().enumerate().map(|(i, &(a, b))| ex(&i.to_string(), a, b)).collect();
                let buckets = bucket_by_length(&examples, &DEFAULT_BUCKETS).unwrap();
                let total: usize = buckets.iter().map(|b| b.examples.len()).sum();
                prop_assert_eq!(total, examples.len());
                let mut ids: Vec<&str> = buckets.iter().flat_map(|b| b.examples.iter().map(|e| e.id.as_str())).collect();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), examples.len());
                for (k, b) in buckets.iter().enumerate() {
                    for e in &b.examples {
                        prop_assert!(e.input.len() <= b.max_input && e.target.len() <= b.max_target);
                        if k > 0 {
                            let prev = &buckets[k - 1];
                            prop_assert!(e.input.len() > prev.max_input || e.target.len() > prev.max_target);
                        }
                    }
                }
            }
        }
    }
}
