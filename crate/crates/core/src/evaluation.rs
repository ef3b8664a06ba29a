//! Word-level edit distance, WER and corpus statistics over generated and
//! reference questions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::split_words;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference has no words, so the normalized rate is undefined")]
    EmptyReference,
    #[error("no question pairs to evaluate")]
    EmptyCorpus,
    #[error("duplicate question id {0:?}")]
    DuplicateId(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Substitution, deletion, insertion and match counts of one alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditAlignment {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub correct: usize,
}

impl EditAlignment {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `N = S + D + C`.
    pub fn reference_len(&self) -> usize {
        self.substitutions + self.deletions + self.correct
    }

    pub fn hypothesis_len(&self) -> usize {
        self.substitutions + self.insertions + self.correct
    }
}

/// Words compared by WER: lowercased, split on whitespace, punctuation
/// split into its own words.
pub fn wer_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    split_words(&text.to_lowercase(), &mut out);
    out
}

/// Unit-cost Levenshtein alignment over words. Among minimal alignments
/// the backtrace from the end prefers a match, then a substitution, then
/// a deletion, then an insertion.
pub fn edit_alignment<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> EditAlignment {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        dp[i * w] = i;
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = dp[(i - 1) * w + j - 1] + usize::from(!same);
            dp[i * w + j] = diag.min(dp[(i - 1) * w + j] + 1).min(dp[i * w + j - 1] + 1);
        }
    }
    let mut a = EditAlignment::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = dp[(i - 1) * w + j - 1];
            if same && diag == here {
                a.correct += 1;
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && diag + 1 == here {
                a.substitutions += 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + 1 == here {
            a.deletions += 1;
            i -= 1;
        } else {
            a.insertions += 1;
            j -= 1;
        }
    }
    a
}

/// Word-level distance between two question strings.
pub fn word_distance(reference: &str, hypothesis: &str) -> EditAlignment {
    edit_alignment(&wer_words(reference), &wer_words(hypothesis))
}

/// `(S + D + I) / N`.
pub fn wer_normalized(a: &EditAlignment) -> Result<f64, EvalError> {
    match a.reference_len() {
        0 => Err(EvalError::EmptyReference),
        n => Ok(a.distance() as f64 / n as f64),
    }
}

/// First whitespace token of each non-empty question, counted; most
/// frequent first, ties alphabetical.
pub fn first_word_frequency<S: AsRef<str>>(questions: &[S]) -> Vec<(String, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for q in questions {
        if let Some(w) = q.as_ref().split_whitespace().next() {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut out: Vec<(String, usize)> = counts.into_iter().map(|(w, c)| (w.to_string(), c)).collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WordCounts {
    /// Mean whitespace word count, rounded to two decimals.
    pub mean: f64,
    pub histogram: BTreeMap<usize, usize>,
}

pub fn word_count_histogram<S: AsRef<str>>(questions: &[S]) -> WordCounts {
    let mut histogram = BTreeMap::new();
    let mut total = 0usize;
    for q in questions {
        let n = q.as_ref().split_whitespace().count();
        total += n;
        *histogram.entry(n).or_default() += 1;
    }
    let mean = if questions.is_empty() {
        0.0
    } else {
        (total as f64 / questions.len() as f64 * 100.0).round() / 100.0
    };
    WordCounts { mean, histogram }
}

/// Distance ranges used to summarize a corpus.
pub const DISTANCE_BUCKETS: [(usize, Option<usize>); 5] =
    [(0, Some(5)), (6, Some(10)), (11, Some(15)), (16, Some(20)), (21, None)];

pub fn bucket_label(lo: usize, hi: Option<usize>) -> String {
    match (lo, hi) {
        (0, Some(h)) => format!("<={h}"),
        (l, Some(h)) => format!("{l}-{h}"),
        (l, None) => format!(">={l}"),
    }
}

pub fn bucket_index(distance: usize) -> usize {
    DISTANCE_BUCKETS
        .iter()
        .position(|&(_, hi)| hi.is_none_or(|h| distance <= h))
        .expect("last bucket is open-ended")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub id: String,
    pub alignment: EditAlignment,
    pub distance: usize,
    /// `None` when the reference has no words.
    pub normalized: Option<f64>,
    pub ref_len: usize,
    pub hyp_len: usize,
    pub first_word_ref: String,
    pub first_word_hyp: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketShare {
    pub label: String,
    pub count: usize,
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub count: usize,
    /// Mean raw word-level distance, the figure reported as WER.
    pub mean_distance: f64,
    /// Mean of `(S + D + I) / N` over pairs with a non-empty reference.
    pub mean_normalized: Option<f64>,
    pub exact_match_rate: f64,
    pub buckets: Vec<BucketShare>,
    pub first_words_ref: Vec<(String, usize)>,
    pub first_words_hyp: Vec<(String, usize)>,
    pub word_counts_ref: WordCounts,
    pub word_counts_hyp: WordCounts,
    pub pairs: Vec<PairResult>,
}

/// One reference question and the generated question for the same input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionPair {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
}

fn first_word(s: &str) -> String {
    s.split_whitespace().next().unwrap_or("").to_string()
}

pub fn corpus_report(pairs: &[QuestionPair]) -> Result<CorpusReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    for p in pairs {
        if !seen.insert(p.id.as_str()) {
            return Err(EvalError::DuplicateId(p.id.clone()));
        }
    }
    let results: Vec<PairResult> = pairs
        .par_iter()
        .map(|p| {
            let alignment = word_distance(&p.reference, &p.hypothesis);
            PairResult {
                id: p.id.clone(),
                distance: alignment.distance(),
                normalized: wer_normalized(&alignment).ok(),
                ref_len: alignment.reference_len(),
                hyp_len: alignment.hypothesis_len(),
                first_word_ref: first_word(&p.reference),
                first_word_hyp: first_word(&p.hypothesis),
                alignment,
            }
        })
        .collect();
    let n = results.len() as f64;
    let mut counts = [0usize; DISTANCE_BUCKETS.len()];
    for r in &results {
        counts[bucket_index(r.distance)] += 1;
    }
    let normalized: Vec<f64> = results.iter().filter_map(|r| r.normalized).collect();
    let refs: Vec<&str> = pairs.iter().map(|p| p.reference.as_str()).collect();
    let hyps: Vec<&str> = pairs.iter().map(|p| p.hypothesis.as_str()).collect();
    Ok(CorpusReport {
        count: results.len(),
        mean_distance: results.iter().map(|r| r.distance as f64).sum::<f64>() / n,
        mean_normalized: (!normalized.is_empty()).then(|| normalized.iter().sum::<f64>() / normalized.len() as f64),
        exact_match_rate: results.iter().filter(|r| r.distance == 0).count() as f64 / n,
        buckets: DISTANCE_BUCKETS
            .iter()
            .zip(counts)
            .map(|(&(lo, hi), count)| BucketShare {
                label: bucket_label(lo, hi),
                count,
                share: count as f64 / n,
            })
            .collect(),
        first_words_ref: first_word_frequency(&refs),
        first_words_hyp: first_word_frequency(&hyps),
        word_counts_ref: word_count_histogram(&refs),
        word_counts_hyp: word_count_histogram(&hyps),
        pairs: results,
    })
}

impl CorpusReport {
    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let json = serde_json::to_string_pretty(self).expect("report serializes") + "\n";
        fs::write(path, json).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Per-pair CSV: id, distance, normalized, ref_len, hyp_len,
    /// first_word_ref, first_word_hyp.
    pub fn write_pairs_csv(&self, path: &Path) -> Result<(), EvalError> {
        let err = |source| EvalError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["id", "distance", "normalized", "ref_len", "hyp_len", "first_word_ref", "first_word_hyp"])
            .map_err(err)?;
        for p in &self.pairs {
            w.write_record([
                p.id.clone(),
                p.distance.to_string(),
                p.normalized.map(|x| format!("{x:.6}")).unwrap_or_default(),
                p.ref_len.to_string(),
                p.hyp_len.to_string(),
                p.first_word_ref.clone(),
                p.first_word_hyp.clone(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Human-readable summary with aligned columns.
    pub fn render_text(&self, top_words: usize) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "questions            {}", self.count);
        let _ = writeln!(s, "mean WER (words)     {:.2}", self.mean_distance);
        if let Some(m) = self.mean_normalized {
            let _ = writeln!(s, "mean normalized WER  {m:.4}");
        }
        let _ = writeln!(s, "exact match          {:.2}%", 100.0 * self.exact_match_rate);
        let _ = writeln!(s, "mean words (ref)     {:.2}", self.word_counts_ref.mean);
        let _ = writeln!(s, "mean words (hyp)     {:.2}", self.word_counts_hyp.mean);
        let _ = writeln!(s, "\nWER bucket   count    share");
        for b in &self.buckets {
            let _ = writeln!(s, "{:<10} {:>7} {:>7.2}%", b.label, b.count, 100.0 * b.share);
        }
        let _ = writeln!(s, "\nfirst word (ref)       first word (hyp)");
        let rows = self.first_words_ref.len().max(self.first_words_hyp.len()).min(top_words);
        let cell = |t: &[(String, usize)], i: usize| {
            t.get(i).map(|(w, c)| format!("{w:<14} {c:>6}")).unwrap_or_default()
        };
        for i in 0..rows {
            let _ = writeln!(s, "{:<22} {}", cell(&self.first_words_ref, i), cell(&self.first_words_hyp, i));
        }
        s
    }

    pub fn write_text(&self, path: &Path, top_words: usize) -> Result<(), EvalError> {
        fs::write(path, self.render_text(top_words)).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
