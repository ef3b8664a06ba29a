//! Beam-search decoding and the passage + answer → question path.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{postprocess_question, EntityMap, EntityTag, PreprocessError, Preprocessor};
use crate::squad::{truncate_input, DEFAULT_MAX_INPUT};
use crate::transformer::{EncodedInput, ModelError, TokenMap, TransformerModel, MODEL_BOS, MODEL_EOS, MODEL_PAD};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("{id}: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<GenerationError>,
    },
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub beam_width: usize,
    /// Upper bound on generated tokens before `[EOS]`.
    pub max_length: usize,
    /// Length-normalization exponent α in `logp / len^α`.
    pub length_penalty: f64,
    /// Longest model input; longer inputs lose passage tail.
    pub max_input: usize,
    /// Also emit questions with entity tags replaced by their surfaces.
    pub substitute: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            beam_width: 4,
            max_length: 48,
            length_penalty: 0.6,
            max_input: DEFAULT_MAX_INPUT,
            substitute: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.beam_width == 0 || self.max_length == 0 || self.max_input < 2 {
            return Err(GenerationError::Config(
                "beam_width and max_length must be at least 1, max_input at least 2".into(),
            ));
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            return Err(GenerationError::Config("length_penalty must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Next-token distribution given a decoder prefix that starts with `[BOS]`.
pub trait StepModel {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>, ModelError>;
}

/// A transformer with its encoder output for one input.
pub struct EncodedModel<'a> {
    pub model: &'a TransformerModel,
    pub encoded: EncodedInput,
}

impl<'a> EncodedModel<'a> {
    pub fn new(model: &'a TransformerModel, input: &[usize]) -> Result<Self, ModelError> {
        Ok(EncodedModel {
            model,
            encoded: model.encode(input)?,
        })
    }
}

impl StepModel for EncodedModel<'_> {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        self.model.next_log_probs(&self.encoded, prefix)
    }
}

/// Ids with special roles during decoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeIds {
    pub bos: usize,
    pub eos: usize,
    /// Never generated.
    pub banned: Vec<usize>,
}

impl Default for DecodeIds {
    /// Model-vocabulary ids from [`TokenMap`].
    fn default() -> Self {
        DecodeIds {
            bos: MODEL_BOS,
            eos: MODEL_EOS,
            banned: vec![MODEL_PAD, MODEL_BOS],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated ids, without the leading `[BOS]`; finished hypotheses end
    /// with `[EOS]`.
    pub tokens: Vec<usize>,
    /// Sum of the per-step log-probabilities of `tokens`.
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// `log_prob / len^α`, counting `[EOS]` in the length.
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / (self.tokens.len().max(1) as f64).powf(alpha)
    }
}

fn by_logp_then_ids(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

fn with_prefix(bos: usize, tokens: &[usize]) -> Vec<usize> {
    let mut p = Vec::with_capacity(tokens.len() + 1);
    p.push(bos);
    p.extend_from_slice(tokens);
    p
}

fn allowed(ids: &DecodeIds, token: usize) -> bool {
    !ids.banned.contains(&token)
}

/// Appends `[EOS]` with its real log-probability.
fn force_finish<M: StepModel + ?Sized>(model: &M, ids: &DecodeIds, mut h: BeamHypothesis) -> Result<BeamHypothesis, ModelError> {
    let lp = model.log_probs(&with_prefix(ids.bos, &h.tokens))?;
    h.log_prob += lp[ids.eos];
    h.tokens.push(ids.eos);
    h.finished = true;
    Ok(h)
}

/// Picks the most probable allowed token at every step, lowest id on ties.
pub fn greedy<M: StepModel + ?Sized>(model: &M, max_length: usize, ids: &DecodeIds) -> Result<BeamHypothesis, ModelError> {
    let mut h = BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while h.tokens.len() < max_length {
        let lp = model.log_probs(&with_prefix(ids.bos, &h.tokens))?;
        let mut best: Option<usize> = None;
        for (t, &p) in lp.iter().enumerate() {
            if allowed(ids, t) && best.is_none_or(|b| p > lp[b]) {
                best = Some(t);
            }
        }
        let t = best.ok_or_else(|| ModelError::Batch("every token is banned".into()))?;
        h.tokens.push(t);
        h.log_prob += lp[t];
        if t == ids.eos {
            h.finished = true;
            return Ok(h);
        }
    }
    force_finish(model, ids, h)
}

/// Beam search. Each step expands every live hypothesis by every allowed
/// token and keeps the `beam_width` most probable candidates by cumulative
/// log-probability; candidates ending in `[EOS]` leave the beam as
/// finished. Hypotheses still live after `max_length` tokens are finished
/// with `[EOS]`. The result is ranked by length-normalized score, ties
/// broken by token ids; with `beam_width > 1` the greedy hypothesis joins
/// the pool so widening the beam never lowers the top score.
pub fn beam_search<M: StepModel + ?Sized>(
    model: &M,
    cfg: &GenerationConfig,
    ids: &DecodeIds,
) -> Result<Vec<BeamHypothesis>, GenerationError> {
    cfg.validate()?;
    let mut live = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished = Vec::new();
    for _ in 0..cfg.max_length {
        let mut candidates = Vec::new();
        for h in &live {
            let lp = model.log_probs(&with_prefix(ids.bos, &h.tokens))?;
            for (t, &p) in lp.iter().enumerate() {
                if !allowed(ids, t) || p == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                candidates.push(BeamHypothesis {
                    tokens,
                    log_prob: h.log_prob + p,
                    finished: t == ids.eos,
                });
            }
        }
        candidates.sort_by(by_logp_then_ids);
        candidates.truncate(cfg.beam_width);
        let (done, rest): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|h| h.finished);
        finished.extend(done);
        live = rest;
        if live.is_empty() {
            break;
        }
    }
    for h in live {
        finished.push(force_finish(model, ids, h)?);
    }
    if cfg.beam_width > 1 {
        let g = greedy(model, cfg.max_length, ids)?;
        if !finished.iter().any(|h| h.tokens == g.tokens) {
            finished.push(g);
        }
    }
    let alpha = cfg.length_penalty;
    finished.sort_by(|a, b| b.score(alpha).total_cmp(&a.score(alpha)).then_with(|| a.tokens.cmp(&b.tokens)));
    Ok(finished)
}

/// Replaces each `TAG i` word pair with the i-th surface recorded for that
/// tag. Pairs with unknown indices stay verbatim; punctuation glued to the
/// index (as in `PERSON 8?`) is kept.
pub fn substitute_entities(question: &str, map: &EntityMap) -> String {
    let words: Vec<&str> = question.split(' ').collect();
    let mut out: Vec<String> = Vec::with_capacity(words.len());
    let mut i = 0;
    while i < words.len() {
        if let (Some(tag), Some(next)) = (EntityTag::from_label(words[i]), words.get(i + 1)) {
            let digits = next.len() - next.trim_start_matches(|c: char| c.is_ascii_digit()).len();
            if digits > 0 {
                let surface = next[..digits].parse::<usize>().ok().and_then(|n| map.surface(tag, n));
                if let Some(surface) = surface {
                    out.push(format!("{surface}{}", &next[digits..]));
                    i += 2;
                    continue;
                }
            }
        }
        out.push(words[i].to_string());
        i += 1;
    }
    out.join(" ")
}

/// A generated question with what is needed to interpret it.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedQuestion {
    /// Post-processed question in tagged form.
    pub question: String,
    pub entity_map: EntityMap,
    /// WordPiece ids of the chosen hypothesis, `[EOS]` included.
    pub pieces: Vec<u32>,
    pub score: f64,
}

/// Preprocesses the pair, runs beam search and post-processes the best
/// hypothesis.
pub fn generate_question(
    model: &TransformerModel,
    token_map: &TokenMap,
    pre: &Preprocessor<'_>,
    passage: &str,
    answer: &str,
    cfg: &GenerationConfig,
) -> Result<GeneratedQuestion, GenerationError> {
    cfg.validate()?;
    let pair = pre.preprocess_pair(answer, passage)?;
    let mut input = pair.input.ids;
    let max_input = cfg.max_input.min(model.config().max_positions);
    truncate_input(&mut input, pair.answer_len, max_input, pre.vocab.special().separator);
    let scorer = EncodedModel::new(model, &token_map.to_model_seq(&input))?;
    let ranked = beam_search(&scorer, cfg, &DecodeIds::default())?;
    let best = ranked.into_iter().next().expect("beam search returns at least one hypothesis");
    let pieces = token_map.to_piece_seq(&best.tokens);
    let question = postprocess_question(&pre.vocab.sequence_from_ids(&pieces), pre.vocab);
    Ok(GeneratedQuestion {
        score: best.score(cfg.length_penalty),
        question,
        entity_map: pair.passage.entity_map,
        pieces,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub id: String,
    pub passage: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRecord {
    pub id: String,
    pub question_tagged: String,
    pub question_substituted: Option<String>,
    pub score: f64,
}

/// Generates for every request on a pool of `workers` threads; output
/// order follows input order.
pub fn generate_batch(
    model: &TransformerModel,
    token_map: &TokenMap,
    pre: &Preprocessor<'_>,
    requests: &[GenerateRequest],
    cfg: &GenerationConfig,
    workers: usize,
) -> Result<Vec<GenerateRecord>, GenerationError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| GenerationError::Pool(e.to_string()))?;
    pool.install(|| {
        requests
            .par_iter()
            .map(|r| {
                let g = generate_question(model, token_map, pre, &r.passage, &r.answer, cfg).map_err(|e| {
                    GenerationError::Record {
                        id: r.id.clone(),
                        source: Box::new(e),
                    }
                })?;
                Ok(GenerateRecord {
                    id: r.id.clone(),
                    question_substituted: cfg.substitute.then(|| substitute_entities(&g.question, &g.entity_map)),
                    question_tagged: g.question,
                    score: g.score,
                })
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token table keyed by prefix length.
    struct Table(Vec<Vec<f64>>);

    impl StepModel for Table {
        fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
            let row = &self.0[(prefix.len() - 1).min(self.0.len() - 1)];
            Ok(row.iter().map(|p| p.ln()).collect())
        }
    }

    fn ids() -> DecodeIds {
        DecodeIds {
            bos: 9,
            eos: 0,
            banned: vec![],
        }
    }

    #[test]
    fn greedy_follows_argmax_and_forces_eos() {
        let m = Table(vec![vec![0.1, 0.6, 0.3], vec![0.2, 0.2, 0.6]]);
        let g = greedy(&m, 2, &ids()).unwrap();
        assert_eq!(g.tokens, [1, 2, 0]);
        assert!(g.finished);
        let expected = 0.6f64.ln() + 0.6f64.ln() + 0.2f64.ln();
        assert!((g.log_prob - expected).abs() < 1e-12);
    }

    #[test]
    fn max_length_one_ranks_single_tokens() {
        let m = Table(vec![vec![0.1, 0.6, 0.3], vec![0.5, 0.25, 0.25]]);
        let cfg = GenerationConfig {
            beam_width: 3,
            max_length: 1,
            length_penalty: 0.0,
            ..GenerationConfig::default()
        };
        let out = beam_search(&m, &cfg, &ids()).unwrap();
        let firsts: Vec<usize> = out.iter().map(|h| h.tokens[0]).collect();
        assert_eq!(firsts, [1, 2, 0]);
        assert!(out.iter().all(|h| h.finished && *h.tokens.last().unwrap() == 0));
    }

    #[test]
    fn banned_tokens_never_appear() {
        let m = Table(vec![vec![0.1, 0.8, 0.1]]);
        let d = DecodeIds {
            banned: vec![1],
            ..ids()
        };
        let out = beam_search(&m, &GenerationConfig::default(), &d).unwrap();
        assert!(out.iter().all(|h| !h.tokens.contains(&1)));
    }

    #[test]
    fn invalid_configs_rejected() {
        let m = Table(vec![vec![1.0]]);
        for cfg in [
            GenerationConfig {
                beam_width: 0,
                ..GenerationConfig::default()
            },
            GenerationConfig {
                length_penalty: -1.0,
                ..GenerationConfig::default()
            },
        ] {
            assert!(beam_search(&m, &cfg, &ids()).is_err());
        }
    }

    #[test]
    fn substitution() {
        let mut map = EntityMap::new();
        for i in 0..9 {
            map.get_or_insert(EntityTag::Person, &format!("p{i}"));
        }
        map.get_or_insert(EntityTag::Org, "acme");
        assert_eq!(substitute_entities("where was PERSON 8 born?", &map), "where was p8 born?");
        assert_eq!(substitute_entities("who founded ORG 0?", &map), "who founded acme?");
        assert_eq!(substitute_entities("who founded ORG 7?", &map), "who founded ORG 7?");
        assert_eq!(substitute_entities("what is it?", &map), "what is it?");
        assert_eq!(substitute_entities("ORG", &map), "ORG");
    }
}
