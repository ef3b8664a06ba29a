//! Subcommand implementations.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use qgen_core::evaluation::{corpus_report, QuestionPair};
use qgen_core::generation::{generate_batch, GenerateRequest};
use qgen_core::preprocess::{postprocess_question, EntityTag, GazetteerTagger, Preprocessor, StopWords};
use qgen_core::resources;
use qgen_core::squad::{bucket_by_length, invert_all, load_squad, read_examples, write_examples, InvertConfig, DEFAULT_BUCKETS};
use qgen_core::training::{
    latest_checkpoint, load_checkpoint, train as run_training, Seq2SeqExample, StepRecord, TrainOutput, TrainState,
};
use qgen_core::transformer::{TokenMap, TransformerModel, MODEL_PAD};
use qgen_core::wordpiece::{SpecialTokens, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{require_file, RunConfig};
use crate::error::CliError;

struct Resources {
    vocab: Vocabulary,
    gazetteer: GazetteerTagger,
    stopwords: StopWords,
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary, CliError> {
    match &cfg.paths.vocab {
        Some(p) => {
            require_file(p, "vocabulary")?;
            Ok(Vocabulary::load_with(p, SpecialTokens::default())?)
        }
        None => Ok(resources::vocabulary()?),
    }
}

fn load_resources(cfg: &RunConfig) -> Result<Resources, CliError> {
    for (path, what) in [
        (&cfg.paths.vocab, "vocabulary"),
        (&cfg.paths.gazetteer, "gazetteer"),
        (&cfg.paths.stopwords, "stop-word list"),
    ] {
        if let Some(p) = path {
            require_file(p, what)?;
        }
    }
    let vocab = load_vocab(cfg)?;
    let gazetteer = match &cfg.paths.gazetteer {
        Some(p) => GazetteerTagger::load(p)?,
        None => resources::gazetteer()?,
    };
    let stopwords = match &cfg.paths.stopwords {
        Some(p) => StopWords::load(p)?,
        None => resources::stopwords(),
    };
    Ok(Resources {
        vocab,
        gazetteer,
        stopwords,
    })
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers())
        .build()
        .map_err(|e| CliError::Input(format!("cannot start {} workers: {e}", cfg.workers())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("row serializes");
        writeln!(w, "{line}").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(row);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Default bucket bounds below the configured limits, closed by a bucket
/// at exactly those limits.
fn bucket_bounds(max_input: usize, max_target: usize) -> Vec<(usize, usize)> {
    let mut b: Vec<(usize, usize)> = DEFAULT_BUCKETS
        .iter()
        .copied()
        .filter(|&(i, t)| i < max_input && t <= max_target)
        .collect();
    b.push((max_input, max_target));
    b
}

#[derive(Serialize, Deserialize)]
struct ReferenceRow {
    id: String,
    question: String,
}

#[derive(Serialize)]
struct BucketSummary {
    max_input: usize,
    max_target: usize,
    examples: usize,
}

#[derive(Serialize)]
struct PreprocessSummary {
    records: usize,
    examples: usize,
    input_truncated: usize,
    target_truncated: usize,
    truncation_rate: f64,
    buckets: Vec<BucketSummary>,
    /// Examples whose passage has at least one entity of each tag.
    tag_coverage: BTreeMap<String, usize>,
    /// Entities found per tag, summed over examples.
    entities: BTreeMap<String, usize>,
}

pub fn preprocess(cfg: &RunConfig) -> Result<(), CliError> {
    let squad = cfg
        .paths
        .squad
        .as_ref()
        .ok_or_else(|| CliError::Input("no SQuAD file given (set paths.squad)".into()))?;
    require_file(squad, "SQuAD file")?;
    let res = load_resources(cfg)?;
    let records = load_squad(squad)?;
    if records.is_empty() {
        eprintln!("warning: {} contains no questions", squad.display());
    }
    let pre = Preprocessor::new(&res.gazetteer, &res.stopwords, &res.vocab);
    let inv_cfg = InvertConfig {
        max_input: cfg.preprocess.max_input,
        max_target: cfg.preprocess.max_target,
    };
    let inversions = pool(cfg)?.install(|| invert_all(&records, &pre, inv_cfg))?;

    let out = &cfg.paths.output_dir;
    create_dir(out)?;
    let examples: Vec<_> = inversions.iter().map(|i| i.example.clone()).collect();
    let examples_path = cfg.examples_path();
    if let Some(parent) = examples_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_examples(&examples_path, &examples)?;

    let references: Vec<ReferenceRow> = inversions
        .iter()
        .map(|i| ReferenceRow {
            id: i.example.id.clone(),
            question: postprocess_question(&res.vocab.sequence_from_ids(&i.example.target), &res.vocab),
        })
        .collect();
    write_jsonl(&out.join("references.jsonl"), &references)?;

    let by_id: HashMap<&str, &qgen_core::squad::SquadRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let requests: Vec<GenerateRequest> = inversions
        .iter()
        .map(|i| GenerateRequest {
            id: i.example.id.clone(),
            passage: by_id[i.example.id.as_str()].passage.to_string(),
            answer: i.answer.text.clone(),
        })
        .collect();
    write_jsonl(&out.join("generate_input.jsonl"), &requests)?;

    let buckets = bucket_by_length(&examples, &bucket_bounds(inv_cfg.max_input, inv_cfg.max_target))?;
    let mut tag_coverage = BTreeMap::new();
    let mut entities = BTreeMap::new();
    for tag in EntityTag::ALL {
        let counts: Vec<usize> = inversions.iter().map(|i| i.entity_map.count(tag)).collect();
        tag_coverage.insert(tag.label().to_string(), counts.iter().filter(|&&c| c > 0).count());
        entities.insert(tag.label().to_string(), counts.iter().sum());
    }
    let input_truncated = inversions.iter().filter(|i| i.input_truncated).count();
    let target_truncated = inversions.iter().filter(|i| i.target_truncated).count();
    let summary = PreprocessSummary {
        records: records.len(),
        examples: examples.len(),
        input_truncated,
        target_truncated,
        truncation_rate: if examples.is_empty() {
            0.0
        } else {
            (input_truncated + target_truncated) as f64 / (2 * examples.len()) as f64
        },
        buckets: buckets
            .iter()
            .map(|b| BucketSummary {
                max_input: b.max_input,
                max_target: b.max_target,
                examples: b.examples.len(),
            })
            .collect(),
        tag_coverage,
        entities,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "{} examples from {} records written to {} ({} inputs, {} targets truncated)",
        examples.len(),
        records.len(),
        examples_path.display(),
        input_truncated,
        target_truncated
    );
    Ok(())
}

fn remove_stale_checkpoints(dir: &Path) -> Result<(), CliError> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        if entry.file_name().to_string_lossy().starts_with("step-") {
            let p = entry.path();
            fs::remove_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        }
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    let examples_path = cfg.examples_path();
    require_file(&examples_path, "example cache")?;
    let examples = read_examples(&examples_path)?;
    if examples.is_empty() {
        return Err(CliError::Input(format!("{} holds no examples", examples_path.display())));
    }
    let output = cfg.paths.checkpoint_dir.clone();
    let checkpoints = output.join("checkpoints");
    let resume_from = if resume { latest_checkpoint(&checkpoints)? } else { None };

    let (mut model, token_map, mut state) = match resume_from {
        Some(path) => {
            let ck = load_checkpoint(&path)?;
            let map = ck
                .token_map
                .ok_or_else(|| CliError::Input(format!("{} has no token map", path.display())))?;
            if ck.state.seed != cfg.seed {
                return Err(CliError::Input(format!(
                    "checkpoint was trained with seed {}, not {}",
                    ck.state.seed, cfg.seed
                )));
            }
            eprintln!("resuming from {} at step {}", path.display(), ck.state.step);
            (ck.model, map, ck.state)
        }
        None => {
            remove_stale_checkpoints(&checkpoints)?;
            let vocab = load_vocab(cfg)?;
            let tag_ids: Vec<u32> = EntityTag::ALL.iter().filter_map(|t| vocab.id(t.label())).collect();
            let map = TokenMap::build(
                vocab.special(),
                &tag_ids,
                examples.iter().flat_map(|e| [e.input.as_slice(), e.target.as_slice()]),
            );
            let mut model_cfg = cfg.model.clone();
            model_cfg.vocab_size = map.len();
            model_cfg.pad_id = MODEL_PAD;
            let model = TransformerModel::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            let state = TrainState::new(model.store(), cfg.seed);
            (model, map, state)
        }
    };
    let max_pos = model.config().max_positions;
    if let Some(e) = examples.iter().find(|e| e.input.len() > max_pos || e.target.len() > max_pos) {
        return Err(CliError::Input(format!(
            "example {} is longer than model.max_positions = {max_pos}",
            e.id
        )));
    }
    let bounds = bucket_bounds(
        examples.iter().map(|e| e.input.len()).max().unwrap_or(1).max(cfg.preprocess.max_input),
        examples.iter().map(|e| e.target.len()).max().unwrap_or(1).max(cfg.preprocess.max_target),
    );
    let buckets: Vec<Vec<Seq2SeqExample>> = bucket_by_length(&examples, &bounds)?
        .into_iter()
        .map(|b| b.examples.iter().map(|e| Seq2SeqExample::from_inverted(e, &token_map)).collect())
        .collect();
    eprintln!(
        "{} examples, model vocabulary {}, {} parameters",
        examples.len(),
        token_map.len(),
        model.store().num_scalars()
    );
    let out = TrainOutput {
        dir: output.clone(),
        token_map: Some(token_map),
    };
    let interval = cfg.train.checkpoint_interval;
    let progress = |r: &StepRecord| {
        if r.step == 1 || r.step.is_multiple_of(interval) {
            eprintln!(
                "step {:>7}  loss {:.4}  lr {:.3e}  {:.0} tok/s",
                r.step, r.loss, r.lr, r.tokens_per_sec
            );
        }
    };
    let summary = pool(cfg)?.install(|| run_training(&mut model, &buckets, &cfg.train, &mut state, Some(&out), progress))?;
    match summary.final_loss {
        Some(loss) => println!("trained to step {} (final loss {loss:.4})", state.step),
        None => println!("no steps run; model at step {}", state.step),
    }
    if let Some(p) = summary.last_checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

pub fn generate(cfg: &RunConfig, input: &Path, output: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    require_file(input, "generation input")?;
    let checkpoint = match checkpoint {
        Some(p) => p,
        None => latest_checkpoint(&cfg.paths.checkpoint_dir.join("checkpoints"))?.ok_or_else(|| {
            CliError::Input(format!("no checkpoint under {}", cfg.paths.checkpoint_dir.display()))
        })?,
    };
    if !checkpoint.is_dir() {
        return Err(CliError::Io(format!("checkpoint not found: {}", checkpoint.display())));
    }
    let ck = load_checkpoint(&checkpoint)?;
    let token_map = ck
        .token_map
        .ok_or_else(|| CliError::Input(format!("{} has no token map", checkpoint.display())))?;
    let requests: Vec<GenerateRequest> = read_jsonl(input)?;
    let mut seen = HashSet::new();
    if let Some(dup) = requests.iter().find(|r| !seen.insert(r.id.as_str())) {
        return Err(CliError::Input(format!("duplicate id {:?} in {}", dup.id, input.display())));
    }
    let res = load_resources(cfg)?;
    let pre = Preprocessor::new(&res.gazetteer, &res.stopwords, &res.vocab);
    eprintln!("generating {} questions with {}", requests.len(), checkpoint.display());
    let records = generate_batch(&ck.model, &token_map, &pre, &requests, &cfg.generation, cfg.workers())?;
    let output = output.unwrap_or_else(|| cfg.paths.output_dir.join("generated.jsonl"));
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_jsonl(&output, &records)?;
    println!("{} questions written to {}", records.len(), output.display());
    Ok(())
}

/// Reads `{id, <field>}` rows, taking the first field present.
fn read_questions(path: &Path, fields: &[&str]) -> Result<Vec<(String, String)>, CliError> {
    let rows: Vec<serde_json::Value> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    rows.into_iter()
        .enumerate()
        .map(|(i, row)| {
            let bad = |m: &str| CliError::Input(format!("{} row {}: {m}", path.display(), i + 1));
            let id = row.get("id").and_then(|v| v.as_str()).ok_or_else(|| bad("missing string `id`"))?;
            let q = fields
                .iter()
                .find_map(|f| row.get(*f).and_then(|v| v.as_str()))
                .ok_or_else(|| bad(&format!("missing string `{}`", fields.join("` or `"))))?;
            if !seen.insert(id.to_string()) {
                return Err(bad(&format!("duplicate id {id:?}")));
            }
            Ok((id.to_string(), q.to_string()))
        })
        .collect()
}

pub fn evaluate(cfg: &RunConfig, references: &Path, hypotheses: &Path) -> Result<(), CliError> {
    require_file(references, "references")?;
    require_file(hypotheses, "hypotheses")?;
    let refs = read_questions(references, &["question"])?;
    let hyps = read_questions(hypotheses, &["question_tagged", "question"])?;
    let hyp_by_id: HashMap<&str, &str> = hyps.iter().map(|(i, q)| (i.as_str(), q.as_str())).collect();
    let ref_ids: HashSet<&str> = refs.iter().map(|(i, _)| i.as_str()).collect();
    let mut unmatched: Vec<&str> = refs
        .iter()
        .map(|(i, _)| i.as_str())
        .filter(|i| !hyp_by_id.contains_key(i))
        .chain(hyps.iter().map(|(i, _)| i.as_str()).filter(|i| !ref_ids.contains(i)))
        .collect();
    if !unmatched.is_empty() {
        let total = unmatched.len();
        unmatched.truncate(10);
        return Err(CliError::Input(format!(
            "{total} ids appear in only one of the inputs: {}{}",
            unmatched.join(", "),
            if total > 10 { ", ..." } else { "" }
        )));
    }
    let pairs: Vec<QuestionPair> = refs
        .iter()
        .map(|(id, q)| QuestionPair {
            id: id.clone(),
            reference: q.clone(),
            hypothesis: hyp_by_id[id.as_str()].to_string(),
        })
        .collect();
    let report = corpus_report(&pairs)?;
    let out = &cfg.paths.output_dir;
    create_dir(out)?;
    report.write_json(&out.join("report.json"))?;
    report.write_pairs_csv(&out.join("pairs.csv"))?;
    report.write_text(&out.join("report.txt"), 15)?;
    print!("{}", report.render_text(15));
    Ok(())
}

pub fn show_config(cfg: &RunConfig) -> Result<(), CliError> {
    let mut table = toml::Table::try_from(cfg).map_err(|e| CliError::Input(e.to_string()))?;
    // `train.seed` always mirrors the top-level seed and is rejected on input.
    if let Some(train) = table.get_mut("train").and_then(|t| t.as_table_mut()) {
        train.remove("seed");
    }
    print!("{}", toml::to_string_pretty(&table).map_err(|e| CliError::Input(e.to_string()))?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_bounds_close_at_the_limits() {
        assert_eq!(bucket_bounds(512, 48), DEFAULT_BUCKETS.to_vec());
        assert_eq!(bucket_bounds(100, 20), vec![(64, 16), (100, 20)]);
        assert_eq!(bucket_bounds(600, 60), vec![(64, 16), (128, 24), (256, 32), (512, 48), (600, 60)]);
        assert_eq!(bucket_bounds(10, 5), vec![(10, 5)]);
    }
}
