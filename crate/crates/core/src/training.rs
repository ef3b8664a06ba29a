//! Teacher-forced cross-entropy training: Adam with inverse-square-root
//! warmup, global-norm clipping, bucket-proportional batch sampling,
//! checkpoints and a JSON-lines metrics log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape};
use crate::squad::InvertedExample;
use crate::tensor::{Tensor, TensorError};
use crate::transformer::{read_container, write_container, ModelConfig, ModelError, TokenMap, TransformerModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training data is empty")]
    EmptyDataset,
    #[error("non-finite {what} at step {step} (bucket {bucket}, lr {lr:e})")]
    NonFinite {
        what: &'static str,
        step: u64,
        bucket: usize,
        lr: f64,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            warmup_steps: 400,
            batch_size: 32,
            total_steps: 1000,
            checkpoint_interval: 100,
            seed: 0,
            clip_norm: 1.0,
            label_smoothing: 0.0,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.warmup_steps == 0 || self.batch_size == 0 || self.checkpoint_interval == 0 {
            return bad("warmup_steps, batch_size and checkpoint_interval must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("epsilon must be positive and weight_decay non-negative");
        }
        Ok(())
    }

    /// `learning_rate · min(step / warmup, √(warmup / step))` for the
    /// 1-based step about to run.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.learning_rate * (s / w).min((w / s).sqrt())
    }
}

/// One training pair in model ids. `target` is `[BOS] question [EOS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seq2SeqExample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl Seq2SeqExample {
    pub fn from_inverted(ex: &InvertedExample, map: &TokenMap) -> Self {
        Seq2SeqExample {
            input: map.to_model_seq(&ex.input),
            target: map.to_model_seq(&ex.target),
        }
    }

    fn decoder_input(&self) -> &[usize] {
        &self.target[..self.target.len() - 1]
    }

    fn labels(&self, pad: usize) -> impl Iterator<Item = Option<usize>> + '_ {
        self.target[1..].iter().map(move |&t| (t != pad).then_some(t))
    }
}

/// Examples drawn from one bucket for a single update.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub bucket: usize,
    pub examples: Vec<&'a Seq2SeqExample>,
}

/// Optimizer and progress state saved with every checkpoint. The per-step
/// random stream is derived from `seed` and `step`, so these two fields are
/// the whole RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub best_loss: Option<f64>,
    pub seed: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    step: u64,
    best_loss: Option<f64>,
    seed: u64,
}

impl TrainState {
    pub fn new(store: &ParamStore, seed: u64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
        TrainState {
            step: 0,
            best_loss: None,
            seed,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    pub fn save(&self, path: &Path, store: &ParamStore) -> Result<(), TrainError> {
        let header = serde_json::to_string(&StateHeader {
            step: self.step,
            best_loss: self.best_loss,
            seed: self.seed,
        })
        .expect("state header serializes");
        let names: Vec<(String, String)> = store
            .iter()
            .map(|(_, p)| (format!("m.{}", p.name()), format!("v.{}", p.name())))
            .collect();
        let mut tensors = Vec::with_capacity(2 * names.len());
        for (i, (mn, vn)) in names.iter().enumerate() {
            tensors.push((mn.as_str(), &self.m[i]));
            tensors.push((vn.as_str(), &self.v[i]));
        }
        Ok(write_container(path, &header, &tensors)?)
    }

    /// Loads state saved for a model with the same parameter layout.
    pub fn load(path: &Path, store: &ParamStore) -> Result<Self, TrainError> {
        let bad = |message: String| TrainError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let (header, tensors) = read_container(path)?;
        let h: StateHeader = serde_json::from_str(&header).map_err(|e| bad(e.to_string()))?;
        if tensors.len() != 2 * store.len() {
            return Err(bad(format!("{} moment tensors for {} parameters", tensors.len(), store.len())));
        }
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for ((_, p), pair) in store.iter().zip(tensors.chunks_exact(2)) {
            let expect = [format!("m.{}", p.name()), format!("v.{}", p.name())];
            for ((name, t), want) in pair.iter().zip(&expect) {
                if name != want || t.shape() != p.value().shape() {
                    return Err(bad(format!("expected {want} with shape {:?}, found {name}", p.value().shape())));
                }
            }
            m.push(pair[0].1.clone());
            v.push(pair[1].1.clone());
        }
        Ok(TrainState {
            step: h.step,
            best_loss: h.best_loss,
            seed: h.seed,
            m,
            v,
        })
    }
}

/// Outcome of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub tokens: usize,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tokens_per_sec: f64,
}

/// Mean cross-entropy of `logits` against `targets`, skipping `pad_id`.
pub fn sequence_loss(
    tape: &mut Tape,
    logits: crate::autodiff::Var,
    targets: &[usize],
    pad_id: usize,
    smoothing: f64,
) -> Result<crate::autodiff::Var, TensorError> {
    let t: Vec<Option<usize>> = targets.iter().map(|&t| (t != pad_id).then_some(t)).collect();
    tape.cross_entropy(logits, &t, smoothing)
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        store.scale_grads(max_norm / norm);
    }
    norm
}

/// One Adam update with bias correction at 1-based step `t`.
pub fn adam_update(store: &mut ParamStore, state: &mut TrainState, lr: f64, t: u64, config: &TrainConfig) {
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let (value, grad) = store.value_and_grad_mut(id);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((x, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + config.epsilon) + config.weight_decay * *x;
            *x -= lr * update;
        }
    }
}

/// Forward, backward, clip and Adam update on one batch.
pub fn train_step(
    model: &mut TransformerModel,
    batch: &Batch<'_>,
    state: &mut TrainState,
    config: &TrainConfig,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<StepStats, TrainError> {
    if batch.examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let t = state.step + 1;
    let lr = config.lr_at(t);
    let non_finite = |what| TrainError::NonFinite {
        what,
        step: t,
        bucket: batch.bucket,
        lr,
    };
    let pad = model.config().pad_id;
    let inputs: Vec<&[usize]> = batch.examples.iter().map(|e| e.input.as_slice()).collect();
    let dec: Vec<&[usize]> = batch.examples.iter().map(|e| e.decoder_input()).collect();
    let labels: Vec<Option<usize>> = batch.examples.iter().flat_map(|e| e.labels(pad)).collect();
    let tokens = inputs.iter().map(|s| s.len()).sum::<usize>() + labels.len();

    let mut tape = Tape::new();
    let logits = match model.forward_batch(&mut tape, &inputs, &dec, dropout_rng) {
        Err(ModelError::Tensor(TensorError::NonFinite { .. })) => return Err(non_finite("activation")),
        other => other?,
    };
    let loss = match tape.cross_entropy(logits, &labels, config.label_smoothing) {
        Err(TensorError::NonFinite { .. }) => return Err(non_finite("loss")),
        other => other?,
    };
    let loss_value = tape.value(loss).data()[0];
    tape.backward(loss, model.store_mut())?;
    drop(tape);
    let grad_norm = clip_gradients(model.store_mut(), config.clip_norm);
    if !grad_norm.is_finite() {
        return Err(non_finite("gradient"));
    }
    adam_update(model.store_mut(), state, lr, t, config);
    state.step = t;
    if state.best_loss.is_none_or(|b| loss_value < b) {
        state.best_loss = Some(loss_value);
    }
    Ok(StepStats {
        loss: loss_value,
        lr,
        grad_norm,
        tokens,
    })
}

/// Random stream for 1-based step `step`, independent of earlier steps.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Picks a bucket with probability proportional to its size, then up to
/// `batch_size` distinct examples from it.
pub fn sample_batch<'a>(
    buckets: &'a [Vec<Seq2SeqExample>],
    batch_size: usize,
    rng: &mut impl rand::Rng,
) -> Result<Batch<'a>, TrainError> {
    let weights: Vec<usize> = buckets.iter().map(Vec::len).collect();
    let dist = WeightedIndex::new(&weights).map_err(|_| TrainError::EmptyDataset)?;
    let bucket = dist.sample(rng);
    let pool = &buckets[bucket];
    let examples = sample(rng, pool.len(), batch_size.min(pool.len()))
        .into_iter()
        .map(|i| &pool[i])
        .collect();
    Ok(Batch { bucket, examples })
}

/// Where [`train`] writes checkpoints and metrics.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub token_map: Option<TokenMap>,
}

impl TrainOutput {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub final_loss: Option<f64>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Runs steps until `config.total_steps`, continuing from `state`. A run
/// that starts at step 0 first writes an initial checkpoint.
pub fn train(
    model: &mut TransformerModel,
    buckets: &[Vec<Seq2SeqExample>],
    config: &TrainConfig,
    state: &mut TrainState,
    output: Option<&TrainOutput>,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainSummary, TrainError> {
    config.validate()?;
    if buckets.iter().all(Vec::is_empty) {
        return Err(TrainError::EmptyDataset);
    }
    let mut log = match output {
        Some(out) => {
            fs::create_dir_all(&out.dir).map_err(io_err(&out.dir))?;
            Some(open_metrics(&out.metrics_path(), state.step)?)
        }
        None => None,
    };
    let mut summary = TrainSummary {
        steps_run: 0,
        final_loss: None,
        last_checkpoint: None,
    };
    if let (Some(out), 0) = (output, state.step) {
        summary.last_checkpoint = Some(save_checkpoint(&out.checkpoint_dir(), model, state, config, out.token_map.as_ref())?);
    }
    let use_dropout = model.config().dropout > 0.0;
    while state.step < config.total_steps {
        let started = Instant::now();
        let mut rng = step_rng(config.seed, state.step + 1);
        let batch = sample_batch(buckets, config.batch_size, &mut rng)?;
        let dropout_rng: Option<&mut dyn RngCore> = if use_dropout { Some(&mut rng) } else { None };
        let stats = train_step(model, &batch, state, config, dropout_rng)?;
        let secs = started.elapsed().as_secs_f64().max(1e-9);
        let record = StepRecord {
            step: state.step,
            loss: stats.loss,
            lr: stats.lr,
            tokens_per_sec: stats.tokens as f64 / secs,
        };
        if let (Some((path, w)), Some(_)) = (log.as_mut(), output) {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(io_err(path))?;
        }
        progress(&record);
        summary.steps_run += 1;
        summary.final_loss = Some(stats.loss);
        if let Some(out) = output {
            if state.step.is_multiple_of(config.checkpoint_interval) || state.step == config.total_steps {
                summary.last_checkpoint =
                    Some(save_checkpoint(&out.checkpoint_dir(), model, state, config, out.token_map.as_ref())?);
            }
        }
    }
    Ok(summary)
}

/// Opens the metrics log, keeping only records up to `resume_step`.
fn open_metrics(path: &Path, resume_step: u64) -> Result<(PathBuf, BufWriter<File>), TrainError> {
    let mut kept = Vec::new();
    if resume_step > 0 && path.exists() {
        let f = File::open(path).map_err(io_err(path))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(io_err(path))?;
            match serde_json::from_str::<StepRecord>(&line) {
                Ok(r) if r.step <= resume_step => kept.push(line),
                _ => {}
            }
        }
    }
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(io_err(path))?;
    for line in &kept {
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok((path.to_path_buf(), BufWriter::new(f)))
}

/// Contents of `config.json` in a checkpoint directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const STATE_FILE: &str = "train_state.bin";

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:06}")
}

/// Writes `step-NNNNNN/` under `dir` via a temporary directory renamed
/// into place. Returns the final path.
pub fn save_checkpoint(
    dir: &Path,
    model: &TransformerModel,
    state: &TrainState,
    config: &TrainConfig,
    token_map: Option<&TokenMap>,
) -> Result<PathBuf, TrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = checkpoint_name(state.step);
    let tmp = dir.join(format!("{name}.tmp"));
    let dest = dir.join(&name);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir(&tmp).map_err(io_err(&tmp))?;
    let cfg = CheckpointConfig {
        model: model.config().clone(),
        train: config.clone(),
    };
    let json = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
    let cfg_path = tmp.join(CONFIG_FILE);
    fs::write(&cfg_path, json).map_err(io_err(&cfg_path))?;
    model.save(&tmp.join(PARAMS_FILE), token_map)?;
    state.save(&tmp.join(STATE_FILE), model.store())?;
    if dest.exists() {
        fs::remove_dir_all(&dest).map_err(io_err(&dest))?;
    }
    fs::rename(&tmp, &dest).map_err(io_err(&dest))?;
    Ok(dest)
}

pub struct Checkpoint {
    pub model: TransformerModel,
    pub token_map: Option<TokenMap>,
    pub config: TrainConfig,
    pub state: TrainState,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let cfg_path = path.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let cfg: CheckpointConfig = serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint {
        path: cfg_path.clone(),
        message: e.to_string(),
    })?;
    let (model, token_map) = TransformerModel::load(&path.join(PARAMS_FILE))?;
    if model.config() != &cfg.model {
        return Err(TrainError::Checkpoint {
            path: path.to_path_buf(),
            message: "config.json disagrees with the parameter file".into(),
        });
    }
    let state = TrainState::load(&path.join(STATE_FILE), model.store())?;
    Ok(Checkpoint {
        model,
        token_map,
        config: cfg.train,
        state,
    })
}

/// Highest-step complete checkpoint under `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>, TrainError> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        let Some(step) = name.to_str().and_then(|n| n.strip_prefix("step-")).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Teacher-forced accuracy counts: positions whose argmax equals the
/// target, over all non-`[PAD]` target positions.
pub fn token_accuracy(model: &TransformerModel, examples: &[Seq2SeqExample]) -> Result<(usize, usize), TrainError> {
    let pad = model.config().pad_id;
    let counts = examples
        .par_chunks(4)
        .map(|chunk| -> Result<(usize, usize), TrainError> {
            let inputs: Vec<&[usize]> = chunk.iter().map(|e| e.input.as_slice()).collect();
            let dec: Vec<&[usize]> = chunk.iter().map(|e| e.decoder_input()).collect();
            let mut tape = Tape::new();
            let logits = model.forward_batch(&mut tape, &inputs, &dec, None)?;
            let logits = tape.value(logits);
            let mut hit = 0;
            let mut total = 0;
            for (row, label) in chunk.iter().flat_map(|e| e.labels(pad)).enumerate() {
                let Some(label) = label else { continue };
                total += 1;
                if argmax(logits.row(row)) == label {
                    hit += 1;
                }
            }
            Ok((hit, total))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(counts.into_iter().fold((0, 0), |(a, b), (c, d)| (a + c, b + d)))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
