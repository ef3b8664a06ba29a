//! Run configuration: a TOML file merged with dotted command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use qgen_core::generation::GenerationConfig;
use qgen_core::squad::{DEFAULT_MAX_INPUT, DEFAULT_MAX_TARGET};
use qgen_core::training::TrainConfig;
use qgen_core::transformer::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Input and output locations. Unset resource paths use the bundled files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub squad: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub gazetteer: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Example cache read by `train`; defaults to `<output_dir>/examples.jsonl`.
    pub examples: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            squad: None,
            vocab: None,
            gazetteer: None,
            stopwords: None,
            output_dir: PathBuf::from("out"),
            examples: None,
            checkpoint_dir: PathBuf::from("out/model"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSettings {
    pub max_input: usize,
    pub max_target: usize,
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        PreprocessSettings {
            max_input: DEFAULT_MAX_INPUT,
            max_target: DEFAULT_MAX_TARGET,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    /// Seeds model initialization, batch sampling and dropout.
    pub seed: u64,
    /// Worker threads for preprocessing and generation; 0 uses every core.
    pub workers: usize,
    pub paths: Paths,
    pub preprocess: PreprocessSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
}


impl RunConfig {
    pub fn examples_path(&self) -> PathBuf {
        self.paths
            .examples
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("examples.jsonl"))
    }

    pub fn workers(&self) -> usize {
        match self.workers {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

macro_rules! config_flags {
    ($($field:ident: $ty:ty => $key:literal, $help:literal;)*) => {
        /// Flags overriding configuration keys one-to-one.
        #[derive(Args, Clone, Debug, Default)]
        pub struct ConfigFlags {
            /// TOML configuration file; flags override its values.
            #[arg(long, value_name = "FILE")]
            pub config: Option<PathBuf>,
            $(
                #[arg(long = $key, help = $help)]
                pub $field: Option<$ty>,
            )*
        }

        impl ConfigFlags {
            fn overrides(&self) -> Result<Vec<(&'static str, toml::Value)>, CliError> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        let value = toml::Value::try_from(v)
                            .map_err(|e| CliError::Input(format!("--{}: {e}", $key)))?;
                        out.push(($key, value));
                    }
                )*
                Ok(out)
            }
        }
    };
}

config_flags! {
    seed: u64 => "seed", "Random seed [default: 0]";
    workers: usize => "workers", "Worker threads, 0 for all cores [default: 0]";
    squad: PathBuf => "paths.squad", "SQuAD v1.1 JSON file to preprocess";
    vocab: PathBuf => "paths.vocab", "WordPiece vocabulary, one token per line [default: bundled]";
    gazetteer: PathBuf => "paths.gazetteer", "Entity gazetteer TSV (surface, tag) [default: bundled]";
    stopwords: PathBuf => "paths.stopwords", "Stop-word list [default: bundled]";
    output_dir: PathBuf => "paths.output_dir", "Directory for preprocessing and evaluation outputs [default: out]";
    examples: PathBuf => "paths.examples", "Example cache [default: <output_dir>/examples.jsonl]";
    checkpoint_dir: PathBuf => "paths.checkpoint_dir", "Directory for checkpoints and metrics [default: out/model]";
    max_input: usize => "preprocess.max_input", "Longest model input in WordPiece ids [default: 512]";
    max_target: usize => "preprocess.max_target", "Longest target including [BOS]/[EOS] [default: 48]";
    d_model: usize => "model.d_model", "Model width [default: 128]";
    num_heads: usize => "model.num_heads", "Attention heads [default: 4]";
    encoder_layers: usize => "model.encoder_layers", "Encoder layers [default: 2]";
    decoder_layers: usize => "model.decoder_layers", "Decoder layers [default: 2]";
    ffn_dim: usize => "model.ffn_dim", "Feed-forward inner width [default: 512]";
    max_positions: usize => "model.max_positions", "Positional table size [default: 512]";
    dropout: f64 => "model.dropout", "Dropout rate during training [default: 0.1]";
    tie_embeddings: bool => "model.tie_embeddings", "Share input and output embeddings [default: true]";
    learning_rate: f64 => "train.learning_rate", "Peak learning rate, reached after warmup [default: 0.001]";
    warmup_steps: u64 => "train.warmup_steps", "Linear warmup steps [default: 400]";
    batch_size: usize => "train.batch_size", "Sequences per step [default: 32]";
    total_steps: u64 => "train.total_steps", "Step to train up to [default: 1000]";
    checkpoint_interval: u64 => "train.checkpoint_interval", "Steps between checkpoints [default: 100]";
    clip_norm: f64 => "train.clip_norm", "Global gradient-norm clip [default: 1.0]";
    label_smoothing: f64 => "train.label_smoothing", "Label smoothing weight [default: 0.0]";
    beta1: f64 => "train.beta1", "Adam beta1 [default: 0.9]";
    beta2: f64 => "train.beta2", "Adam beta2 [default: 0.98]";
    epsilon: f64 => "train.epsilon", "Adam epsilon [default: 1e-9]";
    weight_decay: f64 => "train.weight_decay", "Decoupled weight decay [default: 0.0]";
    beam_width: usize => "generation.beam_width", "Beam width [default: 4]";
    max_length: usize => "generation.max_length", "Most tokens generated before [EOS] [default: 48]";
    length_penalty: f64 => "generation.length_penalty", "Length-normalization exponent alpha [default: 0.6]";
    gen_max_input: usize => "generation.max_input", "Longest input at generation time [default: 512]";
    substitute: bool => "generation.substitute", "Also emit questions with entity surfaces restored [default: false]";
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut t = table;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Input(format!("config key {p} is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Reads the config file (if any), applies flag overrides and validates.
pub fn load(flags: &ConfigFlags) -> Result<RunConfig, CliError> {
    let mut table = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    if table.get("train").and_then(|t| t.get("seed")).is_some() {
        return Err(CliError::Input("set the top-level `seed`, not `train.seed`".into()));
    }
    for (key, value) in flags.overrides()? {
        set_dotted(&mut table, key, value)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Input(format!("invalid configuration: {e}")))?;
    cfg.train.seed = cfg.seed;
    cfg.train
        .validate()
        .map_err(|e| CliError::Input(e.to_string()))?;
    cfg.generation
        .validate()
        .map_err(|e| CliError::Input(e.to_string()))?;
    if cfg.preprocess.max_input < 2 || cfg.preprocess.max_target < 2 {
        return Err(CliError::Input("preprocess.max_input and max_target must be at least 2".into()));
    }
    Ok(cfg)
}

/// Fails with an I/O error naming `path` when it is not a readable file.
pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{what} not found: {}", path.display())))
    }
}
