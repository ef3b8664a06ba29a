//! Encoder-decoder transformer with scaled dot-product multi-head
//! attention and sinusoidal positions.

mod attention;
mod checkpoint;
mod model;
mod token_map;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub use attention::{attention, attention_tape, build_mask, causal_mask, multi_head, MultiHeadParams, MASK_VALUE};
pub use checkpoint::{read_container, write_container};
pub use model::{EncodedInput, ModelHeader, TransformerModel};
pub use token_map::{TokenMap, MODEL_BOS, MODEL_EOS, MODEL_PAD, MODEL_SEP, MODEL_UNK};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("{0} sequence is empty")]
    EmptySequence(&'static str),
    #[error("{what} length {len} exceeds {max} positions")]
    TooLong { what: &'static str, len: usize, max: usize },
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {message}")]
    Format { path: PathBuf, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    /// Share the embedding table with the output projection.
    pub tie_embeddings: bool,
    pub pad_id: usize,
}

impl Default for ModelConfig {
    /// Desk-scale defaults; `vocab_size` is normally replaced by the size
    /// of the compact token map.
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            num_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 512,
            vocab_size: 30_522,
            max_positions: 512,
            dropout: 0.1,
            tie_embeddings: true,
            pad_id: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(ModelError::Config("d_model must be even for sinusoidal positions".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.pad_id >= self.vocab_size {
            return Err(ModelError::Config("pad_id outside vocabulary".into()));
        }
        Ok(())
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(…)`.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor, ModelError> {
    if max_len == 0 || d_model == 0 {
        return Err(ModelError::Config("positional encoding dims must be positive".into()));
    }
    if !d_model.is_multiple_of(2) {
        return Err(ModelError::Config(format!("d_model {d_model} is odd")));
    }
    let mut data = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![max_len, d_model], data)?)
}
