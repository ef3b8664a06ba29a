//! Pre-layer-norm encoder-decoder transformer.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{log_softmax, Tensor};

use super::attention::{attention, attention_tape, build_mask, column_block, concat_heads};
use super::checkpoint::{read_container, write_container};
use super::token_map::TokenMap;
use super::{positional_encoding, ModelConfig, ModelError};

struct AttnIds {
    q: Vec<ParamId>,
    k: Vec<ParamId>,
    v: Vec<ParamId>,
    o: ParamId,
}

struct NormIds {
    g: ParamId,
    b: ParamId,
}

struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

struct EncoderLayer {
    ln1: NormIds,
    attn: AttnIds,
    ln2: NormIds,
    ffn: FfnIds,
}

struct DecoderLayer {
    ln1: NormIds,
    self_attn: AttnIds,
    ln2: NormIds,
    cross: AttnIds,
    ln3: NormIds,
    ffn: FfnIds,
}

fn xavier(rng: &mut dyn RngCore, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(&[rows, cols], bound, rng)
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut dyn RngCore,
    cfg: &'a ModelConfig,
}

impl Builder<'_> {
    fn add(&mut self, name: String, value: Tensor) -> ParamId {
        self.store.add(name, value).expect("parameter names are unique")
    }

    fn norm(&mut self, prefix: &str) -> NormIds {
        let d = self.cfg.d_model;
        NormIds {
            g: self.add(format!("{prefix}.g"), Tensor::full(&[1, d], 1.0)),
            b: self.add(format!("{prefix}.b"), Tensor::zeros(&[1, d])),
        }
    }

    fn attn(&mut self, prefix: &str) -> AttnIds {
        let (d, h) = (self.cfg.d_model, self.cfg.num_heads);
        let dh = d / h;
        let heads = |kind: &str, b: &mut Self| -> Vec<ParamId> {
            (0..h)
                .map(|i| {
                    let w = xavier(b.rng, d, dh);
                    b.add(format!("{prefix}.{kind}.{i}"), w)
                })
                .collect()
        };
        let q = heads("q", self);
        let k = heads("k", self);
        let v = heads("v", self);
        let wo = xavier(self.rng, d, d);
        let o = self.add(format!("{prefix}.o"), wo);
        AttnIds { q, k, v, o }
    }

    fn ffn(&mut self, prefix: &str) -> FfnIds {
        let (d, f) = (self.cfg.d_model, self.cfg.ffn_dim);
        let w1 = xavier(self.rng, d, f);
        let w2 = xavier(self.rng, f, d);
        FfnIds {
            w1: self.add(format!("{prefix}.w1"), w1),
            b1: self.add(format!("{prefix}.b1"), Tensor::zeros(&[1, f])),
            w2: self.add(format!("{prefix}.w2"), w2),
            b2: self.add(format!("{prefix}.b2"), Tensor::zeros(&[1, d])),
        }
    }
}

/// Encoder-decoder transformer owning its parameters.
pub struct TransformerModel {
    config: ModelConfig,
    store: ParamStore,
    pe: Tensor,
    embed: ParamId,
    out_proj: Option<ParamId>,
    encoder: Vec<EncoderLayer>,
    enc_norm: NormIds,
    decoder: Vec<DecoderLayer>,
    dec_norm: NormIds,
}

/// Header stored alongside the parameters of a saved model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_map: Option<TokenMap>,
}

/// Encoder output for one input, reused across decoding steps.
#[derive(Clone, Debug)]
pub struct EncodedInput {
    memory: Tensor,
    key_pad: Vec<bool>,
}

impl EncodedInput {
    pub fn memory(&self) -> &Tensor {
        &self.memory
    }
}

type Ranges = Vec<(usize, usize)>;

fn ranges_of(seqs: &[&[usize]]) -> Ranges {
    let mut start = 0;
    seqs.iter()
        .map(|s| {
            let r = (start, s.len());
            start += s.len();
            r
        })
        .collect()
}

impl TransformerModel {
    /// Initializes every parameter from `rng`: Xavier-uniform projections,
    /// `N(0, d^-1/2)` embeddings, unit gains, zero biases.
    pub fn new(config: ModelConfig, rng: &mut dyn RngCore) -> Result<Self, ModelError> {
        config.validate()?;
        let pe = positional_encoding(config.max_positions, config.d_model)?;
        let mut b = Builder {
            store: ParamStore::new(),
            rng,
            cfg: &config,
        };
        let (v, d) = (config.vocab_size, config.d_model);
        let std = 1.0 / (d as f64).sqrt();
        let table = Tensor::normal(&[v, d], std, b.rng);
        let embed = b.add("embed".into(), table);
        let out_proj = if config.tie_embeddings {
            None
        } else {
            let w = xavier(b.rng, d, v);
            Some(b.add("out_proj".into(), w))
        };
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncoderLayer {
                    ln1: b.norm(&format!("{p}.ln1")),
                    attn: b.attn(&format!("{p}.self")),
                    ln2: b.norm(&format!("{p}.ln2")),
                    ffn: b.ffn(&format!("{p}.ffn")),
                }
            })
            .collect();
        let enc_norm = b.norm("enc.ln");
        let decoder = (0..config.decoder_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecoderLayer {
                    ln1: b.norm(&format!("{p}.ln1")),
                    self_attn: b.attn(&format!("{p}.self")),
                    ln2: b.norm(&format!("{p}.ln2")),
                    cross: b.attn(&format!("{p}.cross")),
                    ln3: b.norm(&format!("{p}.ln3")),
                    ffn: b.ffn(&format!("{p}.ffn")),
                }
            })
            .collect();
        let dec_norm = b.norm("dec.ln");
        let store = b.store;
        Ok(TransformerModel {
            config,
            store,
            pe,
            embed,
            out_proj,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_ids(&self, ids: &[usize], what: &'static str) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence(what));
        }
        if ids.len() > self.config.max_positions {
            return Err(ModelError::TooLong {
                what,
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn positions(&self, seqs: &[&[usize]]) -> Tensor {
        let d = self.config.d_model;
        let total: usize = seqs.iter().map(|s| s.len()).sum();
        let mut data = Vec::with_capacity(total * d);
        for s in seqs {
            data.extend_from_slice(&self.pe.data()[..s.len() * d]);
        }
        Tensor::new(vec![total, d], data).expect("position rows")
    }

    // ---- tape forward -------------------------------------------------

    fn embed_tape(&self, tape: &mut Tape, seqs: &[&[usize]], rng: &mut Option<&mut dyn RngCore>) -> Result<Var, ModelError> {
        let table = tape.param(&self.store, self.embed);
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let x = tape.embedding(table, &ids)?;
        let x = tape.scale(x, (self.config.d_model as f64).sqrt());
        let pe = tape.constant(self.positions(seqs));
        let x = tape.add(x, pe)?;
        self.dropout(tape, x, rng)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var, ModelError> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => Ok(tape.dropout(x, self.config.dropout, &mut **r)?),
            _ => Ok(x),
        }
    }

    fn norm_tape(&self, tape: &mut Tape, x: Var, n: &NormIds) -> Result<Var, ModelError> {
        let g = tape.param(&self.store, n.g);
        let b = tape.param(&self.store, n.b);
        Ok(tape.layer_norm(x, g, b)?)
    }

    fn ffn_tape(&self, tape: &mut Tape, x: Var, f: &FfnIds) -> Result<Var, ModelError> {
        let w1 = tape.param(&self.store, f.w1);
        let b1 = tape.param(&self.store, f.b1);
        let w2 = tape.param(&self.store, f.w2);
        let b2 = tape.param(&self.store, f.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        Ok(tape.add_row(o, b2)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn mha_tape(
        &self,
        tape: &mut Tape,
        xq: Var,
        xkv: Var,
        q_ranges: &Ranges,
        kv_ranges: &Ranges,
        masks: &[Option<Tensor>],
        a: &AttnIds,
    ) -> Result<Var, ModelError> {
        let dh = self.config.d_model / self.config.num_heads;
        let cat = |tape: &mut Tape, ids: &[ParamId]| -> Result<Var, ModelError> {
            let parts: Vec<Var> = ids.iter().map(|&id| tape.param(&self.store, id)).collect();
            Ok(tape.concat_cols(&parts)?)
        };
        let wq = cat(tape, &a.q)?;
        let wk = cat(tape, &a.k)?;
        let wv = cat(tape, &a.v)?;
        let q = tape.matmul(xq, wq)?;
        let k = tape.matmul(xkv, wk)?;
        let v = tape.matmul(xkv, wv)?;
        let single = q_ranges.len() == 1;
        let mut outputs = Vec::with_capacity(q_ranges.len());
        for (e, (&(qs, qn), &(ks, kn))) in q_ranges.iter().zip(kv_ranges).enumerate() {
            let (qe, ke, ve) = if single {
                (q, k, v)
            } else {
                (
                    tape.slice_rows(q, qs, qn)?,
                    tape.slice_rows(k, ks, kn)?,
                    tape.slice_rows(v, ks, kn)?,
                )
            };
            let mask = masks[e].clone().map(|m| tape.constant(m));
            let mut heads = Vec::with_capacity(a.q.len());
            for h in 0..a.q.len() {
                let qh = tape.slice_cols(qe, h * dh, dh)?;
                let kh = tape.slice_cols(ke, h * dh, dh)?;
                let vh = tape.slice_cols(ve, h * dh, dh)?;
                heads.push(attention_tape(tape, qh, kh, vh, mask)?);
            }
            outputs.push(tape.concat_cols(&heads)?);
        }
        let joined = if single { outputs[0] } else { tape.concat_rows(&outputs)? };
        let wo = tape.param(&self.store, a.o);
        Ok(tape.matmul(joined, wo)?)
    }

    /// Teacher-forced forward pass over a batch. Examples are packed row-wise
    /// rather than padded; `[PAD]` ids inside a sequence are masked as keys.
    /// Returns logits with one row per decoder input position, examples in
    /// order. Dropout is applied only when `rng` is given.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        inputs: &[&[usize]],
        dec_inputs: &[&[usize]],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var, ModelError> {
        if inputs.is_empty() || inputs.len() != dec_inputs.len() {
            return Err(ModelError::Batch(format!(
                "{} inputs for {} decoder inputs",
                inputs.len(),
                dec_inputs.len()
            )));
        }
        for (i, t) in inputs.iter().zip(dec_inputs) {
            self.check_ids(i, "input")?;
            self.check_ids(t, "decoder input")?;
        }
        let pad = self.config.pad_id;
        let enc_ranges = ranges_of(inputs);
        let dec_ranges = ranges_of(dec_inputs);
        let enc_pad: Vec<Vec<bool>> = inputs.iter().map(|s| s.iter().map(|&i| i == pad).collect()).collect();
        let dec_pad: Vec<Vec<bool>> = dec_inputs.iter().map(|s| s.iter().map(|&i| i == pad).collect()).collect();
        let enc_self: Vec<Option<Tensor>> = enc_pad.iter().map(|p| build_mask(p.len(), p, false)).collect();
        let cross: Vec<Option<Tensor>> = dec_inputs
            .iter()
            .zip(&enc_pad)
            .map(|(t, p)| build_mask(t.len(), p, false))
            .collect();
        let dec_self: Vec<Option<Tensor>> = dec_pad.iter().map(|p| build_mask(p.len(), p, true)).collect();

        let mut x = self.embed_tape(tape, inputs, &mut rng)?;
        for layer in &self.encoder {
            let h = self.norm_tape(tape, x, &layer.ln1)?;
            let h = self.mha_tape(tape, h, h, &enc_ranges, &enc_ranges, &enc_self, &layer.attn)?;
            let h = self.dropout(tape, h, &mut rng)?;
            x = tape.add(x, h)?;
            let h = self.norm_tape(tape, x, &layer.ln2)?;
            let h = self.ffn_tape(tape, h, &layer.ffn)?;
            let h = self.dropout(tape, h, &mut rng)?;
            x = tape.add(x, h)?;
        }
        let memory = self.norm_tape(tape, x, &self.enc_norm)?;

        let mut y = self.embed_tape(tape, dec_inputs, &mut rng)?;
        for layer in &self.decoder {
            let h = self.norm_tape(tape, y, &layer.ln1)?;
            let h = self.mha_tape(tape, h, h, &dec_ranges, &dec_ranges, &dec_self, &layer.self_attn)?;
            let h = self.dropout(tape, h, &mut rng)?;
            y = tape.add(y, h)?;
            let h = self.norm_tape(tape, y, &layer.ln2)?;
            let h = self.mha_tape(tape, h, memory, &dec_ranges, &enc_ranges, &cross, &layer.cross)?;
            let h = self.dropout(tape, h, &mut rng)?;
            y = tape.add(y, h)?;
            let h = self.norm_tape(tape, y, &layer.ln3)?;
            let h = self.ffn_tape(tape, h, &layer.ffn)?;
            let h = self.dropout(tape, h, &mut rng)?;
            y = tape.add(y, h)?;
        }
        let y = self.norm_tape(tape, y, &self.dec_norm)?;
        let logits = match self.out_proj {
            None => {
                let table = tape.param(&self.store, self.embed);
                tape.matmul_t(y, table)?
            }
            Some(w) => {
                let w = tape.param(&self.store, w);
                tape.matmul(y, w)?
            }
        };
        Ok(logits)
    }

    /// Single-example teacher-forced forward pass.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &[usize],
        dec_input: &[usize],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var, ModelError> {
        self.forward_batch(tape, &[input], &[dec_input], rng)
    }

    // ---- inference without a tape ---------------------------------------

    fn p(&self, id: ParamId) -> &Tensor {
        self.store.value(id)
    }

    fn embed_eval(&self, ids: &[usize]) -> Result<Tensor, ModelError> {
        let table = self.p(self.embed);
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(table.row(id));
        }
        let scale = (d as f64).sqrt();
        let x = Tensor::new(vec![ids.len(), d], data)?.map(|v| v * scale);
        Ok(x.add(&self.positions(&[ids]))?)
    }

    fn norm_eval(&self, x: &Tensor, n: &NormIds) -> Result<Tensor, ModelError> {
        Ok(x.layer_norm(self.p(n.g), self.p(n.b))?)
    }

    fn ffn_eval(&self, x: &Tensor, f: &FfnIds) -> Result<Tensor, ModelError> {
        let h = x.matmul(self.p(f.w1))?.add_row(self.p(f.b1))?.map(|v| v.max(0.0));
        Ok(h.matmul(self.p(f.w2))?.add_row(self.p(f.b2))?)
    }

    fn mha_eval(&self, xq: &Tensor, xkv: &Tensor, mask: Option<&Tensor>, a: &AttnIds) -> Result<Tensor, ModelError> {
        let dh = self.config.d_model / self.config.num_heads;
        let cat = |ids: &[ParamId]| concat_heads(&ids.iter().map(|&id| self.p(id).clone()).collect::<Vec<_>>());
        let q = xq.matmul(&cat(&a.q)?)?;
        let k = xkv.matmul(&cat(&a.k)?)?;
        let v = xkv.matmul(&cat(&a.v)?)?;
        let heads = (0..a.q.len())
            .map(|h| {
                attention(
                    &column_block(&q, h * dh, dh),
                    &column_block(&k, h * dh, dh),
                    &column_block(&v, h * dh, dh),
                    mask,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(concat_heads(&heads)?.matmul(self.p(a.o))?)
    }

    /// Runs the encoder once for decoding.
    pub fn encode(&self, input: &[usize]) -> Result<EncodedInput, ModelError> {
        self.check_ids(input, "input")?;
        let key_pad: Vec<bool> = input.iter().map(|&i| i == self.config.pad_id).collect();
        let mask = build_mask(input.len(), &key_pad, false);
        let mut x = self.embed_eval(input)?;
        for layer in &self.encoder {
            let h = self.norm_eval(&x, &layer.ln1)?;
            let h = self.mha_eval(&h, &h, mask.as_ref(), &layer.attn)?;
            x = x.add(&h)?;
            let h = self.norm_eval(&x, &layer.ln2)?;
            x = x.add(&self.ffn_eval(&h, &layer.ffn)?)?;
        }
        Ok(EncodedInput {
            memory: self.norm_eval(&x, &self.enc_norm)?,
            key_pad,
        })
    }

    /// Logits for every position of `prefix` given an encoded input.
    pub fn decode(&self, enc: &EncodedInput, prefix: &[usize]) -> Result<Tensor, ModelError> {
        self.check_ids(prefix, "decoder input")?;
        let pad: Vec<bool> = prefix.iter().map(|&i| i == self.config.pad_id).collect();
        let self_mask = build_mask(prefix.len(), &pad, true);
        let cross_mask = build_mask(prefix.len(), &enc.key_pad, false);
        let mut y = self.embed_eval(prefix)?;
        for layer in &self.decoder {
            let h = self.norm_eval(&y, &layer.ln1)?;
            let h = self.mha_eval(&h, &h, self_mask.as_ref(), &layer.self_attn)?;
            y = y.add(&h)?;
            let h = self.norm_eval(&y, &layer.ln2)?;
            let h = self.mha_eval(&h, &enc.memory, cross_mask.as_ref(), &layer.cross)?;
            y = y.add(&h)?;
            let h = self.norm_eval(&y, &layer.ln3)?;
            y = y.add(&self.ffn_eval(&h, &layer.ffn)?)?;
        }
        let y = self.norm_eval(&y, &self.dec_norm)?;
        Ok(match self.out_proj {
            None => y.matmul_t(self.p(self.embed))?,
            Some(w) => y.matmul(self.p(w))?,
        })
    }

    /// Log-probabilities of the token following `prefix`.
    pub fn next_log_probs(&self, enc: &EncodedInput, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        let logits = self.decode(enc, prefix)?;
        Ok(log_softmax(logits.row(logits.rows() - 1)))
    }

    // ---- persistence ----------------------------------------------------

    /// Saves config, optional token map, and every parameter in
    /// registration order.
    pub fn save(&self, path: &Path, token_map: Option<&TokenMap>) -> Result<(), ModelError> {
        let header = ModelHeader {
            config: self.config.clone(),
            token_map: token_map.cloned(),
        };
        let header = serde_json::to_string(&header).expect("header serializes");
        let tensors: Vec<(&str, &Tensor)> = self.store.iter().map(|(_, p)| (p.name(), p.value())).collect();
        write_container(path, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<TokenMap>), ModelError> {
        let (header, tensors) = read_container(path)?;
        let header: ModelHeader = serde_json::from_str(&header).map_err(|e| ModelError::Format {
            path: path.to_path_buf(),
            message: format!("header: {e}"),
        })?;
        let mut model = TransformerModel::new(header.config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        model.load_values(path, tensors)?;
        Ok((model, header.token_map))
    }

    fn load_values(&mut self, path: &Path, tensors: Vec<(String, Tensor)>) -> Result<(), ModelError> {
        let bad = |message: String| ModelError::Format {
            path: path.to_path_buf(),
            message,
        };
        if tensors.len() != self.store.len() {
            return Err(bad(format!("{} tensors, model has {}", tensors.len(), self.store.len())));
        }
        for (name, t) in tensors {
            let id = self.store.id(&name).ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            self.store
                .set_value(id, t)
                .map_err(|e| bad(format!("parameter {name}: {e}")))?;
        }
        Ok(())
    }

    /// Overwrites parameter values from another model with the same config.
    pub fn copy_values_from(&mut self, other: &TransformerModel) -> Result<(), ModelError> {
        for (id, p) in other.store.iter() {
            self.store.set_value(id, p.value().clone())?;
        }
        Ok(())
    }
}
