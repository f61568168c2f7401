//! Encoder-decoder denoiser with token, position, language and timestep embeddings.
//!
//! The encoder reads the clean source; the decoder reads the noised target with the
//! timestep embedding added, attends bidirectionally over its own positions and
//! cross-attends to the encoder. A length head classifies the target length
//! `1..=max_len` from mean-pooled encoder states.

mod checkpoint;
mod config;
mod input;
mod layers;

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, read_meta, save_checkpoint, sidecar_path, CheckpointMeta};
pub use config::ModelConfig;
pub use input::{ModelInput, SequenceInput, Segment, SideBatch};

use crate::{Error, Result, TokenId};
use layers::{log_softmax_last, DecoderLayer, Dropout, EncoderLayer, LayerNorm, Linear, ParamBuilder};

const PAD_BIAS: f64 = -1e9;

/// Whether dropout is active; masks come from `seed` so a training step is reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    Train { seed: u64 },
}

/// Raw scores: `logits` is `(batch, dec_len, vocab)`, `length_logits` is `(batch, max_len)`
/// where column `k` scores length `k + 1`.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub length_logits: Tensor,
}

impl ModelOutput {
    /// Per-position log-probabilities as host values, `[batch][position][token]`.
    pub fn token_log_probs(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        log_probs_host(&self.logits)
    }

    pub fn length_scores(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.length_logits.to_dtype(DType::F64)?.to_vec2()?)
    }
}

/// Encoder output kept around so several decoder passes can reuse it.
#[derive(Debug, Clone)]
pub struct Encoded {
    states: Tensor,
    key_bias: Tensor,
    pub length_logits: Tensor,
}

impl Encoded {
    /// Encoder output for the given batch rows, in order; rows may repeat.
    pub fn select_rows(&self, rows: &[u32]) -> Result<Encoded> {
        let idx = Tensor::from_vec(rows.to_vec(), rows.len(), self.states.device())?;
        Ok(Encoded {
            states: self.states.index_select(&idx, 0)?,
            key_bias: self.key_bias.index_select(&idx, 0)?,
            length_logits: self.length_logits.index_select(&idx, 0)?,
        })
    }
}

/// Length log-probabilities per row; entry `k` is length `k + 1`.
pub fn length_log_probs(encoded: &Encoded) -> Result<Vec<Vec<f64>>> {
    Ok(log_softmax_last(&encoded.length_logits)?.to_dtype(DType::F64)?.to_vec2()?)
}

/// Token log-probabilities `[batch][position][token]` from decoder logits.
pub fn log_probs_host(logits: &Tensor) -> Result<Vec<Vec<Vec<f64>>>> {
    Ok(log_softmax_last(logits)?.to_dtype(DType::F64)?.to_vec3()?)
}

/// Supervision for one batch.
#[derive(Debug, Clone)]
pub struct LossTargets {
    /// Clean target ids per sequence, same length as that sequence's decoder segment.
    pub targets: Vec<Vec<TokenId>>,
    pub loss_positions: Vec<Vec<bool>>,
    pub true_lengths: Vec<usize>,
    pub length_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    /// Mean cross-entropy over all loss positions in the batch; 0 when there are none.
    pub token: f64,
    /// Mean length cross-entropy over the batch, before weighting.
    pub length: f64,
    pub n_loss_tokens: usize,
}

/// Gradient of the loss for every parameter, zero where the loss does not depend on it.
pub struct Gradients {
    /// `None` when the loss had no differentiable term.
    pub(crate) store: Option<GradStore>,
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }
}

pub struct DenoiserModel {
    config: ModelConfig,
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    tok_emb: Tensor,
    pos_emb: Tensor,
    lang_emb: Tensor,
    time_emb: Tensor,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    enc_norm: LayerNorm,
    dec_norm: LayerNorm,
    output: Linear,
    length_head: Linear,
}

/// Builds an `f32` model on the CPU.
pub fn build_model(config: &ModelConfig, init_seed: u64) -> Result<DenoiserModel> {
    DenoiserModel::new(config, init_seed, DType::F32)
}

impl DenoiserModel {
    pub fn new(config: &ModelConfig, init_seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let c = config;
        let h = c.hidden;
        let mut params = BTreeMap::new();
        let mut pb = ParamBuilder::new(&mut params, init_seed, dtype, device.clone(), 1.0 / (h as f64).sqrt());
        let s = pb.init_scale;
        let tok_emb = pb.uniform("embed.token", &[c.vocab_size, h], s)?;
        let pos_emb = pb.uniform("embed.position", &[c.max_len, h], s)?;
        let lang_emb = pb.uniform("embed.language", &[c.n_langs, h], s)?;
        let time_emb = pb.uniform("embed.timestep", &[c.n_timesteps, h], s)?;
        let encoder = (0..c.n_layers_enc)
            .map(|i| EncoderLayer::new(&mut pb, &format!("encoder.{i}"), h, c.n_heads, c.ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..c.n_layers_dec)
            .map(|i| DecoderLayer::new(&mut pb, &format!("decoder.{i}"), h, c.n_heads, c.ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = LayerNorm::new(&mut pb, "encoder.norm", h)?;
        let dec_norm = LayerNorm::new(&mut pb, "decoder.norm", h)?;
        let output = Linear::new(&mut pb, "output", h, c.vocab_size)?;
        let length_head = Linear::new(&mut pb, "length_head", h, c.max_len)?;
        Ok(DenoiserModel {
            config: c.clone(),
            dtype,
            device,
            params,
            tok_emb,
            pos_emb,
            lang_emb,
            time_emb,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
            output,
            length_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        let mut c = self.config.clone();
        c.dropout = p;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    /// Parameter count by traversal.
    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over parameter names, shapes and values in name order.
    pub fn param_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.params {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            match self.dtype {
                DType::F64 => {
                    for x in var.flatten_all()?.to_vec1::<f64>()? {
                        h.update(x.to_le_bytes());
                    }
                }
                _ => {
                    for x in var.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        h.update(x.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Host copy of one token-embedding row.
    pub fn token_embedding_row(&self, id: TokenId) -> Result<Vec<f64>> {
        Ok(self.tok_emb.get(id as usize)?.to_dtype(DType::F64)?.to_vec1()?)
    }

    fn check_side(&self, side: &SideBatch, what: &str) -> Result<()> {
        let c = &self.config;
        for (i, &real) in side.real.iter().enumerate() {
            if !real {
                continue;
            }
            if side.positions[i] as usize >= c.max_len {
                return Err(Error::Shape(format!(
                    "{what} position {} exceeds max_len {}",
                    side.positions[i], c.max_len
                )));
            }
            if side.ids[i] as usize >= c.vocab_size {
                return Err(Error::Shape(format!("{what} token id {} outside vocabulary", side.ids[i])));
            }
            if side.langs[i] as usize >= c.n_langs {
                return Err(Error::Shape(format!("{what} language index {} outside table", side.langs[i])));
            }
        }
        Ok(())
    }

    fn index_tensor(&self, values: &[u32], batch: usize, len: usize) -> Result<Tensor> {
        Ok(Tensor::from_vec(values.to_vec(), batch * len, &self.device)?)
    }

    /// Sum of token, position and language embeddings, `(batch, len, hidden)`.
    fn embed(&self, side: &SideBatch) -> Result<Tensor> {
        let (b, l, h) = (side.batch, side.len, self.config.hidden);
        let ids = self.index_tensor(&side.ids, b, l)?;
        let pos = self.index_tensor(&side.positions, b, l)?;
        let langs = self.index_tensor(&side.langs, b, l)?;
        let x = (self.tok_emb.index_select(&ids, 0)? + self.pos_emb.index_select(&pos, 0)?)?;
        let x = (x + self.lang_emb.index_select(&langs, 0)?)?;
        Ok(x.reshape((b, l, h))?)
    }

    /// `(batch, 1, 1, len)` additive attention bias.
    fn key_bias(&self, side: &SideBatch) -> Result<Tensor> {
        let bias: Vec<f64> = side.real.iter().map(|&r| if r { 0.0 } else { PAD_BIAS }).collect();
        Ok(Tensor::from_vec(bias, (side.batch, 1, 1, side.len), &self.device)?.to_dtype(self.dtype)?)
    }

    fn real_mask(&self, side: &SideBatch) -> Result<Tensor> {
        let m: Vec<f64> = side.real.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(m, (side.batch, side.len, 1), &self.device)?.to_dtype(self.dtype)?)
    }

    fn dropout(&self, mode: ForwardMode, stream: u64) -> Dropout {
        match mode {
            ForwardMode::Eval => Dropout::new(self.config.dropout, None),
            ForwardMode::Train { seed } => Dropout::new(
                self.config.dropout,
                Some(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)),
            ),
        }
    }

    pub fn encode(&self, encoder: &SideBatch, mode: ForwardMode) -> Result<Encoded> {
        self.check_side(encoder, "encoder")?;
        let mut drop = self.dropout(mode, 1);
        let bias = self.key_bias(encoder)?;
        let mut x = drop.apply(&self.embed(encoder)?)?;
        for layer in &self.encoder {
            x = layer.forward(&x, &bias, &mut drop)?;
        }
        let states = self.enc_norm.forward(&x)?;
        let mask = self.real_mask(encoder)?;
        let counts: Vec<f64> = encoder.lengths.iter().map(|&n| n as f64).collect();
        let counts = Tensor::from_vec(counts, (encoder.batch, 1), &self.device)?.to_dtype(self.dtype)?;
        let pooled = states.broadcast_mul(&mask)?.sum(1)?.broadcast_div(&counts)?;
        let length_logits = self.length_head.forward(&pooled)?;
        Ok(Encoded {
            states,
            key_bias: bias,
            length_logits,
        })
    }

    /// Token logits `(batch, dec_len, vocab)` for a decoder batch against encoded sources.
    pub fn decode(
        &self,
        encoded: &Encoded,
        decoder: &SideBatch,
        timesteps: &[usize],
        mode: ForwardMode,
    ) -> Result<Tensor> {
        self.check_side(decoder, "decoder")?;
        if timesteps.len() != decoder.batch {
            return Err(Error::Shape(format!(
                "{} timesteps for a batch of {}",
                timesteps.len(),
                decoder.batch
            )));
        }
        if encoded.states.dim(0)? != decoder.batch {
            return Err(Error::Shape("encoder and decoder batch sizes differ".into()));
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t >= self.config.n_timesteps) {
            return Err(Error::Shape(format!(
                "timestep {t} exceeds the table of {}",
                self.config.n_timesteps
            )));
        }
        let mut drop = self.dropout(mode, 2);
        let bias = self.key_bias(decoder)?;
        let t: Vec<u32> = timesteps.iter().map(|&t| t as u32).collect();
        let t = Tensor::from_vec(t, decoder.batch, &self.device)?;
        let time = self.time_emb.index_select(&t, 0)?.unsqueeze(1)?;
        let mut x = drop.apply(&self.embed(decoder)?.broadcast_add(&time)?)?;
        for layer in &self.decoder {
            x = layer.forward(&x, &bias, &encoded.states, &encoded.key_bias, &mut drop)?;
        }
        self.output.forward(&self.dec_norm.forward(&x)?)
    }

    pub fn forward(&self, input: &ModelInput, mode: ForwardMode) -> Result<ModelOutput> {
        let encoded = self.encode(&input.encoder, mode)?;
        let logits = self.decode(&encoded, &input.decoder, &input.timesteps, mode)?;
        Ok(ModelOutput {
            logits,
            length_logits: encoded.length_logits,
        })
    }

    fn loss_tensor(
        &self,
        input: &ModelInput,
        targets: &LossTargets,
        mode: ForwardMode,
    ) -> Result<(Option<Tensor>, LossValue)> {
        let dec = &input.decoder;
        let b = dec.batch;
        if targets.targets.len() != b || targets.loss_positions.len() != b || targets.true_lengths.len() != b {
            return Err(Error::Shape("loss targets do not match the batch size".into()));
        }
        let mut rows = Vec::new();
        let mut gold = Vec::new();
        for i in 0..b {
            let (tg, lp) = (&targets.targets[i], &targets.loss_positions[i]);
            if tg.len() != dec.lengths[i] || lp.len() != dec.lengths[i] {
                return Err(Error::Shape(format!(
                    "sequence {i}: targets {} and loss positions {} must match decoder length {}",
                    tg.len(),
                    lp.len(),
                    dec.lengths[i]
                )));
            }
            for (j, (&id, &on)) in tg.iter().zip(lp).enumerate() {
                if on {
                    if id as usize >= self.config.vocab_size {
                        return Err(Error::Shape(format!("target id {id} outside vocabulary")));
                    }
                    rows.push((i * dec.len + j) as u32);
                    gold.push(id);
                }
            }
        }
        let mut length_gold = Vec::with_capacity(b);
        for &n in &targets.true_lengths {
            if n == 0 || n > self.config.max_len {
                return Err(Error::Shape(format!(
                    "true length {n} outside 1..={}",
                    self.config.max_len
                )));
            }
            length_gold.push((n - 1) as u32);
        }

        let out = self.forward(input, mode)?;
        let v = self.config.vocab_size;
        let n_loss = rows.len();
        let token = if n_loss > 0 {
            let rows = Tensor::from_vec(rows, n_loss, &self.device)?;
            let gold = Tensor::from_vec(gold, (n_loss, 1), &self.device)?;
            let logits = out.logits.reshape((b * dec.len, v))?.index_select(&rows, 0)?;
            let nll = log_softmax_last(&logits)?.gather(&gold, D::Minus1)?;
            Some(nll.mean_all()?.neg()?)
        } else {
            None
        };
        let length = if targets.length_weight != 0.0 {
            let gold = Tensor::from_vec(length_gold, (b, 1), &self.device)?;
            let nll = log_softmax_last(&out.length_logits)?.gather(&gold, D::Minus1)?;
            Some(nll.mean_all()?.neg()?)
        } else {
            None
        };
        let scalar = |t: &Option<Tensor>| -> Result<f64> {
            match t {
                Some(t) => Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?),
                None => Ok(0.0),
            }
        };
        let token_value = scalar(&token)?;
        let length_value = match &length {
            Some(_) => scalar(&length)?,
            None => self.length_ce_host(&out.length_logits, &targets.true_lengths)?,
        };
        let total = match (token, length) {
            (Some(t), Some(l)) => Some((t + l.affine(targets.length_weight, 0.0)?)?),
            (Some(t), None) => Some(t),
            (None, Some(l)) => Some(l.affine(targets.length_weight, 0.0)?),
            (None, None) => None,
        };
        let value = LossValue {
            total: token_value + targets.length_weight * length_value,
            token: token_value,
            length: length_value,
            n_loss_tokens: n_loss,
        };
        Ok((total, value))
    }

    fn length_ce_host(&self, length_logits: &Tensor, lengths: &[usize]) -> Result<f64> {
        let lp = log_softmax_last(length_logits)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(-lp.iter().zip(lengths).map(|(row, &n)| row[n - 1]).sum::<f64>() / lengths.len() as f64)
    }

    /// Mean token cross-entropy over loss positions plus `length_weight` times the
    /// length cross-entropy. With no loss positions the token term is 0.
    pub fn loss(&self, input: &ModelInput, targets: &LossTargets, mode: ForwardMode) -> Result<LossValue> {
        Ok(self.loss_tensor(input, targets, mode)?.1)
    }

    pub fn loss_and_gradients(
        &self,
        input: &ModelInput,
        targets: &LossTargets,
        mode: ForwardMode,
    ) -> Result<(LossValue, Gradients)> {
        let (total, value) = self.loss_tensor(input, targets, mode)?;
        let store = match &total {
            Some(t) => Some(t.backward()?),
            None => None,
        };
        let mut by_name = BTreeMap::new();
        for (name, var) in &self.params {
            let g = match store.as_ref().and_then(|s| s.get(var.as_tensor())) {
                Some(g) => g.clone(),
                None => var.as_tensor().zeros_like()?,
            };
            by_name.insert(name.clone(), g);
        }
        Ok((value, Gradients { store, by_name }))
    }

    pub(crate) fn set_params(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.params {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.copy()?)?;
        }
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint("checkpoint holds unexpected parameters".into()));
        }
        Ok(())
    }

    /// Copies every parameter from `other`, which must share the configuration.
    pub fn copy_from(&self, other: &DenoiserModel) -> Result<()> {
        let values = other
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        self.set_params(&values)
    }
}

#[cfg(test)]
mod tests;
