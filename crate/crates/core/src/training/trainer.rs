use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use super::batch::{make_finetune_batch, make_tdlm_batch, EncodedPair, PreparedBatch, TokenBatcher};
use super::{Task, TrainConfig};
use crate::diffusion::NoiseKind;
use crate::model::{save_checkpoint, CheckpointMeta, DenoiserModel, ForwardMode};
use crate::schedule::{make_schedule, NoiseSchedule};
use crate::seeding::{derive_seed, BATCH_STREAM, DROPOUT_STREAM};
use crate::tokenizer::{SpecialIds, Vocabulary};
use crate::{Error, Result};

pub const TRACE_HEADER: &str = "step,token_loss,length_loss,lr";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    pub token_loss: f64,
    pub length_loss: f64,
    pub lr: f64,
    pub n_sequences: usize,
}

pub struct Trainer {
    model: DenoiserModel,
    optimizer: AdamW,
    config: TrainConfig,
    task: Task,
    schedule: NoiseSchedule,
    noise: NoiseKind,
    specials: SpecialIds,
    vocab_hash: String,
    data: Vec<EncodedPair>,
    batcher: TokenBatcher,
    step: u64,
    trace: Vec<StepRecord>,
    checkpoint_dir: Option<PathBuf>,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(
        mut model: DenoiserModel,
        data: Vec<EncodedPair>,
        task: Task,
        config: TrainConfig,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        config.validate()?;
        let mc = model.config().clone();
        if mc.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocabulary size {} does not match the tokenizer's {}",
                mc.vocab_size,
                vocab.len()
            )));
        }
        if config.max_len > mc.max_len {
            return Err(Error::Config(format!(
                "max_len {} exceeds the model's {}",
                config.max_len, mc.max_len
            )));
        }
        if mc.n_timesteps < config.diffusion_steps + 1 {
            return Err(Error::Config(format!(
                "the model embeds {} timesteps but training uses T = {}",
                mc.n_timesteps, config.diffusion_steps
            )));
        }
        model.set_dropout(config.dropout)?;
        let schedule = make_schedule(config.schedule, config.diffusion_steps)?;
        let noise = NoiseKind::from_name(&config.noise, vocab)?;
        let extra = usize::from(task == Task::Tdlm);
        let batcher = TokenBatcher::new(&data, config.max_tokens_per_batch, extra, config.seed)?;
        let optimizer = AdamW::new(
            model.vars(),
            ParamsAdamW {
                lr: config.learning_rate(1),
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.adam_eps,
                weight_decay: config.weight_decay,
            },
        )?;
        Ok(Trainer {
            model,
            optimizer,
            config,
            task,
            schedule,
            noise,
            specials: vocab.specials(),
            vocab_hash: vocab.content_hash(),
            data,
            batcher,
            step: 0,
            trace: Vec::new(),
            checkpoint_dir: None,
            last_checkpoint: None,
        })
    }

    /// Checkpoints go to `dir/step-NNNNNN.safetensors` and `dir/final.safetensors`.
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn into_model(self) -> DenoiserModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn noise(&self) -> &NoiseKind {
        &self.noise
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn trace(&self) -> &[StepRecord] {
        &self.trace
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    /// The batch the next call to [`Trainer::step`] will train on.
    fn next_batch(&mut self) -> Result<PreparedBatch> {
        let idx = self.batcher.next_batch();
        let pairs: Vec<EncodedPair> = idx.iter().map(|&i| self.data[i].clone()).collect();
        let seed = derive_seed(self.config.seed, BATCH_STREAM, self.step);
        match self.task {
            Task::Tdlm => {
                let w = if self.config.pretrain_length_loss { self.config.length_weight } else { 0.0 };
                make_tdlm_batch(&pairs, self.specials, &self.schedule, &self.noise, &self.config, seed)?.prepare(w)
            }
            Task::Finetune => make_finetune_batch(&pairs, &self.schedule, &self.noise, &self.config, seed)?
                .prepare(self.config.length_weight),
        }
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let lr = self.config.learning_rate(self.step + 1);
        self.optimizer.set_learning_rate(lr);
        let batch = self.next_batch()?;
        let mode = ForwardMode::Train {
            seed: derive_seed(self.config.seed, DROPOUT_STREAM, self.step),
        };
        let (loss, grads) = self.model.loss_and_gradients(&batch.input, &batch.targets, mode)?;
        if !loss.total.is_finite() || !loss.length.is_finite() {
            return Err(Error::Divergence {
                step: self.step + 1,
                loss: loss.total,
            });
        }
        if let Some(store) = &grads.store {
            self.optimizer.step(store)?;
        }
        self.step += 1;
        let record = StepRecord {
            step: self.step,
            token_loss: loss.token,
            length_loss: loss.length,
            lr,
            n_sequences: batch.input.batch(),
        };
        self.trace.push(record);
        if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 {
            if let Some(dir) = self.checkpoint_dir.clone() {
                self.save(&dir.join(format!("step-{:06}.safetensors", self.step)))?;
            }
        }
        Ok(record)
    }

    /// Runs `n` steps, then writes the final checkpoint when a directory is set.
    pub fn run(&mut self, n: u64) -> Result<()> {
        self.run_with(n, |_, _| Ok(true))
    }

    /// Like [`Trainer::run`], calling `after_step` after every step; returning `false`
    /// stops early.
    pub fn run_with<F>(&mut self, n: u64, mut after_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepRecord) -> Result<bool>,
    {
        for _ in 0..n {
            let record = self.step()?;
            if !after_step(self, &record)? {
                break;
            }
        }
        if let Some(dir) = self.checkpoint_dir.clone() {
            self.save(&dir.join("final.safetensors"))?;
        }
        Ok(())
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config: self.model.config().clone(),
            vocab_hash: self.vocab_hash.clone(),
            schedule: self.schedule.descriptor(),
            noise: self.noise.name().to_string(),
            step: self.step,
            dtype: String::new(),
            param_hash: String::new(),
        }
    }

    pub fn save(&mut self, path: &Path) -> Result<CheckpointMeta> {
        let meta = save_checkpoint(&self.model, path, &self.checkpoint_meta())?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(meta)
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.trace {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6e}", r.step, r.token_loss, r.length_loss, r.lr);
        }
        s
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.trace_csv()).map_err(|e| Error::io(path, e))
    }
}
