//! Pretraining and fine-tuning: batch construction, noising and the optimizer loop.

mod batch;
mod config;
mod trainer;

pub use batch::{
    encode_pair, make_finetune_batch, make_tdlm_batch, selection_count, EncodedCorpus, EncodedPair,
    FinetuneBatch, PreparedBatch, TdlmBatch, TokenBatcher,
};
pub use config::{Task, TrainConfig};
pub use trainer::{StepRecord, Trainer, TRACE_HEADER};

#[cfg(test)]
mod tests;
