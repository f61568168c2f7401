//! Cross-lingual discrete diffusion for non-autoregressive machine translation.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: parallel corpus ingestion and synthetic toy corpora
//! - [`tokenizer`]: joint byte-pair encoding and the shared vocabulary
//! - [`schedule`]: noise schedules and the routing probabilities of the reverse sampler
//! - [`diffusion`]: forward noising, exact posteriors, the routed reverse step and its
//!   enumeration oracle
//! - [`model`]: the encoder-decoder denoiser with a target-length head
//! - [`training`]: cross-lingual pretraining batches, fine-tuning batches and the optimizer loop
//! - [`decoding`]: length prediction and iterative non-autoregressive generation
//! - [`evaluation`]: corpus BLEU at word and subword level
//! - [`oracle`]: exhaustive sampler-versus-posterior checks on small instances
//! - [`seeding`]: derivation of every random stream from one seed

pub mod corpus;
pub mod decoding;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod oracle;
pub mod schedule;
pub mod seeding;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};

/// Integer id of a vocabulary entry.
pub type TokenId = u32;
