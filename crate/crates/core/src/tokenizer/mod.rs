//! Joint byte-pair encoding and the shared cross-lingual vocabulary.

mod bpe;
mod vocab;

pub use bpe::{bpe_train, detokenize, BpeModel, END_OF_WORD};
pub use vocab::{vocab_build, SpecialIds, Vocabulary, LANG_TOKEN_PREFIX, SPECIAL_TOKENS};
