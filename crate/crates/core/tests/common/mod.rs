#![allow(dead_code)]

use xdlm::corpus::{synth_copy_corpus, ParallelCorpus};
use xdlm::model::ModelConfig;
use xdlm::tokenizer::{bpe_train, vocab_build, BpeModel, Vocabulary};
use xdlm::training::{EncodedCorpus, EncodedPair, TrainConfig};

pub struct Fixture {
    pub corpus: ParallelCorpus,
    pub bpe: BpeModel,
    pub vocab: Vocabulary,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Fixture {
    /// Copy task over a 6-symbol alphabet with a narrow model.
    pub fn copy(n_pairs: usize) -> Self {
        let corpus = synth_copy_corpus(n_pairs, 1, 8, 6, 11).unwrap();
        let bpe = bpe_train(&[&corpus], 0).unwrap();
        let vocab = vocab_build(&bpe, &[&corpus], &["src", "tgt"]).unwrap();
        let train = TrainConfig {
            max_len: 16,
            max_tokens_per_batch: 256,
            warmup_steps: 10,
            diffusion_steps: 8,
            ..TrainConfig::toy()
        };
        let model = ModelConfig {
            n_layers_enc: 1,
            n_layers_dec: 1,
            hidden: 16,
            n_heads: 2,
            ffn_dim: 32,
            max_len: 16,
            ..ModelConfig::toy(vocab.len(), 2, train.diffusion_steps)
        };
        Fixture {
            corpus,
            bpe,
            vocab,
            model,
            train,
        }
    }

    pub fn pairs(&self) -> Vec<EncodedPair> {
        EncodedCorpus::encode(&self.corpus, &self.vocab, &self.bpe, self.train.max_len)
            .unwrap()
            .pairs
    }
}
