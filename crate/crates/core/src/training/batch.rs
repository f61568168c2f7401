use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::corpus::{ParallelCorpus, SentencePair};
use crate::diffusion::{forward_sample_with, noise_positions_with, NoiseKind};
use crate::model::{LossTargets, ModelInput, Segment, SequenceInput};
use crate::schedule::NoiseSchedule;
use crate::tokenizer::{BpeModel, SpecialIds, Vocabulary};
use crate::{Error, Result, TokenId};

/// A sentence pair as ids, with language indices for the embedding table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub source_lang: u32,
    pub target_lang: u32,
}

impl EncodedPair {
    pub fn n_tokens(&self) -> usize {
        self.source.len() + self.target.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedCorpus {
    pub pairs: Vec<EncodedPair>,
    /// Pairs cut down to the length limit.
    pub n_truncated: usize,
    /// Pairs that tokenized to nothing on one side.
    pub n_skipped: usize,
}

fn lang_index(vocab: &Vocabulary, tag: &str) -> Result<u32> {
    vocab
        .lang_index(tag)
        .map(|i| i as u32)
        .ok_or_else(|| Error::InvalidArgument(format!("language {tag:?} is not in the vocabulary")))
}

pub fn encode_pair(pair: &SentencePair, vocab: &Vocabulary, bpe: &BpeModel) -> Result<EncodedPair> {
    Ok(EncodedPair {
        source: vocab.encode_ids(bpe, &pair.source)?,
        target: vocab.encode_ids(bpe, &pair.target)?,
        source_lang: lang_index(vocab, &pair.source_lang)?,
        target_lang: lang_index(vocab, &pair.target_lang)?,
    })
}

impl EncodedCorpus {
    /// Tokenizes every pair, truncating each side to `max_len` tokens.
    pub fn encode(corpus: &ParallelCorpus, vocab: &Vocabulary, bpe: &BpeModel, max_len: usize) -> Result<Self> {
        let mut out = EncodedCorpus {
            pairs: Vec::with_capacity(corpus.len()),
            n_truncated: 0,
            n_skipped: 0,
        };
        for pair in &corpus.pairs {
            let mut p = encode_pair(pair, vocab, bpe)?;
            if p.source.is_empty() || p.target.is_empty() {
                out.n_skipped += 1;
                continue;
            }
            if p.source.len() > max_len || p.target.len() > max_len {
                p.source.truncate(max_len);
                p.target.truncate(max_len);
                out.n_truncated += 1;
            }
            out.pairs.push(p);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Inputs and supervision for one optimizer step.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub input: ModelInput,
    pub targets: LossTargets,
}

/// Pretraining batch over `source ++ eos ++ target`. The same noised sequence feeds
/// the encoder and the decoder; only the decoder sees the timestep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TdlmBatch {
    /// Noised concatenations.
    pub ids: Vec<Vec<TokenId>>,
    /// Clean concatenations.
    pub clean: Vec<Vec<TokenId>>,
    pub langs: Vec<Vec<u32>>,
    /// Positions restart at 0 for the target segment.
    pub positions: Vec<Vec<u32>>,
    pub selected: Vec<Vec<bool>>,
    pub loss_positions: Vec<Vec<bool>>,
    pub timesteps: Vec<usize>,
    /// Target segment lengths, the length head's labels.
    pub target_lengths: Vec<usize>,
    /// Pairs with no eligible token.
    pub n_skipped: usize,
}

/// Fine-tuning batch: clean sources, targets noised as a whole to level `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinetuneBatch {
    pub encoder: Vec<Segment>,
    pub decoder: Vec<Segment>,
    pub targets: Vec<Vec<TokenId>>,
    pub loss_positions: Vec<Vec<bool>>,
    pub true_lengths: Vec<usize>,
    pub timesteps: Vec<usize>,
}

/// `floor(fraction * n)` with a floor of 1; 0 only when `n` is 0.
pub fn selection_count(n_eligible: usize, fraction: f64) -> usize {
    if n_eligible == 0 {
        return 0;
    }
    (((n_eligible as f64) * fraction + 1e-9).floor() as usize).clamp(1, n_eligible)
}

fn check_t(schedule: &NoiseSchedule, noise: &NoiseKind) -> Result<()> {
    if let NoiseKind::Multinomial { support } = noise {
        if support.is_empty() {
            return Err(Error::InvalidArgument("empty noise support".into()));
        }
    }
    if schedule.steps() == 0 {
        return Err(Error::InvalidArgument("schedule has no steps".into()));
    }
    Ok(())
}

pub fn make_tdlm_batch(
    pairs: &[EncodedPair],
    specials: SpecialIds,
    schedule: &NoiseSchedule,
    noise: &NoiseKind,
    config: &TrainConfig,
    step_seed: u64,
) -> Result<TdlmBatch> {
    check_t(schedule, noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let mut batch = TdlmBatch {
        ids: vec![],
        clean: vec![],
        langs: vec![],
        positions: vec![],
        selected: vec![],
        loss_positions: vec![],
        timesteps: vec![],
        target_lengths: vec![],
        n_skipped: 0,
    };
    let is_special = |id: TokenId| id == specials.pad || id == specials.bos || id == specials.eos || id == specials.mask;
    for p in pairs {
        let src = &p.source[..p.source.len().min(config.max_len.saturating_sub(1))];
        let tgt = &p.target[..p.target.len().min(config.max_len)];
        let mut clean = Vec::with_capacity(src.len() + tgt.len() + 1);
        clean.extend_from_slice(src);
        clean.push(specials.eos);
        clean.extend_from_slice(tgt);
        let eligible: Vec<usize> = (0..clean.len()).filter(|&i| !is_special(clean[i])).collect();
        let k = selection_count(eligible.len(), config.select_fraction);
        if k == 0 {
            batch.n_skipped += 1;
            continue;
        }
        let mut chosen: Vec<usize> = sample(&mut rng, eligible.len(), k).into_iter().map(|j| eligible[j]).collect();
        chosen.sort_unstable();
        let t = rng.random_range(1..=schedule.steps());
        let mut ids = clean.clone();
        noise_positions_with(&mut ids, &chosen, t, schedule, noise, &mut rng)?;
        let mut selected = vec![false; clean.len()];
        chosen.iter().for_each(|&i| selected[i] = true);
        let loss_positions = if config.full_sequence_loss {
            clean.iter().map(|&id| !is_special(id)).collect()
        } else {
            selected.clone()
        };
        let mut langs = vec![p.source_lang; src.len() + 1];
        langs.extend(std::iter::repeat_n(p.target_lang, tgt.len()));
        let mut positions: Vec<u32> = (0..=src.len() as u32).collect();
        positions.extend(0..tgt.len() as u32);
        batch.ids.push(ids);
        batch.clean.push(clean);
        batch.langs.push(langs);
        batch.positions.push(positions);
        batch.selected.push(selected);
        batch.loss_positions.push(loss_positions);
        batch.timesteps.push(t);
        batch.target_lengths.push(tgt.len().max(1));
    }
    Ok(batch)
}

impl TdlmBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `length_weight` 0 leaves the length head out of the pretraining loss.
    pub fn prepare(&self, length_weight: f64) -> Result<PreparedBatch> {
        let seqs = (0..self.len())
            .map(|i| {
                let seg = Segment::new(self.ids[i].clone(), self.langs[i].clone(), self.positions[i].clone())?;
                Ok(SequenceInput {
                    encoder: seg.clone(),
                    decoder: seg,
                    timestep: self.timesteps[i],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedBatch {
            input: ModelInput::from_sequences(&seqs)?,
            targets: LossTargets {
                targets: self.clean.clone(),
                loss_positions: self.loss_positions.clone(),
                true_lengths: self.target_lengths.clone(),
                length_weight,
            },
        })
    }
}

pub fn make_finetune_batch(
    pairs: &[EncodedPair],
    schedule: &NoiseSchedule,
    noise: &NoiseKind,
    config: &TrainConfig,
    step_seed: u64,
) -> Result<FinetuneBatch> {
    check_t(schedule, noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let mut batch = FinetuneBatch {
        encoder: vec![],
        decoder: vec![],
        targets: vec![],
        loss_positions: vec![],
        true_lengths: vec![],
        timesteps: vec![],
    };
    for p in pairs {
        let src = &p.source[..p.source.len().min(config.max_len)];
        let tgt = &p.target[..p.target.len().min(config.max_len)];
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::InvalidArgument("fine-tuning pair with an empty side".into()));
        }
        let t = rng.random_range(1..=schedule.steps());
        let xt = forward_sample_with(tgt, t, schedule, noise, &mut rng)?;
        let loss_positions = xt.iter().zip(tgt).map(|(&a, &b)| noise.is_noisy(a, b)).collect();
        batch.encoder.push(Segment::monolingual(src.to_vec(), p.source_lang));
        batch.decoder.push(Segment::monolingual(xt, p.target_lang));
        batch.targets.push(tgt.to_vec());
        batch.loss_positions.push(loss_positions);
        batch.true_lengths.push(tgt.len());
        batch.timesteps.push(t);
    }
    Ok(batch)
}

impl FinetuneBatch {
    pub fn len(&self) -> usize {
        self.encoder.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoder.is_empty()
    }

    pub fn prepare(&self, length_weight: f64) -> Result<PreparedBatch> {
        let seqs: Vec<SequenceInput> = (0..self.len())
            .map(|i| SequenceInput {
                encoder: self.encoder[i].clone(),
                decoder: self.decoder[i].clone(),
                timestep: self.timesteps[i],
            })
            .collect();
        Ok(PreparedBatch {
            input: ModelInput::from_sequences(&seqs)?,
            targets: LossTargets {
                targets: self.targets.clone(),
                loss_positions: self.loss_positions.clone(),
                true_lengths: self.true_lengths.clone(),
                length_weight,
            },
        })
    }
}

/// Groups pair indices into batches of similar length whose padded size stays within
/// the token budget, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct TokenBatcher {
    /// `(source_len, target_len)` per pair.
    lengths: Vec<(usize, usize)>,
    max_tokens: usize,
    seed: u64,
    epoch: u64,
    batches: Vec<Vec<usize>>,
    cursor: usize,
}

impl TokenBatcher {
    /// `extra_per_pair` is added to the source side, e.g. 1 for the pretraining separator.
    pub fn new(pairs: &[EncodedPair], max_tokens: usize, extra_per_pair: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("cannot batch an empty corpus".into()));
        }
        let lengths = pairs.iter().map(|p| (p.source.len() + extra_per_pair, p.target.len())).collect();
        let mut b = TokenBatcher {
            lengths,
            max_tokens,
            seed,
            epoch: 0,
            batches: vec![],
            cursor: 0,
        };
        b.plan_epoch();
        Ok(b)
    }

    fn plan_epoch(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0xA24B_AED4_963E_E407));
        let mut order: Vec<usize> = (0..self.lengths.len()).collect();
        order.shuffle(&mut rng);
        // Stable sort keeps the shuffled order among equal lengths.
        order.sort_by_key(|&i| self.lengths[i].0 + self.lengths[i].1);
        let mut batches = Vec::new();
        let mut current: Vec<usize> = Vec::new();
        let (mut max_s, mut max_t) = (0, 0);
        for i in order {
            let (s, t) = self.lengths[i];
            let (ns, nt) = (max_s.max(s), max_t.max(t));
            if !current.is_empty() && (current.len() + 1) * (ns + nt) > self.max_tokens {
                batches.push(std::mem::take(&mut current));
                max_s = s;
                max_t = t;
            } else {
                max_s = ns;
                max_t = nt;
            }
            current.push(i);
        }
        if !current.is_empty() {
            batches.push(current);
        }
        batches.shuffle(&mut rng);
        self.batches = batches;
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor == self.batches.len() {
            self.epoch += 1;
            self.plan_epoch();
        }
        self.cursor += 1;
        self.batches[self.cursor - 1].clone()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Moves the cursor as if `n` batches had been drawn from a fresh batcher.
    pub fn skip(&mut self, n: u64) {
        for _ in 0..n {
            self.next_batch();
        }
    }
}
