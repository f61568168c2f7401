//! Non-autoregressive generation: predict the target length, start from the noise
//! kind's stationary state and walk a grid of reverse steps down to `t = 0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::diffusion::{reverse_step_with, DiffusionState, NoiseKind, ReverseMode};
use crate::evaluation::{evaluate_lines, EvalMode, EvalReport};
use crate::model::{DenoiserModel, ForwardMode, Segment, SideBatch};
use crate::schedule::NoiseSchedule;
use crate::seeding::{derive_seed, DECODE_STREAM};
use crate::tokenizer::{BpeModel, Vocabulary};
use crate::{Error, Result, TokenId};

/// Rows decoded per forward pass.
const DECODE_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    Stochastic,
    /// Reveal the most confident noisy positions first.
    Topk,
}

impl std::str::FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(RoutingMode::Stochastic),
            "topk" => Ok(RoutingMode::Topk),
            other => Err(Error::Config(format!("unknown routing mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub n_iterations: usize,
    /// Number of top-ranked lengths decoded per source.
    pub length_beam: usize,
    pub routing: RoutingMode,
    pub seed: u64,
    /// Keep every intermediate state of the chosen candidate.
    pub trace: bool,
}

impl DecodeConfig {
    pub fn new(n_iterations: usize) -> Self {
        DecodeConfig {
            n_iterations,
            length_beam: 1,
            routing: RoutingMode::Topk,
            seed: 0,
            trace: false,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.n_iterations == 0 || self.n_iterations > steps {
            return Err(Error::Config(format!(
                "n_iterations must lie in 1..={steps}, got {}",
                self.n_iterations
            )));
        }
        if self.length_beam == 0 {
            return Err(Error::Config("length_beam must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub source: String,
    pub hypothesis: String,
    pub ids: Vec<TokenId>,
    pub predicted_length: usize,
    /// Mean token log-probability under the final denoiser call.
    pub score: f64,
    /// Lengths that were decoded, best-ranked first.
    pub candidate_lengths: Vec<usize>,
    /// States from `x_T` down to `x_0` when tracing.
    pub trace: Option<Vec<Vec<TokenId>>>,
}

/// `n` steps from `T` down to 1, evenly spaced and strictly decreasing. Reverse step
/// `i` moves from `grid[i]` to `grid[i + 1]`, the last one to 0.
pub fn step_grid(steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > steps {
        return Err(Error::InvalidArgument(format!(
            "cannot place {n} iterations on {steps} steps"
        )));
    }
    if n == 1 {
        return Ok(vec![steps]);
    }
    let span = (steps - 1) as f64 / (n - 1) as f64;
    Ok((0..n)
        .map(|i| (steps as f64 - i as f64 * span).round() as usize)
        .collect())
}

fn rank_lengths(scores: &[f64]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = scores.iter().enumerate().map(|(k, &s)| (k + 1, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Every length `1..=max_len` with its log-probability, best first; ties go to the
/// shorter length.
pub fn predict_length(model: &DenoiserModel, encoder: &Segment) -> Result<Vec<(usize, f64)>> {
    let batch = SideBatch::from_segments(&[encoder])?;
    let enc = model.encode(&batch, ForwardMode::Eval)?;
    let lp = crate::model::length_log_probs(&enc)?;
    Ok(rank_lengths(&lp[0]))
}

/// A source ready for decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceIds {
    pub ids: Vec<TokenId>,
    pub source_lang: u32,
    pub target_lang: u32,
}

/// Decoded ids for one source.
#[derive(Debug, Clone, PartialEq)]
pub struct IdTranslation {
    pub ids: Vec<TokenId>,
    pub predicted_length: usize,
    pub score: f64,
    pub candidate_lengths: Vec<usize>,
    pub trace: Option<Vec<Vec<TokenId>>>,
}

struct Row {
    source: usize,
    state: DiffusionState,
    rng: ChaCha8Rng,
    trace: Vec<Vec<TokenId>>,
    score: f64,
}

/// Decodes many sources. Row randomness is derived from `(seed, source index, beam
/// rank)`, so results do not depend on how rows are grouped into forward passes.
pub fn generate_ids(
    model: &DenoiserModel,
    sources: &[SourceIds],
    schedule: &NoiseSchedule,
    noise: &NoiseKind,
    vocab: &Vocabulary,
    config: &DecodeConfig,
) -> Result<Vec<IdTranslation>> {
    config.validate(schedule.steps())?;
    let mc = model.config();
    if mc.vocab_size != vocab.len() {
        return Err(Error::Config("model and vocabulary sizes differ".into()));
    }
    let grid = step_grid(schedule.steps(), config.n_iterations)?;
    let max_len = mc.max_len;
    let mut out = Vec::with_capacity(sources.len());
    let per_chunk = (DECODE_CHUNK / config.length_beam).max(1);
    for (chunk_idx, chunk) in sources.chunks(per_chunk).enumerate() {
        let base = chunk_idx * per_chunk;
        for s in chunk {
            if s.ids.is_empty() || s.ids.len() > max_len {
                return Err(Error::InvalidArgument(format!(
                    "source has {} tokens; decoding needs 1..={max_len}",
                    s.ids.len()
                )));
            }
        }
        let segments: Vec<Segment> = chunk.iter().map(|s| Segment::monolingual(s.ids.clone(), s.source_lang)).collect();
        let refs: Vec<&Segment> = segments.iter().collect();
        let enc_batch = SideBatch::from_segments(&refs)?;
        let encoded = model.encode(&enc_batch, ForwardMode::Eval)?;
        let length_lp = crate::model::length_log_probs(&encoded)?;

        let mut rows = Vec::new();
        let mut candidates = Vec::with_capacity(chunk.len());
        for (i, lp) in length_lp.iter().enumerate() {
            let ranked = rank_lengths(lp);
            let lens: Vec<usize> = ranked.iter().take(config.length_beam).map(|r| r.0).collect();
            for (beam, &len) in lens.iter().enumerate() {
                let seed = derive_seed(config.seed, DECODE_STREAM, ((base + i) as u64) << 8 | beam as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ids = noise.stationary(len, &mut rng);
                rows.push(Row {
                    source: i,
                    trace: if config.trace { vec![ids.clone()] } else { vec![] },
                    state: DiffusionState { ids, t: schedule.steps() },
                    rng,
                    score: f64::NEG_INFINITY,
                });
            }
            candidates.push(lens);
        }
        // Each decoder row reuses its source's encoder output.
        let row_of: Vec<u32> = rows.iter().map(|r| r.source as u32).collect();
        let enc_rows = encoded.select_rows(&row_of)?;

        for (step_idx, &from) in grid.iter().enumerate() {
            let to = grid.get(step_idx + 1).copied().unwrap_or(0);
            let transition = schedule.transition(from, to, noise)?;
            let dec_segments: Vec<Segment> = rows
                .iter()
                .map(|r| Segment::monolingual(r.state.ids.clone(), chunk[r.source].target_lang))
                .collect();
            let dec_refs: Vec<&Segment> = dec_segments.iter().collect();
            let dec_batch = SideBatch::from_segments(&dec_refs)?;
            let timesteps = vec![from; rows.len()];
            let logits = model.decode(&enc_rows, &dec_batch, &timesteps, ForwardMode::Eval)?;
            let log_probs = crate::model::log_probs_host(&logits)?;
            for (r, row) in rows.iter_mut().enumerate() {
                let len = row.state.ids.len();
                let mut x0_hat = Vec::with_capacity(len);
                let mut confidence = Vec::with_capacity(len);
                for lp in log_probs[r].iter().take(len) {
                    let (best, best_lp) = lp
                        .iter()
                        .enumerate()
                        .filter(|(id, _)| !vocab.is_special(*id as TokenId))
                        .fold((0usize, f64::NEG_INFINITY), |acc, (id, &v)| if v > acc.1 { (id, v) } else { acc });
                    x0_hat.push(best as TokenId);
                    confidence.push(best_lp.exp());
                }
                let mode = match config.routing {
                    RoutingMode::Stochastic => ReverseMode::Stochastic,
                    RoutingMode::Topk => ReverseMode::TopK { confidence: &confidence },
                };
                let (next, _) = reverse_step_with(&row.state, &x0_hat, &transition, noise, mode, &mut row.rng)?;
                if to == 0 {
                    let total: f64 = next.ids.iter().enumerate().map(|(j, &id)| log_probs[r][j][id as usize]).sum();
                    row.score = total / len as f64;
                }
                row.state = next;
                if config.trace {
                    row.trace.push(row.state.ids.clone());
                }
            }
        }

        let mut best: Vec<Option<usize>> = vec![None; chunk.len()];
        for (r, row) in rows.iter().enumerate() {
            let slot = &mut best[row.source];
            // Rows are in beam-rank order, so strict comparison keeps the better-ranked length on ties.
            if slot.is_none_or(|b| row.score > rows[b].score) {
                *slot = Some(r);
            }
        }
        for (i, b) in best.into_iter().enumerate() {
            let row = &rows[b.expect("every source has at least one candidate")];
            out.push(IdTranslation {
                ids: row.state.ids.clone(),
                predicted_length: row.state.ids.len(),
                score: row.score,
                candidate_lengths: candidates[i].clone(),
                trace: config.trace.then(|| row.trace.clone()),
            });
        }
    }
    Ok(out)
}

/// Everything needed to turn source text into hypotheses.
pub struct Decoder<'a> {
    pub model: &'a DenoiserModel,
    pub schedule: &'a NoiseSchedule,
    pub noise: &'a NoiseKind,
    pub vocab: &'a Vocabulary,
    pub bpe: &'a BpeModel,
    pub source_lang: String,
    pub target_lang: String,
}

impl Decoder<'_> {
    fn source_ids(&self, text: &str) -> Result<SourceIds> {
        let lang = |tag: &str| {
            self.vocab
                .lang_index(tag)
                .map(|i| i as u32)
                .ok_or_else(|| Error::InvalidArgument(format!("language {tag:?} is not in the vocabulary")))
        };
        Ok(SourceIds {
            ids: self.vocab.encode_ids(self.bpe, text)?,
            source_lang: lang(&self.source_lang)?,
            target_lang: lang(&self.target_lang)?,
        })
    }

    pub fn predict_length(&self, source: &str) -> Result<Vec<(usize, f64)>> {
        let s = self.source_ids(source)?;
        predict_length(self.model, &Segment::monolingual(s.ids, s.source_lang))
    }

    pub fn generate(&self, source: &str, config: &DecodeConfig) -> Result<Translation> {
        Ok(self.generate_all(&[source], config)?.remove(0))
    }

    pub fn generate_all<S: AsRef<str>>(&self, sources: &[S], config: &DecodeConfig) -> Result<Vec<Translation>> {
        let ids = sources
            .iter()
            .map(|s| self.source_ids(s.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let decoded = generate_ids(self.model, &ids, self.schedule, self.noise, self.vocab, config)?;
        sources
            .iter()
            .zip(decoded)
            .map(|(src, d)| {
                Ok(Translation {
                    source: src.as_ref().to_string(),
                    hypothesis: self.vocab.decode_ids(&d.ids)?,
                    ids: d.ids,
                    predicted_length: d.predicted_length,
                    score: d.score,
                    candidate_lengths: d.candidate_lengths,
                    trace: d.trace,
                })
            })
            .collect()
    }

    /// Decodes `corpus` once per iteration count and scores each pass.
    pub fn sweep_iterations(
        &self,
        corpus: &ParallelCorpus,
        iterations: &[usize],
        config: &DecodeConfig,
        mode: EvalMode,
    ) -> Result<Vec<EvalReport>> {
        let sources: Vec<&str> = corpus.pairs.iter().map(|p| p.source.as_str()).collect();
        let refs: Vec<&str> = corpus.pairs.iter().map(|p| p.target.as_str()).collect();
        iterations
            .iter()
            .map(|&n| {
                let cfg = DecodeConfig {
                    n_iterations: n,
                    trace: false,
                    ..config.clone()
                };
                let hyps: Vec<String> = self.generate_all(&sources, &cfg)?.into_iter().map(|t| t.hypothesis).collect();
                let hyp_refs: Vec<&str> = hyps.iter().map(String::as_str).collect();
                let mut report = evaluate_lines(&hyp_refs, &refs, self.bpe, mode)?;
                report.n_iterations = Some(n);
                Ok(report)
            })
            .collect()
    }
}

/// CSV of a sweep, one row per iteration count.
pub fn sweep_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{}\n", EvalReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
