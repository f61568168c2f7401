use crate::{Error, Result, TokenId};

/// One side of one example: tokens with their language and position planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub ids: Vec<TokenId>,
    /// Language indices (not vocabulary ids), `0..n_langs`.
    pub langs: Vec<u32>,
    pub positions: Vec<u32>,
}

impl Segment {
    pub fn new(ids: Vec<TokenId>, langs: Vec<u32>, positions: Vec<u32>) -> Result<Self> {
        if ids.len() != langs.len() || ids.len() != positions.len() {
            return Err(Error::Shape(format!(
                "segment planes differ in length: ids {}, langs {}, positions {}",
                ids.len(),
                langs.len(),
                positions.len()
            )));
        }
        Ok(Segment { ids, langs, positions })
    }

    /// A single-language segment with positions `0..len`.
    pub fn monolingual(ids: Vec<TokenId>, lang: u32) -> Self {
        let n = ids.len();
        Segment {
            ids,
            langs: vec![lang; n],
            positions: (0..n as u32).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Encoder segment, decoder segment and the decoder's diffusion step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceInput {
    pub encoder: Segment,
    pub decoder: Segment,
    pub timestep: usize,
}

/// Right-padded planes for one side of a batch, row-major `(batch, len)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<TokenId>,
    pub langs: Vec<u32>,
    pub positions: Vec<u32>,
    /// True for real tokens, false for padding.
    pub real: Vec<bool>,
    pub lengths: Vec<usize>,
}

impl SideBatch {
    /// Pads with id 0, language 0, position 0. Padding never reaches a real position
    /// because it is masked out of attention and pooling.
    pub fn from_segments(segments: &[&Segment]) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        if let Some(i) = segments.iter().position(|s| s.is_empty()) {
            return Err(Error::Shape(format!("sequence {i} has no tokens")));
        }
        let batch = segments.len();
        let len = segments.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut out = SideBatch {
            batch,
            len,
            ids: vec![0; batch * len],
            langs: vec![0; batch * len],
            positions: vec![0; batch * len],
            real: vec![false; batch * len],
            lengths: segments.iter().map(|s| s.len()).collect(),
        };
        for (b, s) in segments.iter().enumerate() {
            let row = b * len;
            out.ids[row..row + s.len()].copy_from_slice(&s.ids);
            out.langs[row..row + s.len()].copy_from_slice(&s.langs);
            out.positions[row..row + s.len()].copy_from_slice(&s.positions);
            out.real[row..row + s.len()].iter_mut().for_each(|r| *r = true);
        }
        Ok(out)
    }

    pub fn row_ids(&self, b: usize) -> &[TokenId] {
        &self.ids[b * self.len..b * self.len + self.lengths[b]]
    }
}

/// A padded batch ready for the denoiser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub encoder: SideBatch,
    pub decoder: SideBatch,
    pub timesteps: Vec<usize>,
}

impl ModelInput {
    pub fn from_sequences(seqs: &[SequenceInput]) -> Result<Self> {
        let enc: Vec<&Segment> = seqs.iter().map(|s| &s.encoder).collect();
        let dec: Vec<&Segment> = seqs.iter().map(|s| &s.decoder).collect();
        Ok(ModelInput {
            encoder: SideBatch::from_segments(&enc)?,
            decoder: SideBatch::from_segments(&dec)?,
            timesteps: seqs.iter().map(|s| s.timestep).collect(),
        })
    }

    pub fn batch(&self) -> usize {
        self.encoder.batch
    }
}
