use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture of the encoder-decoder denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Longest sequence; also the number of length classes.
    pub max_len: usize,
    /// Rows of the timestep embedding; valid timesteps are `0..n_timesteps`.
    pub n_timesteps: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub n_langs: usize,
}

impl ModelConfig {
    /// Desk-scale profile: 2+2 layers, hidden 64, 4 heads.
    pub fn toy(vocab_size: usize, n_langs: usize, diffusion_steps: usize) -> Self {
        ModelConfig {
            n_layers_enc: 2,
            n_layers_dec: 2,
            hidden: 64,
            n_heads: 4,
            ffn_dim: 256,
            max_len: 64,
            n_timesteps: diffusion_steps + 1,
            dropout: 0.1,
            vocab_size,
            n_langs,
        }
    }

    /// 6+6 layers, hidden 512, 8 heads, length 256, dropout 0.2.
    pub fn full(vocab_size: usize, n_langs: usize, diffusion_steps: usize) -> Self {
        ModelConfig {
            n_layers_enc: 6,
            n_layers_dec: 6,
            hidden: 512,
            n_heads: 8,
            ffn_dim: 2048,
            max_len: 256,
            n_timesteps: diffusion_steps + 1,
            dropout: 0.2,
            vocab_size,
            n_langs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.hidden == 0 || self.n_heads == 0 || self.hidden % self.n_heads != 0 {
            return fail(format!(
                "hidden ({}) must be a positive multiple of n_heads ({})",
                self.hidden, self.n_heads
            ));
        }
        if self.max_len == 0 {
            return fail("max_len must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.vocab_size == 0 || self.n_langs == 0 || self.n_timesteps == 0 || self.ffn_dim == 0 {
            return fail("vocab_size, n_langs, n_timesteps and ffn_dim must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// Closed-form parameter count.
    ///
    /// ```text
    /// embeddings   (V + max_len + n_langs + n_timesteps) * H
    /// attention    4 * (H^2 + H)
    /// layer norm   2 * H
    /// feed-forward 2 * H * F + F + H
    /// encoder      L_e * (2 LN + attn + ffn)
    /// decoder      L_d * (3 LN + 2 attn + ffn)
    /// final norms  2 * 2 * H
    /// output       H * V + V
    /// length head  H * max_len + max_len
    /// ```
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden;
        let f = self.ffn_dim;
        let v = self.vocab_size;
        let embeddings = (v + self.max_len + self.n_langs + self.n_timesteps) * h;
        let attn = 4 * (h * h + h);
        let ln = 2 * h;
        let ffn = 2 * h * f + f + h;
        let enc = self.n_layers_enc * (2 * ln + attn + ffn);
        let dec = self.n_layers_dec * (3 * ln + 2 * attn + ffn);
        embeddings + enc + dec + 2 * ln + (h * v + v) + (h * self.max_len + self.max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_names_violation() {
        let mut c = ModelConfig::toy(12, 2, 20);
        assert!(c.validate().is_ok());
        c.n_heads = 5;
        assert!(c.validate().unwrap_err().to_string().contains("n_heads"));
        let mut c = ModelConfig::toy(12, 2, 20);
        c.dropout = 1.0;
        assert!(c.validate().unwrap_err().to_string().contains("dropout"));
        let mut c = ModelConfig::toy(12, 2, 20);
        c.max_len = 0;
        assert!(c.validate().unwrap_err().to_string().contains("max_len"));
    }
}
