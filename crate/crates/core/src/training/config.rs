use serde::{Deserialize, Serialize};

use crate::schedule::ScheduleKind;
use crate::{Error, Result};

/// Which objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Cross-lingual pretraining on concatenated pairs.
    Tdlm,
    /// Translation: clean source in, noised target out.
    Finetune,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tdlm" | "pretrain" => Ok(Task::Tdlm),
            "finetune" => Ok(Task::Finetune),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup_steps: u64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub dropout: f64,
    /// Budget of padded source plus target tokens per batch.
    pub max_tokens_per_batch: usize,
    /// Per-side truncation length.
    pub max_len: usize,
    pub length_weight: f64,
    /// Number of diffusion steps `T`.
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    /// `absorbing` or `multinomial`.
    pub noise: String,
    /// Fraction of real tokens selected for noising in pretraining.
    pub select_fraction: f64,
    /// Pretraining loss over every real token instead of only the selected ones.
    pub full_sequence_loss: bool,
    /// Pretraining also trains the length head to predict the target segment length.
    pub pretrain_length_loss: bool,
    pub n_steps: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn toy() -> Self {
        TrainConfig {
            lr: 1e-3,
            warmup_steps: 500,
            weight_decay: 0.0005,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            dropout: 0.1,
            max_tokens_per_batch: 2048,
            max_len: 64,
            length_weight: 0.1,
            diffusion_steps: 20,
            schedule: ScheduleKind::LinearMask,
            noise: "absorbing".into(),
            select_fraction: 0.15,
            full_sequence_loss: false,
            pretrain_length_loss: true,
            n_steps: 2000,
            checkpoint_every: 0,
            seed: 0,
        }
    }

    /// Fine-tuning settings at full scale. Pretraining uses [`TrainConfig::full_pretrain`].
    pub fn full() -> Self {
        TrainConfig {
            lr: 5e-5,
            warmup_steps: 30_000,
            weight_decay: 0.0005,
            dropout: 0.2,
            max_tokens_per_batch: 4096,
            max_len: 256,
            diffusion_steps: 50,
            n_steps: 300_000,
            checkpoint_every: 5_000,
            ..TrainConfig::toy()
        }
    }

    pub fn full_pretrain() -> Self {
        TrainConfig {
            lr: 5e-4,
            ..TrainConfig::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("length_weight", self.length_weight),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.select_fraction > 0.0 && self.select_fraction <= 1.0) {
            return fail(format!("select_fraction {} must lie in (0, 1]", self.select_fraction));
        }
        if self.max_len < 2 || self.max_tokens_per_batch < 2 * self.max_len {
            return fail(format!(
                "max_tokens_per_batch ({}) must hold at least one pair of max_len ({}) per side",
                self.max_tokens_per_batch, self.max_len
            ));
        }
        if self.diffusion_steps == 0 {
            return fail("diffusion_steps must be at least 1".into());
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then decay proportional to `1/sqrt(step)`. Steps count from 1.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        if self.warmup_steps == 0 {
            return self.lr;
        }
        let w = self.warmup_steps as f64;
        self.lr * (step / w).min((w / step).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid() {
        TrainConfig::toy().validate().unwrap();
        TrainConfig::full().validate().unwrap();
        TrainConfig::full_pretrain().validate().unwrap();
        assert_eq!(TrainConfig::full().lr, 5e-5);
        assert_eq!(TrainConfig::full().max_tokens_per_batch, 4096);
    }

    #[test]
    fn warmup_then_inverse_sqrt() {
        let c = TrainConfig::toy();
        assert!((c.learning_rate(250) - 0.5e-3).abs() < 1e-15);
        assert!((c.learning_rate(500) - 1e-3).abs() < 1e-15);
        assert!((c.learning_rate(2000) - 0.5e-3).abs() < 1e-15);
        let flat = TrainConfig { warmup_steps: 0, ..c };
        assert_eq!(flat.learning_rate(7), flat.lr);
    }

    #[test]
    fn bad_values_are_named() {
        let c = TrainConfig { dropout: 1.5, ..TrainConfig::toy() };
        assert!(c.validate().unwrap_err().to_string().contains("dropout"));
        let c = TrainConfig { lr: -1.0, ..TrainConfig::toy() };
        assert!(c.validate().unwrap_err().to_string().contains("lr"));
    }
}
