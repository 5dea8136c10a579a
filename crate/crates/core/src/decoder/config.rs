use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::UnitVocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    /// Rotary attention positions plus convolutional position mixing.
    Rotary,
    /// Additive sinusoidal positions on the input sequence.
    Sinusoidal,
}

/// Velocity-network and training-objective hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mel_dim: usize,
    /// Unit ids plus the FILLER and PAD specials.
    pub vocab_size: usize,
    pub text_dim: usize,
    pub text_conv_layers: usize,
    pub ff_mult: usize,
    pub conv_kernel: usize,
    pub time_freq_dim: usize,
    pub positional: Positional,
    pub cond_drop_prob: f64,
    pub mask_frac_range: [f64; 2],
    /// Fixed affine map of log-mel into the model's working range:
    /// `(mel - mel_mean) / mel_std`.
    pub mel_mean: f64,
    pub mel_std: f64,
}

impl DecoderConfig {
    /// Full-size configuration (22 layers, 16 heads, ~300M parameters).
    pub fn paper() -> Self {
        Self {
            layers: 22,
            heads: 16,
            model_dim: 1024,
            mel_dim: 80,
            vocab_size: UnitVocabulary::new(500).total_size(),
            text_dim: 512,
            text_conv_layers: 4,
            ff_mult: 2,
            conv_kernel: 31,
            time_freq_dim: 256,
            positional: Positional::Rotary,
            cond_drop_prob: 0.2,
            mask_frac_range: [0.7, 1.0],
            mel_mean: -4.0,
            mel_std: 2.0,
        }
    }

    /// CPU-trainable configuration for a codebook of `k_units` clusters.
    pub fn desk(k_units: usize) -> Self {
        Self {
            layers: 4,
            heads: 4,
            model_dim: 256,
            vocab_size: UnitVocabulary::new(k_units).total_size(),
            text_dim: 64,
            text_conv_layers: 1,
            conv_kernel: 15,
            time_freq_dim: 128,
            ..Self::paper()
        }
    }

    /// Two-layer toy used for gradient checks.
    pub fn tiny(k_units: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            model_dim: 16,
            vocab_size: UnitVocabulary::new(k_units).total_size(),
            text_dim: 8,
            text_conv_layers: 1,
            conv_kernel: 5,
            time_freq_dim: 16,
            ..Self::paper()
        }
    }

    pub fn vocabulary(&self) -> UnitVocabulary {
        UnitVocabulary::new(self.vocab_size - UnitVocabulary::SPECIALS.len())
    }

    pub fn filler_token(&self) -> u32 {
        self.vocabulary().filler()
    }

    pub fn normalize(&self, mel: &Tensor) -> Result<Tensor> {
        Ok(mel.affine(1.0 / self.mel_std, -self.mel_mean / self.mel_std)?)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.affine(self.mel_std, self.mel_mean)?)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("decoder: {m}")));
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.mel_dim == 0 {
            return bad("layers, heads, model_dim and mel_dim must be positive".into());
        }
        if self.model_dim % self.heads != 0 || self.head_dim() % 2 != 0 {
            return bad(format!(
                "model_dim {} must split into {} heads of even width",
                self.model_dim, self.heads
            ));
        }
        if self.vocab_size <= UnitVocabulary::SPECIALS.len() {
            return bad("vocab_size must leave room for unit ids".into());
        }
        if self.conv_kernel % 2 == 0 {
            return bad("conv_kernel must be odd".into());
        }
        if self.time_freq_dim < 2 || self.time_freq_dim % 2 != 0 || self.text_dim == 0 {
            return bad("time_freq_dim must be even and text_dim positive".into());
        }
        if !(0.0..1.0).contains(&self.cond_drop_prob) {
            return bad(format!("cond_drop_prob {} outside [0, 1)", self.cond_drop_prob));
        }
        let [lo, hi] = self.mask_frac_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("mask_frac_range [{lo}, {hi}] must satisfy 0 < low <= high <= 1"));
        }
        if !(self.mel_std > 0.0) || !self.mel_mean.is_finite() {
            return bad("mel_std must be positive and mel_mean finite".into());
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam with linear warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    /// Decay linearly to zero after warmup instead of holding the peak.
    pub linear_decay: bool,
}

impl OptimConfig {
    pub fn paper() -> Self {
        Self {
            peak_lr: 5e-5,
            warmup_steps: 100_000,
            total_steps: 1_350_000,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            linear_decay: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_steps: 500,
            total_steps: 5_000,
            batch_size: 4,
            ..Self::paper()
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.linear_decay || self.total_steps <= self.warmup_steps {
            return self.peak_lr;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64;
        self.peak_lr * remaining / (self.total_steps - self.warmup_steps) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("optim: peak_lr and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optim: betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
