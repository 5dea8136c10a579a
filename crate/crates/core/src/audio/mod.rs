//! Audio carrier type, WAV I/O, resampling and the log-mel front end.

mod mel;
mod resample;
mod stft;
mod wav;

pub use mel::{log_mel, read_mel, write_mel, MelConfig, MelExtractor, MelSpectrogram};
pub use resample::resample;
pub use stft::{Complex32, Stft};
pub use wav::{load_waveform, write_waveform};

use crate::error::{Error, Result};

/// Sample rate every model-facing stage runs at.
pub const MODEL_SAMPLE_RATE: u32 = 16_000;

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::domain("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f32 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (ss / self.samples.len() as f64).sqrt() as f32
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Resample to the model rate if needed.
    pub fn to_model_rate(&self) -> Result<Waveform> {
        resample(self, MODEL_SAMPLE_RATE)
    }
}
