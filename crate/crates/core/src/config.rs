//! Run configuration: one TOML file with a preset name and per-section
//! overrides. Presets are built in; every key is checked strictly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::MelConfig;
use crate::decoder::{DecoderConfig, OptimConfig, SamplerConfig, TrainerConfig};
use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::eval::SpeakerExtractor;
use crate::quantizer::KMeansConfig;
use crate::vocoder::VocoderSpec;

/// Codebook size of the desk preset: the ten bundled utterances hold about
/// six hundred embedding frames, too few to populate 500 clusters.
pub const DESK_UNITS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-scale hyperparameters: 22 layers, batch 64, 1.35M updates.
    Paper,
    /// Small model and schedule that train on a CPU.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSection {
    pub model: DecoderConfig,
    pub optim: OptimConfig,
    pub trainer: TrainerConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub speaker: SpeakerExtractor,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Base for relative paths given on the command line; unset means the
    /// current directory.
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub audio: MelConfig,
    pub encoder: EncoderSpec,
    pub kmeans: KMeansConfig,
    pub decoder: DecoderSection,
    pub sampler: SamplerConfig,
    pub vocoder: crate::vocoder::VocoderSpec,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (k, model, optim) = match preset {
            Preset::Paper => (500, DecoderConfig::paper(), OptimConfig::paper()),
            Preset::Desk => (DESK_UNITS, DecoderConfig::desk(DESK_UNITS), OptimConfig::desk()),
        };
        Self {
            preset,
            audio: MelConfig::default(),
            encoder: EncoderSpec::default(),
            kmeans: KMeansConfig {
                k,
                ..KMeansConfig::default()
            },
            decoder: DecoderSection {
                model,
                optim,
                trainer: TrainerConfig::default(),
            },
            sampler: SamplerConfig::default(),
            vocoder: VocoderSpec::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
        }
    }

    /// Parse a config file: `preset` selects the base values, every other
    /// key overrides one field. Unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let preset = match user.get("preset") {
            None => return Err(Error::Config("missing `preset` (paper or desk)".into())),
            Some(v) => Preset::deserialize(v.clone()).map_err(|e| Error::Config(format!("preset: {e}")))?,
        };
        Self::with_overrides(preset, user)
    }

    /// Start from `preset` and apply the keys of `overrides`.
    pub fn with_overrides(preset: Preset, overrides: toml::Table) -> Result<Self> {
        let base = toml::Table::try_from(Self::preset(preset)).expect("presets serialize");
        let mut merged = toml::Value::Table(base);
        merge(&mut merged, toml::Value::Table(overrides));
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ArtifactMissing(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        if self.audio != MelConfig::default() {
            return Err(Error::Config(
                "audio: the analysis front end is fixed; trained artifacts assume the default settings".into(),
            ));
        }
        self.decoder.model.validate()?;
        self.decoder.optim.validate()?;
        self.decoder.trainer.validate()?;
        self.vocoder.validate()?;
        if self.kmeans.k == 0 {
            return Err(Error::Config("kmeans: k must be positive".into()));
        }
        let vocab_k = self.decoder.model.vocabulary().k_units;
        if vocab_k != self.kmeans.k {
            return Err(Error::Config(format!(
                "decoder vocabulary covers {vocab_k} units but kmeans.k is {}",
                self.kmeans.k
            )));
        }
        if self.sampler.steps == 0 {
            return Err(Error::Config("sampler: steps must be at least 1".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_values() {
        let c = RunConfig::preset(Preset::Paper);
        assert_eq!(c.audio.sample_rate, 16_000);
        assert_eq!((c.audio.n_mels, c.audio.hop_length), (80, 160));
        assert_eq!(c.kmeans.k, 500);
        assert_eq!((c.decoder.model.layers, c.decoder.model.heads), (22, 16));
        let o = &c.decoder.optim;
        assert_eq!((o.peak_lr, o.warmup_steps, o.batch_size, o.total_steps), (5e-5, 100_000, 64, 1_350_000));
        c.validate().unwrap();
    }

    #[test]
    fn desk_round_trips_through_toml() {
        let c = RunConfig::preset(Preset::Desk);
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_toml_str("preset = \"desk\"\n[sampler]\nsteps = 8\n[decoder.optim]\npeak_lr = 3e-4\n").unwrap();
        assert_eq!(c.sampler.steps, 8);
        assert_eq!(c.decoder.optim.peak_lr, 3e-4);
        assert_eq!(c.decoder.model.layers, 4);
    }

    #[test]
    fn strict_parsing() {
        for bad in [
            "preset = \"desk\"\nbogus = 1\n",
            "preset = \"desk\"\n[sampler]\nstep = 8\n",
            "preset = \"desk\"\n[decoder.model]\nlayerz = 2\n",
            "preset = \"huge\"\n",
            "[sampler]\nsteps = 8\n",
            "preset = \"desk\"\n[kmeans]\nk = 10\n",
            "preset = \"desk\"\n[audio]\nhop_length = 200\n",
        ] {
            assert!(matches!(RunConfig::from_toml_str(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
