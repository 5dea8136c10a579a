//! Log-mel to waveform. The built-in path inverts the filterbank with a
//! regularized pseudo-inverse and recovers phase iteratively (Griffin-Lim);
//! the external path hands the mel file to a user-supplied program.

use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::audio::{load_waveform, write_mel, Complex32, MelConfig, MelExtractor, MelSpectrogram, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum VocoderKind {
    PhaseRetrieval,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocoderSpec {
    pub kind: VocoderKind,
    pub gl_iters: usize,
    /// Program (plus leading arguments) invoked as `cmd <mel> <wav>`.
    pub external_cmd: Option<String>,
}

impl Default for VocoderSpec {
    fn default() -> Self {
        Self {
            kind: VocoderKind::PhaseRetrieval,
            gl_iters: 32,
            external_cmd: None,
        }
    }
}

impl VocoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gl_iters == 0 {
            return Err(Error::Config("vocoder: gl_iters must be at least 1".into()));
        }
        if self.kind == VocoderKind::External && self.external_cmd.as_deref().map_or(true, |c| c.trim().is_empty()) {
            return Err(Error::Config("vocoder: external kind needs external_cmd".into()));
        }
        Ok(())
    }
}

/// Griffin-Lim vocoder bound to one analysis configuration.
#[derive(Debug, Clone)]
pub struct PhaseRetrieval {
    extractor: MelExtractor,
    /// `n_bins × n_mels`, row-major: maps mel energies to linear magnitudes.
    inverse_filters: Vec<f32>,
}

impl PhaseRetrieval {
    pub fn new(config: MelConfig) -> Result<Self> {
        let extractor = MelExtractor::new(config)?;
        let inverse_filters = regularized_pinv(extractor.filters(), extractor.config().n_mels, extractor.n_bins());
        Ok(Self {
            extractor,
            inverse_filters,
        })
    }

    pub fn extractor(&self) -> &MelExtractor {
        &self.extractor
    }

    /// Non-negative linear magnitudes, `frames × n_bins`.
    pub fn linear_magnitudes(&self, mel: &MelSpectrogram) -> Vec<f32> {
        let n_mels = mel.n_mels;
        let bins = self.extractor.n_bins();
        let mut out = Vec::with_capacity(mel.n_frames * bins);
        for frame in mel.rows() {
            let energy: Vec<f32> = frame.iter().map(|v| v.exp()).collect();
            for row in self.inverse_filters.chunks_exact(n_mels) {
                let m: f32 = row.iter().zip(&energy).map(|(a, b)| a * b).sum();
                out.push(m.max(0.0));
            }
        }
        out
    }

    pub fn synthesize(&self, mel: &MelSpectrogram, gl_iters: usize) -> Result<Waveform> {
        let cfg = self.extractor.config();
        if mel.n_mels != cfg.n_mels {
            return Err(Error::contract(format!(
                "vocoder expects {} mel channels, got {}",
                cfg.n_mels, mel.n_mels
            )));
        }
        if gl_iters == 0 {
            return Err(Error::contract("gl_iters must be at least 1"));
        }
        if mel.n_frames == 0 {
            return Err(Error::domain("cannot vocode an empty mel"));
        }
        let stft = self.extractor.stft();
        let mags = self.linear_magnitudes(mel);
        // zero initial phase keeps the result deterministic
        let mut spec: Vec<Complex32> = mags.iter().map(|&m| Complex32::new(m, 0.0)).collect();
        let mut signal = stft.inverse(&spec, mel.n_frames);
        for _ in 0..gl_iters {
            let rebuilt = stft.forward(&signal);
            for ((s, r), &m) in spec.iter_mut().zip(&rebuilt).zip(&mags) {
                let n = r.norm();
                *s = if n > 1e-12 {
                    *r * (m / n)
                } else {
                    Complex32::new(m, 0.0)
                };
            }
            signal = stft.inverse(&spec, mel.n_frames);
        }
        let peak = signal.iter().fold(0.0f32, |p, v| p.max(v.abs()));
        if peak > 1.0 {
            signal.iter_mut().for_each(|v| *v /= peak);
        }
        Waveform::new(signal, cfg.sample_rate)
    }
}

/// `F^T (F F^T + lambda I)^-1` for a filterbank `F` of shape `rows × cols`.
fn regularized_pinv(filters: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let f = DMatrix::from_row_slice(rows, cols, &filters.iter().map(|&v| v as f64).collect::<Vec<_>>());
    let gram = &f * f.transpose();
    let lambda = 1e-6 * gram.trace() / rows as f64;
    let reg = gram + DMatrix::identity(rows, rows) * lambda;
    let inv = reg.try_inverse().expect("regularized Gram matrix is positive definite");
    let pinv = f.transpose() * inv;
    // row-major cols × rows
    (0..cols)
        .flat_map(|i| (0..rows).map(move |j| (i, j)))
        .map(|(i, j)| pinv[(i, j)] as f32)
        .collect()
}

/// Vocode with the default analysis configuration or an external program.
pub fn mel_to_waveform(mel: &MelSpectrogram, spec: &VocoderSpec) -> Result<Waveform> {
    spec.validate()?;
    match spec.kind {
        VocoderKind::PhaseRetrieval => PhaseRetrieval::new(MelConfig::default())?.synthesize(mel, spec.gl_iters),
        VocoderKind::External => run_external(spec.external_cmd.as_deref().unwrap_or_default(), mel),
    }
}

/// Invoke `cmd <mel path> <wav path>` and read back the WAV it writes.
pub fn run_external(cmd: &str, mel: &MelSpectrogram) -> Result<Waveform> {
    let dir = ScratchDir::new("vocoder")?;
    let mel_path = dir.path().join("input.mel");
    let wav_path = dir.path().join("output.wav");
    write_mel(&mel_path, mel)?;
    run_tool(cmd, &[&mel_path, &wav_path])?;
    load_waveform(&wav_path)
}

/// Run an external tool given as a whitespace-separated command line, with
/// `paths` appended as the final arguments.
pub(crate) fn run_tool(cmd: &str, paths: &[&Path]) -> Result<()> {
    let mut parts = cmd.split_whitespace();
    let program = parts
        .next()
        .ok_or_else(|| Error::Config("empty external command".into()))?;
    let output = Command::new(program)
        .args(parts)
        .args(paths)
        .output()
        .map_err(|e| Error::External(format!("{program}: {e}")))?;
    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr);
        return Err(Error::External(format!(
            "{program} exited with {}: {}",
            output.status,
            stderr.trim()
        )));
    }
    Ok(())
}

/// A private temporary directory removed on drop.
pub(crate) struct ScratchDir(PathBuf);

impl ScratchDir {
    pub(crate) fn new(tag: &str) -> Result<Self> {
        use std::sync::atomic::{AtomicU64, Ordering};
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let n = COUNTER.fetch_add(1, Ordering::Relaxed);
        let path = std::env::temp_dir().join(format!("ezvc-{tag}-{}-{n}", std::process::id()));
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self(path))
    }

    pub(crate) fn path(&self) -> &Path {
        &self.0
    }
}

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::log_mel;
    use crate::synth::{desk_voices, utterance};

    fn l1(a: &MelSpectrogram, b: &MelSpectrogram) -> f64 {
        let n = a.n_frames.min(b.n_frames) * a.n_mels;
        a.data[..n].iter().zip(&b.data[..n]).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / n as f64
    }

    #[test]
    fn silence_stays_quiet() {
        let floor = MelConfig::default().log_floor.ln();
        let mel = MelSpectrogram::filled(50, 80, floor);
        let w = mel_to_waveform(&mel, &VocoderSpec::default()).unwrap();
        assert!(w.rms() < 1e-3, "rms {}", w.rms());
    }

    #[test]
    fn length_follows_frames() {
        let mel = MelSpectrogram::filled(100, 80, -3.0);
        let w = mel_to_waveform(&mel, &VocoderSpec::default()).unwrap();
        assert!((w.len() as i64 - 16000).abs() <= 1024, "{}", w.len());
        assert!(w.samples.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn rejects_wrong_channels() {
        let mel = MelSpectrogram::filled(10, 40, -3.0);
        assert!(matches!(
            mel_to_waveform(&mel, &VocoderSpec::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn round_trip_error_small_and_monotone() {
        let voc = PhaseRetrieval::new(MelConfig::default()).unwrap();
        let mut errors = [0.0; 3];
        for (s, v) in desk_voices().iter().enumerate() {
            let mel = log_mel(&utterance(*v, 0.6, 50 + s as u64)).unwrap();
            for (e, iters) in errors.iter_mut().zip([1, 8, 32]) {
                let back = log_mel(&voc.synthesize(&mel, iters).unwrap()).unwrap();
                *e += l1(&mel, &back) / 5.0;
            }
        }
        eprintln!("round-trip mel L1 over iterations 1/8/32: {errors:?}");
        assert!(errors[1] <= errors[0] && errors[2] <= errors[1]);
        assert!(errors[2] < 0.35);
    }

    #[test]
    fn deterministic() {
        let mel = log_mel(&utterance(desk_voices()[2], 0.3, 1)).unwrap();
        let voc = PhaseRetrieval::new(MelConfig::default()).unwrap();
        assert_eq!(voc.synthesize(&mel, 4).unwrap().samples, voc.synthesize(&mel, 4).unwrap().samples);
    }

    #[test]
    fn external_requires_command() {
        let spec = VocoderSpec {
            kind: VocoderKind::External,
            ..VocoderSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn external_failure_is_reported() {
        let mel = MelSpectrogram::filled(10, 80, -3.0);
        let err = run_external("false", &mel).unwrap_err();
        assert_eq!(err.kind(), "external");
    }
}
