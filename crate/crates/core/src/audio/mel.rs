use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Stft, Waveform};
use crate::container;
use crate::error::{Error, Result};

const MEL_MAGIC: &[u8] = b"EZVCMEL1\n";
const MEL_VERSION: u32 = 1;

/// Front-end analysis parameters.
///
/// Sample rate, channel count and hop follow the decoder's training setup;
/// FFT size, window length, frequency range and log floor are the standard
/// 16 kHz recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f32,
    pub f_max: f32,
    pub log_floor: f32,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 1024,
            win_length: 640,
            hop_length: 160,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("mel: {m}")));
        if self.sample_rate == 0 || self.hop_length == 0 || self.n_mels == 0 {
            return bad("sample_rate, hop_length and n_mels must be positive");
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return bad("win_length must be in 1..=n_fft");
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f32 / 2.0) {
            return bad("need 0 <= f_min < f_max <= sample_rate / 2");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }
}

/// `n_frames × n_mels` natural-log mel energies, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub data: Vec<f32>,
    pub n_frames: usize,
    pub n_mels: usize,
    pub hop_length: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn new(data: Vec<f32>, n_mels: usize, hop_length: usize, sample_rate: u32) -> Result<Self> {
        if n_mels == 0 || data.len() % n_mels != 0 {
            return Err(Error::contract(format!(
                "{} values do not form rows of {n_mels} channels",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite mel value".into()));
        }
        Ok(Self {
            n_frames: data.len() / n_mels,
            data,
            n_mels,
            hop_length,
            sample_rate,
        })
    }

    /// All-`value` spectrogram with the default front-end geometry.
    pub fn filled(n_frames: usize, n_mels: usize, value: f32) -> Self {
        let cfg = MelConfig::default();
        Self {
            data: vec![value; n_frames * n_mels],
            n_frames,
            n_mels,
            hop_length: cfg.hop_length,
            sample_rate: cfg.sample_rate,
        }
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.n_mels..(i + 1) * self.n_mels]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.n_mels)
    }

    /// Frames `start..end` as a new spectrogram.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            data: self.data[start * self.n_mels..end * self.n_mels].to_vec(),
            n_frames: end - start,
            ..*self
        }
    }

    pub fn duration_secs(&self) -> f64 {
        (self.n_frames * self.hop_length) as f64 / self.sample_rate as f64
    }
}

/// Precomputed filterbank plus STFT plan.
#[derive(Debug, Clone)]
pub struct MelExtractor {
    config: MelConfig,
    stft: Stft,
    /// `n_mels × n_bins`, row-major.
    filters: Vec<f32>,
}

impl MelExtractor {
    pub fn new(config: MelConfig) -> Result<Self> {
        config.validate()?;
        let stft = Stft::new(config.n_fft, config.win_length, config.hop_length);
        let filters = mel_filterbank(&config);
        Ok(Self {
            config,
            stft,
            filters,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn filters(&self) -> &[f32] {
        &self.filters
    }

    pub fn n_bins(&self) -> usize {
        self.stft.n_bins()
    }

    pub fn compute(&self, w: &Waveform) -> Result<MelSpectrogram> {
        if w.sample_rate != self.config.sample_rate {
            return Err(Error::contract(format!(
                "log-mel expects {} Hz audio, got {} Hz",
                self.config.sample_rate, w.sample_rate
            )));
        }
        if w.samples.len() < self.config.hop_length {
            return Err(Error::domain(format!(
                "need at least {} samples for one frame, got {}",
                self.config.hop_length,
                w.samples.len()
            )));
        }
        let spec = self.stft.forward(&w.samples);
        let magnitudes: Vec<f32> = spec.iter().map(|c| c.norm()).collect();
        Ok(self.log_mel_from_magnitudes(&magnitudes))
    }

    /// Apply the filterbank and log floor to a `frames × n_bins` linear
    /// magnitude spectrogram.
    pub fn log_mel_from_magnitudes(&self, magnitudes: &[f32]) -> MelSpectrogram {
        let bins = self.n_bins();
        let n_mels = self.config.n_mels;
        let n_frames = magnitudes.len() / bins;
        let mut data = Vec::with_capacity(n_frames * n_mels);
        for frame in magnitudes.chunks_exact(bins) {
            for filter in self.filters.chunks_exact(bins) {
                let e: f32 = filter.iter().zip(frame).map(|(a, b)| a * b).sum();
                data.push(e.max(self.config.log_floor).ln());
            }
        }
        MelSpectrogram {
            data,
            n_frames,
            n_mels,
            hop_length: self.config.hop_length,
            sample_rate: self.config.sample_rate,
        }
    }
}

/// Log-mel spectrogram with the default front end.
pub fn log_mel(w: &Waveform) -> Result<MelSpectrogram> {
    MelExtractor::new(MelConfig::default())?.compute(w)
}

fn hz_to_mel(f: f64) -> f64 {
    // Slaney scale: linear below 1 kHz, logarithmic above
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * (logstep * (m - min_log_mel)).exp()
    } else {
        f_sp * m
    }
}

/// Slaney-style triangular filters with area normalization.
fn mel_filterbank(cfg: &MelConfig) -> Vec<f32> {
    let bins = cfg.n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.f_min as f64);
    let hi = hz_to_mel(cfg.f_max as f64);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..bins)
        .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64)
        .collect();
    let mut out = vec![0.0f32; cfg.n_mels * bins];
    for (m, row) in out.chunks_exact_mut(bins).enumerate() {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (right - left);
        for (k, w) in row.iter_mut().enumerate() {
            let f = bin_hz[k];
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            *w = (rise.min(fall).max(0.0) * norm) as f32;
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct MelHeader {
    version: u32,
    frames: usize,
    channels: usize,
    hop: usize,
    sr: u32,
}

pub(crate) fn encode_mel(mel: &MelSpectrogram) -> Vec<u8> {
    let header = MelHeader {
        version: MEL_VERSION,
        frames: mel.n_frames,
        channels: mel.n_mels,
        hop: mel.hop_length,
        sr: mel.sample_rate,
    };
    container::encode(MEL_MAGIC, &header, &mel.data)
}

pub(crate) fn decode_mel(bytes: &[u8]) -> Result<MelSpectrogram> {
    let (h, payload): (MelHeader, _) = container::decode(MEL_MAGIC, bytes)?;
    if h.version != MEL_VERSION {
        return Err(Error::format(format!("unsupported mel file version {}", h.version)));
    }
    if h.channels == 0 {
        return Err(Error::format("mel file declares zero channels"));
    }
    let data = container::read_f32s(payload, h.frames * h.channels, "mel file")?;
    MelSpectrogram::new(data, h.channels, h.hop, h.sr)
}

pub fn write_mel(path: impl AsRef<Path>, mel: &MelSpectrogram) -> Result<()> {
    container::write_file(path.as_ref(), &encode_mel(mel))
}

pub fn read_mel(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    decode_mel(&container::read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect(), 16000).unwrap()
    }

    #[test]
    fn one_second_gives_100_frames() {
        let mel = log_mel(&noise(16000, 1)).unwrap();
        assert_eq!(mel.n_frames, 100);
        assert_eq!(mel.n_mels, 80);
    }

    #[test]
    fn silence_hits_floor() {
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let mel = log_mel(&w).unwrap();
        let floor = 1e-5f32.ln();
        assert!(mel.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn white_noise_is_finite_and_varied() {
        let mel = log_mel(&noise(16000, 7)).unwrap();
        assert_eq!(mel.n_frames, 100);
        assert!(mel.data.iter().all(|v| v.is_finite()));
        for c in 0..80 {
            let col: Vec<f64> = mel.rows().map(|r| r[c] as f64).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(var > 0.0, "channel {c} constant");
        }
    }

    #[test]
    fn shift_by_hop_shifts_frames() {
        let w = noise(8000, 3);
        let mut shifted = vec![0.0; 160];
        shifted.extend_from_slice(&w.samples);
        let a = log_mel(&w).unwrap();
        let b = log_mel(&Waveform::new(shifted, 16000).unwrap()).unwrap();
        assert_eq!(b.n_frames, a.n_frames + 1);
        // frames whose 640-sample window is clear of both edges
        for i in 3..a.n_frames - 3 {
            for (x, y) in a.frame(i).iter().zip(b.frame(i + 1)) {
                assert!((x - y).abs() < 1e-4, "frame {i}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn floor_is_lower_bound() {
        let floor = 1e-5f32.ln();
        let mut s = noise(4000, 9).samples;
        s[1000..3000].iter_mut().for_each(|v| *v = 0.0);
        let mel = log_mel(&Waveform::new(s, 16000).unwrap()).unwrap();
        assert!(mel.data.iter().all(|&v| v >= floor));
        assert!(mel.data.iter().any(|&v| v == floor));
    }

    #[test]
    fn rejects_empty_and_wrong_rate() {
        let empty = Waveform::new(vec![], 16000).unwrap();
        assert!(matches!(log_mel(&empty), Err(Error::Domain(_))));
        let w = Waveform::new(vec![0.0; 22050], 22050).unwrap();
        assert!(matches!(log_mel(&w), Err(Error::Contract(_))));
    }

    #[test]
    fn filterbank_shape() {
        let cfg = MelConfig::default();
        let fb = mel_filterbank(&cfg);
        assert_eq!(fb.len(), 80 * 513);
        for row in fb.chunks_exact(513) {
            assert!(row.iter().any(|&w| w > 0.0));
        }
        assert!((mel_to_hz(hz_to_mel(4321.0)) - 4321.0).abs() < 1e-6);
    }

    #[test]
    fn mel_file_round_trip_and_guards() {
        let mel = log_mel(&noise(3200, 5)).unwrap();
        let bytes = encode_mel(&mel);
        assert!(bytes.starts_with(b"EZVCMEL1\n"));
        let back = decode_mel(&bytes).unwrap();
        assert_eq!(back, mel);
        assert!(matches!(decode_mel(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_mel(&bad), Err(Error::Format(_))));
    }
}
