//! Frame-level embeddings at 50 frames per second.
//!
//! Real self-supervised encoders run out of process and hand their features
//! over as embedding files. For desk-scale work a deterministic surrogate
//! builds embeddings from stacked log-mel context.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{MelConfig, MelExtractor, Waveform, MODEL_SAMPLE_RATE};
use crate::container;
use crate::error::{Error, Result};

pub const EMBEDDING_FRAME_RATE: f32 = 50.0;
/// Mel frames per embedding frame (100 Hz -> 50 Hz).
pub const DECIMATION: usize = 2;
/// Neighbouring frames stacked on each side by the surrogate.
pub const CONTEXT: usize = 2;

const EMB_MAGIC: &[u8] = b"EZVCEMB1\n";
const EMB_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Surrogate,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    /// Layer of the upstream model the features come from. Provenance only.
    pub layer_index: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Surrogate,
            layer_index: 14,
            dim: 400,
            seed: 0,
        }
    }
}

impl EncoderSpec {
    pub fn surrogate(dim: usize, seed: u64) -> Self {
        Self {
            kind: EncoderKind::Surrogate,
            dim,
            seed,
            ..Self::default()
        }
    }

    pub fn source_tag(&self) -> String {
        match self.kind {
            EncoderKind::Surrogate => format!("surrogate:seed={}:dim={}", self.seed, self.dim),
            EncoderKind::Imported => format!("imported:layer={}:dim={}", self.layer_index, self.dim),
        }
    }
}

/// `n_frames × dim` embeddings, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddings {
    pub data: Vec<f32>,
    pub n_frames: usize,
    pub dim: usize,
    pub frame_rate_hz: f32,
    pub source_tag: String,
}

impl FrameEmbeddings {
    pub fn new(data: Vec<f32>, dim: usize, source_tag: impl Into<String>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::contract(format!(
                "{} values do not form rows of dim {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite embedding value".into()));
        }
        Ok(Self {
            n_frames: data.len() / dim,
            data,
            dim,
            frame_rate_hz: EMBEDDING_FRAME_RATE,
            source_tag: source_tag.into(),
        })
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }
}

/// Number of embedding frames produced for a mel of `mel_frames` frames.
pub fn embedding_frame_count(mel_frames: usize) -> usize {
    mel_frames / DECIMATION
}

/// Stand-in encoder: decimated log-mel, ±2 frames of context (edges
/// replicated), then a fixed orthonormal projection drawn from the seed.
///
/// The projection has orthonormal rows, so it preserves distances between
/// stacked feature vectors exactly; only the basis depends on the seed.
#[derive(Debug, Clone)]
pub struct SurrogateEncoder {
    spec: EncoderSpec,
    mel: MelExtractor,
    /// `stacked_dim × dim`, row-major.
    projection: Vec<f32>,
}

impl SurrogateEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        if spec.kind != EncoderKind::Surrogate {
            return Err(Error::contract("surrogate encoder needs kind = surrogate"));
        }
        let mel = MelExtractor::new(MelConfig::default())?;
        let stacked = (2 * CONTEXT + 1) * mel.config().n_mels;
        if spec.dim < stacked {
            return Err(Error::contract(format!(
                "surrogate dim must be at least {stacked} to stay distance preserving, got {}",
                spec.dim
            )));
        }
        let projection = orthonormal_rows(stacked, spec.dim, spec.seed);
        Ok(Self {
            spec,
            mel,
            projection,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Stacked (pre-projection) features, `frames × stacked_dim`.
    pub fn stacked_features(&self, w: &Waveform) -> Result<(Vec<f32>, usize)> {
        if w.sample_rate != MODEL_SAMPLE_RATE {
            return Err(Error::contract(format!(
                "encoder expects {MODEL_SAMPLE_RATE} Hz audio, got {}",
                w.sample_rate
            )));
        }
        let win = self.mel.config().win_length;
        if w.samples.len() < win {
            return Err(Error::domain(format!(
                "waveform of {} samples is shorter than one {win}-sample analysis window",
                w.samples.len()
            )));
        }
        let mel = self.mel.compute(w)?;
        let n = embedding_frame_count(mel.n_frames);
        let n_mels = mel.n_mels;
        let width = (2 * CONTEXT + 1) * n_mels;
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            for c in 0..=2 * CONTEXT {
                let j = (i + c).saturating_sub(CONTEXT).min(n - 1);
                out.extend_from_slice(mel.frame(j * DECIMATION));
            }
        }
        Ok((out, n))
    }

    pub fn embed(&self, w: &Waveform) -> Result<FrameEmbeddings> {
        let (stacked, n) = self.stacked_features(w)?;
        let width = stacked.len() / n;
        let dim = self.spec.dim;
        let mut data = vec![0.0f32; n * dim];
        let mut acc = vec![0.0f64; dim];
        for (row, out) in stacked.chunks_exact(width).zip(data.chunks_exact_mut(dim)) {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (&x, proj) in row.iter().zip(self.projection.chunks_exact(dim)) {
                let x = x as f64;
                for (a, &p) in acc.iter_mut().zip(proj) {
                    *a += x * p as f64;
                }
            }
            for (o, a) in out.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
        FrameEmbeddings::new(data, dim, self.spec.source_tag())
    }
}

pub fn surrogate_embed(w: &Waveform, spec: &EncoderSpec) -> Result<FrameEmbeddings> {
    SurrogateEncoder::new(spec.clone())?.embed(w)
}

/// `rows × cols` matrix with orthonormal rows (requires `rows <= cols`),
/// by modified Gram-Schmidt over Gaussian draws.
fn orthonormal_rows(rows: usize, cols: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        // two passes keep the basis orthogonal to working precision
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis.into_iter().flatten().map(|x| x as f32).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbHeader {
    version: u32,
    frames: usize,
    dim: usize,
    frame_rate_hz: f32,
    source_tag: String,
}

pub(crate) fn encode_embeddings(emb: &FrameEmbeddings) -> Vec<u8> {
    let header = EmbHeader {
        version: EMB_VERSION,
        frames: emb.n_frames,
        dim: emb.dim,
        frame_rate_hz: emb.frame_rate_hz,
        source_tag: emb.source_tag.clone(),
    };
    container::encode(EMB_MAGIC, &header, &emb.data)
}

pub(crate) fn decode_embeddings(bytes: &[u8], expected_dim: usize) -> Result<FrameEmbeddings> {
    let (h, payload): (EmbHeader, _) = container::decode(EMB_MAGIC, bytes)?;
    if h.version != EMB_VERSION {
        return Err(Error::format(format!("unsupported embedding file version {}", h.version)));
    }
    let data = container::read_f32s(payload, h.frames * h.dim, "embedding file")?;
    if h.dim != expected_dim {
        return Err(Error::contract(format!(
            "embedding dim {} does not match expected {expected_dim}",
            h.dim
        )));
    }
    if h.frame_rate_hz != EMBEDDING_FRAME_RATE {
        return Err(Error::contract(format!(
            "embedding frame rate {} Hz, expected {EMBEDDING_FRAME_RATE} Hz",
            h.frame_rate_hz
        )));
    }
    if h.frames == 0 {
        return Err(Error::domain("embedding file holds no frames"));
    }
    let mut emb = FrameEmbeddings::new(data, h.dim, h.source_tag)?;
    emb.frame_rate_hz = h.frame_rate_hz;
    Ok(emb)
}

pub fn export_embeddings(path: impl AsRef<Path>, emb: &FrameEmbeddings) -> Result<()> {
    container::write_file(path.as_ref(), &encode_embeddings(emb))
}

/// Load embeddings written by an external encoder; the matrix is returned
/// exactly as stored.
pub fn import_embeddings(path: impl AsRef<Path>, expected_dim: usize) -> Result<FrameEmbeddings> {
    decode_embeddings(&container::read_file(path.as_ref())?, expected_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn voiced(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0 = rng.random_range(100.0..220.0);
        let s = (0..n)
            .map(|i| {
                let t = i as f64 / 16000.0;
                let env = (t * 3.0).sin().abs();
                let mut v = 0.0;
                for h in 1..12 {
                    v += (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64;
                }
                (0.2 * env * v + 0.01 * rng.random_range(-1.0..1.0)) as f32
            })
            .collect();
        Waveform::new(s, 16000).unwrap()
    }

    fn pairwise(e: &FrameEmbeddings) -> Vec<f64> {
        let mut d = Vec::new();
        for i in 0..e.n_frames {
            for j in i + 1..e.n_frames {
                let s: f64 = e
                    .frame(i)
                    .iter()
                    .zip(e.frame(j))
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum();
                d.push(s.sqrt());
            }
        }
        d
    }

    #[test]
    fn fifty_frames_per_second() {
        let e = surrogate_embed(&voiced(16000, 1), &EncoderSpec::default()).unwrap();
        assert!((e.n_frames as i64 - 50).abs() <= 1);
        assert_eq!(e.dim, 400);
    }

    #[test]
    fn frame_rate_law() {
        let enc = SurrogateEncoder::new(EncoderSpec::default()).unwrap();
        for n in [640, 1000, 3333, 16000, 16159, 24000] {
            let e = enc.embed(&voiced(n, n as u64)).unwrap();
            assert_eq!(e.n_frames, (n / 160) / 2, "n = {n}");
        }
    }

    #[test]
    fn deterministic() {
        let w = voiced(8000, 2);
        let spec = EncoderSpec::surrogate(400, 11);
        let a = surrogate_embed(&w, &spec).unwrap();
        let b = surrogate_embed(&w, &spec).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn seed_change_preserves_distances() {
        let w = voiced(8000, 3);
        for dim in [400, 512] {
            let a = surrogate_embed(&w, &EncoderSpec::surrogate(dim, 1)).unwrap();
            let b = surrogate_embed(&w, &EncoderSpec::surrogate(dim, 2)).unwrap();
            assert_ne!(a.data, b.data);
            for (x, y) in pairwise(&a).iter().zip(pairwise(&b)) {
                assert!((x - y).abs() <= 1e-4 * x.max(1e-3), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn projection_is_orthonormal() {
        let q = orthonormal_rows(20, 30, 5);
        for i in 0..20 {
            for j in 0..20 {
                let d: f64 = (0..30).map(|k| q[i * 30 + k] as f64 * q[j * 30 + k] as f64).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn guards() {
        let short = Waveform::new(vec![0.0; 639], 16000).unwrap();
        assert!(matches!(
            surrogate_embed(&short, &EncoderSpec::default()),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            SurrogateEncoder::new(EncoderSpec::surrogate(128, 0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn container_round_trip_and_guards() {
        let e = surrogate_embed(&voiced(4000, 4), &EncoderSpec::default()).unwrap();
        let bytes = encode_embeddings(&e);
        assert_eq!(decode_embeddings(&bytes, 400).unwrap(), e);
        assert!(matches!(decode_embeddings(&bytes, 1024), Err(Error::Contract(_))));
        assert!(matches!(
            decode_embeddings(&bytes[..bytes.len() - 1], 400),
            Err(Error::Format(_))
        ));
        let empty = FrameEmbeddings::new(vec![], 512, "x").unwrap();
        assert!(matches!(
            decode_embeddings(&encode_embeddings(&empty), 512),
            Err(Error::Domain(_))
        ));
    }
}
