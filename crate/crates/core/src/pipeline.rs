//! End-to-end recipes: training-data preparation, voice conversion and
//! resynthesis.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{load_waveform, read_mel, write_mel, MelConfig, MelExtractor, MelSpectrogram, Waveform};
use crate::decoder::sampler::{sample, SampleRequest, SamplerConfig};
use crate::decoder::train::{prompt_tokens, TrainItem};
use crate::decoder::DitModel;
use crate::encoder::{EncoderKind, EncoderSpec, FrameEmbeddings, SurrogateEncoder};
use crate::error::{Error, Result};
use crate::quantizer::{assign, Codebook};
use crate::units::{dedup, read_unit_records, write_unit_records, UnitRecord, UnitSequence};
use crate::vocoder::{mel_to_waveform, PhaseRetrieval, VocoderKind, VocoderSpec};

/// Shortest prompt or source accepted by [`convert`].
pub const MIN_CONVERSION_SECS: f64 = 0.5;

/// Embeddings → nearest-centroid units → run collapse.
pub fn units_from_embeddings(emb: &FrameEmbeddings, cb: &Codebook) -> Result<UnitSequence> {
    Ok(dedup(&assign(cb, emb)?))
}

/// Embed with the surrogate encoder, quantize and deduplicate.
///
/// Imported encoders run out of process; pass their embeddings to
/// [`units_from_embeddings`] instead.
pub fn encode_to_units(w: &Waveform, enc: &EncoderSpec, cb: &Codebook) -> Result<UnitSequence> {
    if enc.kind == EncoderKind::Imported {
        return Err(Error::contract(
            "imported embeddings come from files; quantize them with units_from_embeddings",
        ));
    }
    let w = w.to_model_rate()?;
    let emb = SurrogateEncoder::new(enc.clone())?.embed(&w)?;
    units_from_embeddings(&emb, cb)
}

/// Refuse to quantize with an encoder other than the one the codebook was
/// trained on. Codebooks without provenance are accepted as is.
pub fn check_codebook_encoder(cb: &Codebook, enc: &EncoderSpec) -> Result<()> {
    if cb.trained_on.is_empty() || cb.trained_on.split('+').any(|t| t == enc.source_tag()) {
        return Ok(());
    }
    Err(Error::contract(format!(
        "codebook was trained on {} but the encoder is {}",
        cb.trained_on,
        enc.source_tag()
    )))
}

#[derive(Debug, Clone)]
pub struct ConversionRequest {
    pub source: Waveform,
    pub target: Waveform,
    pub sampler: SamplerConfig,
    pub seed: u64,
    /// Precomputed embeddings, required when the encoder is imported.
    pub source_embeddings: Option<FrameEmbeddings>,
    pub target_embeddings: Option<FrameEmbeddings>,
}

impl ConversionRequest {
    pub fn new(source: Waveform, target: Waveform, seed: u64) -> Self {
        Self {
            source,
            target,
            sampler: SamplerConfig::default(),
            seed,
            source_embeddings: None,
            target_embeddings: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConversionResult {
    pub audio: Waveform,
    /// Exactly the source's frame count: the prompt frames are cut off.
    pub generated_mel: MelSpectrogram,
    pub source_units: UnitSequence,
    pub target_units: UnitSequence,
    pub prompt_frames: usize,
}

/// Everything a conversion needs besides the request itself.
pub struct Converter<'a> {
    pub model: &'a DitModel,
    pub codebook: &'a Codebook,
    pub encoder: EncoderSpec,
    pub vocoder: VocoderSpec,
}

impl Converter<'_> {
    fn units(&self, w: &Waveform, emb: Option<&FrameEmbeddings>, encoder: Option<&SurrogateEncoder>) -> Result<UnitSequence> {
        match (emb, encoder) {
            (Some(e), _) => units_from_embeddings(e, self.codebook),
            (None, Some(enc)) => units_from_embeddings(&enc.embed(w)?, self.codebook),
            (None, None) => Err(Error::contract("imported encoder: the request must carry embeddings")),
        }
    }

    /// Generate the source content in the target's voice.
    pub fn convert(&self, req: &ConversionRequest) -> Result<ConversionResult> {
        let cfg = self.model.config();
        let k = cfg.vocabulary().k_units;
        if self.codebook.k != k {
            return Err(Error::contract(format!(
                "codebook has {} units, decoder vocabulary expects {k}",
                self.codebook.k
            )));
        }
        let source = req.source.to_model_rate()?;
        let target = req.target.to_model_rate()?;
        for (name, w) in [("source", &source), ("target", &target)] {
            if w.duration_secs() < MIN_CONVERSION_SECS {
                return Err(Error::domain(format!(
                    "{name} lasts {:.3} s, need at least {MIN_CONVERSION_SECS} s",
                    w.duration_secs()
                )));
            }
        }
        let extractor = MelExtractor::new(MelConfig::default())?;
        let target_mel = extractor.compute(&target)?;
        let source_mel = extractor.compute(&source)?;

        let encoder = match self.encoder.kind {
            EncoderKind::Surrogate => Some(SurrogateEncoder::new(self.encoder.clone())?),
            EncoderKind::Imported => None,
        };
        let target_units = self.units(&target, req.target_embeddings.as_ref(), encoder.as_ref())?;
        let source_units = self.units(&source, req.source_embeddings.as_ref(), encoder.as_ref())?;

        let prompt_frames = target_mel.n_frames;
        let total = prompt_frames + source_mel.n_frames;
        let tokens = prompt_tokens(&cfg.vocabulary(), &target_units, &source_units, total)?;

        let mut cond = target_mel.data.clone();
        cond.resize(total * target_mel.n_mels, 0.0);
        let cond = Tensor::from_vec(cond, (total, target_mel.n_mels), &Device::Cpu)?.to_dtype(self.model.dtype())?;
        // the generated region stays at zero in the model's working space
        let prompt = cfg.normalize(&cond.narrow(0, 0, prompt_frames)?)?;
        let cond = Tensor::cat(&[&prompt, &cond.narrow(0, prompt_frames, total - prompt_frames)?.zeros_like()?], 0)?;

        let request = SampleRequest {
            cond_mel: cond,
            prompt_frames,
            tokens,
            filler: cfg.filler_token(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let out = sample(self.model, &request, &req.sampler, &mut rng)?;
        let generated = cfg
            .denormalize(&out.narrow(0, prompt_frames, total - prompt_frames)?)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let generated_mel = MelSpectrogram::new(generated, target_mel.n_mels, target_mel.hop_length, target_mel.sample_rate)?;
        let audio = match self.vocoder.kind {
            VocoderKind::PhaseRetrieval => {
                self.vocoder.validate()?;
                PhaseRetrieval::new(extractor.config().clone())?.synthesize(&generated_mel, self.vocoder.gl_iters)?
            }
            VocoderKind::External => mel_to_waveform(&generated_mel, &self.vocoder)?,
        };
        Ok(ConversionResult {
            audio,
            generated_mel,
            source_units,
            target_units,
            prompt_frames,
        })
    }

    /// Self-conversion: the utterance is both the prompt and the content.
    pub fn resynthesize(&self, w: &Waveform, sampler: SamplerConfig, seed: u64) -> Result<ConversionResult> {
        let mut req = ConversionRequest::new(w.clone(), w.clone(), seed);
        req.sampler = sampler;
        self.convert(&req)
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub audio_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Manifest entries with relative audio paths resolved against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries: Vec<ManifestEntry> = read_jsonl(path)?;
    for e in &mut entries {
        if e.audio_path.is_relative() {
            e.audio_path = base.join(&e.audio_path);
        }
    }
    Ok(entries)
}

/// All `.wav` files under `dir`, sorted by path. Ids are the path relative
/// to `dir` without extension, with separators replaced by `_`.
pub fn scan_audio_dir(dir: &Path) -> Result<Vec<ManifestEntry>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    paths.sort();
    Ok(paths
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap_or(&p).with_extension("");
            let id = rel.to_string_lossy().replace(['/', '\\'], "_");
            ManifestEntry {
                id,
                audio_path: p,
                language: None,
            }
        })
        .collect())
}

/// One prepared utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    /// Relative to the dataset directory.
    pub mel_path: PathBuf,
    pub units_path: PathBuf,
    pub frames: usize,
    pub unit_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSet {
    pub entries: Vec<IndexEntry>,
    pub skipped: Vec<SkippedEntry>,
}

pub const INDEX_FILE: &str = "index.jsonl";

/// Run `f` over `items` on `workers` threads, keeping input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(&f).collect()))
}

fn prepare_one(entry: &ManifestEntry, encoder: &SurrogateEncoder, cb: &Codebook, out_dir: &Path) -> Result<IndexEntry> {
    let w = load_waveform(&entry.audio_path)?.to_model_rate()?;
    let mel = MelExtractor::new(MelConfig::default())?.compute(&w)?;
    let units = units_from_embeddings(&encoder.embed(&w)?, cb)?;
    let mel_path = PathBuf::from("mels").join(format!("{}.mel", entry.id));
    let units_path = PathBuf::from("units").join(format!("{}.jsonl", entry.id));
    write_mel(out_dir.join(&mel_path), &mel)?;
    write_unit_records(out_dir.join(&units_path), &[UnitRecord::new(&entry.id, &units)])?;
    Ok(IndexEntry {
        id: entry.id.clone(),
        mel_path,
        units_path,
        frames: mel.n_frames,
        unit_count: units.len(),
    })
}

/// Write per-utterance mels and deduplicated units plus `index.jsonl` into
/// `out_dir`. Unreadable entries are logged and skipped.
pub fn prepare_training_set(
    manifest: &[ManifestEntry],
    enc: &EncoderSpec,
    cb: &Codebook,
    out_dir: &Path,
    workers: usize,
) -> Result<PreparedSet> {
    if manifest.is_empty() {
        return Err(Error::domain("manifest lists no utterances"));
    }
    let encoder = SurrogateEncoder::new(enc.clone())?;
    for sub in ["mels", "units"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let results = parallel_map(manifest, workers, |e| prepare_one(e, &encoder, cb, out_dir))?;
    let mut set = PreparedSet {
        entries: Vec::new(),
        skipped: Vec::new(),
    };
    for (entry, res) in manifest.iter().zip(results) {
        match res {
            Ok(ix) => set.entries.push(ix),
            Err(e) => {
                tracing::warn!(id = %entry.id, error = %e, "skipping utterance");
                set.skipped.push(SkippedEntry {
                    id: entry.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    if set.entries.is_empty() {
        return Err(Error::Data("no manifest entry could be prepared".into()));
    }
    write_jsonl(&out_dir.join(INDEX_FILE), &set.entries)?;
    Ok(set)
}

/// Load a prepared dataset directory as training items.
pub fn load_training_items(dir: &Path) -> Result<Vec<TrainItem>> {
    let index_path = dir.join(INDEX_FILE);
    if !index_path.exists() {
        return Err(Error::ArtifactMissing(index_path));
    }
    let entries: Vec<IndexEntry> = read_jsonl(&index_path)?;
    entries
        .into_iter()
        .map(|e| {
            let mel = read_mel(dir.join(&e.mel_path))?;
            let records = read_unit_records(dir.join(&e.units_path))?;
            let units = records
                .into_iter()
                .next()
                .ok_or_else(|| Error::format(format!("{}: empty units file", e.id)))?
                .sequence();
            if mel.n_frames != e.frames || units.len() != e.unit_count {
                return Err(Error::Data(format!("{}: index lengths disagree with the files", e.id)));
            }
            Ok(TrainItem { id: e.id, mel, units })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{train_kmeans, KMeansConfig};
    use crate::synth::{desk_voices, utterance};

    fn codebook(k: usize) -> (EncoderSpec, Codebook) {
        let enc = EncoderSpec::surrogate(400, 0);
        let embs: Vec<_> = (0..3)
            .map(|s| SurrogateEncoder::new(enc.clone()).unwrap().embed(&utterance(desk_voices()[s], 0.6, s as u64)).unwrap())
            .collect();
        let cb = train_kmeans(
            embs.iter(),
            &KMeansConfig {
                k,
                ..KMeansConfig::default()
            },
        )
        .unwrap();
        (enc, cb)
    }

    #[test]
    fn silence_collapses_to_short_sequence() {
        let (enc, cb) = codebook(8);
        let silence = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let u = encode_to_units(&silence, &enc, &cb).unwrap();
        assert!(u.deduped && !u.is_empty() && u.len() <= 2, "{u:?}");
    }

    #[test]
    fn one_second_unit_counts() {
        let (enc, cb) = codebook(8);
        let w = utterance(desk_voices()[1], 1.0, 9);
        let emb = SurrogateEncoder::new(enc.clone()).unwrap().embed(&w).unwrap();
        assert!((emb.n_frames as i64 - 50).abs() <= 1);
        let a = encode_to_units(&w, &enc, &cb).unwrap();
        assert!(a.len() <= 50);
        assert_eq!(a, encode_to_units(&w, &enc, &cb).unwrap());
    }

    #[test]
    fn imported_encoder_needs_embeddings() {
        let (mut enc, cb) = codebook(4);
        enc.kind = EncoderKind::Imported;
        let w = utterance(desk_voices()[0], 0.6, 1);
        assert!(matches!(encode_to_units(&w, &enc, &cb), Err(Error::Contract(_))));
    }

    #[test]
    fn scan_sorts_and_names() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("b")).unwrap();
        for p in ["b/x.wav", "a.WAV", "notes.txt"] {
            fs::write(dir.path().join(p), b"").unwrap();
        }
        let ids: Vec<String> = scan_audio_dir(dir.path()).unwrap().into_iter().map(|e| e.id).collect();
        assert_eq!(ids, ["a", "b_x"]);
    }
}
