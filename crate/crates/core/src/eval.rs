//! Objective metrics: proxy speaker similarity, unit overlap, mel distance,
//! and a batch harness over a pairs manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{load_waveform, log_mel, write_waveform, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::pipeline::{encode_to_units, read_jsonl, write_jsonl, ConversionRequest, Converter};
use crate::decoder::SamplerConfig;
use crate::units::UnitSequence;
use crate::vocoder::{run_tool, ScratchDir};

pub const PROXY_TAG: &str = "proxy-logmel-stats";
pub const MIN_EMBEDDING_SECS: f64 = 0.5;

/// Unit-norm speaker vector and the name of the extractor that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f32>,
    pub extractor_tag: String,
}

impl SpeakerEmbedding {
    /// L2-normalize `raw`.
    pub fn from_raw(raw: &[f64], extractor_tag: impl Into<String>) -> Result<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::domain("speaker vector has zero or non-finite norm"));
        }
        Ok(Self {
            vector: raw.iter().map(|v| (v / norm) as f32).collect(),
            extractor_tag: extractor_tag.into(),
        })
    }
}

/// Per-band mean and standard deviation of log-mel over time.
pub fn proxy_speaker_embedding(w: &Waveform) -> Result<SpeakerEmbedding> {
    let w = w.to_model_rate()?;
    if w.duration_secs() < MIN_EMBEDDING_SECS {
        return Err(Error::domain(format!(
            "speaker embedding needs at least {MIN_EMBEDDING_SECS} s, got {:.3} s",
            w.duration_secs()
        )));
    }
    let mel = log_mel(&w)?;
    let n = mel.n_frames as f64;
    let mut mean = vec![0.0f64; mel.n_mels];
    for row in mel.rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64 / n;
        }
    }
    let mut var = vec![0.0f64; mel.n_mels];
    for row in mel.rows() {
        for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v as f64 - m).powi(2) / n;
        }
    }
    let raw: Vec<f64> = mean.into_iter().chain(var.into_iter().map(f64::sqrt)).collect();
    SpeakerEmbedding::from_raw(&raw, PROXY_TAG)
}

pub fn cosine_similarity(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    if a.extractor_tag != b.extractor_tag || a.vector.len() != b.vector.len() {
        return Err(Error::contract(format!(
            "cannot compare {} ({}-dim) with {} ({}-dim)",
            a.extractor_tag,
            a.vector.len(),
            b.extractor_tag,
            b.vector.len()
        )));
    }
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| *x as f64 * *y as f64).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - edit_distance / max_len`; two empty sequences overlap fully.
pub fn unit_overlap(a: &UnitSequence, b: &UnitSequence) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - edit_distance(&a.units, &b.units) as f64 / longest as f64
}

/// Mean absolute difference per bin.
pub fn mel_l1(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    if a.n_frames != b.n_frames || a.n_mels != b.n_mels {
        return Err(Error::contract(format!(
            "mel shapes differ: {}x{} vs {}x{}",
            a.n_frames, a.n_mels, b.n_frames, b.n_mels
        )));
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
    Ok(sum / a.data.len().max(1) as f64)
}

/// Speaker embedding source: the built-in proxy or an external program
/// invoked as `cmd <wav> <json>` that writes a JSON array of numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "cmd")]
pub enum SpeakerExtractor {
    Proxy,
    External(String),
}

impl Default for SpeakerExtractor {
    fn default() -> Self {
        Self::Proxy
    }
}

impl SpeakerExtractor {
    pub fn embed(&self, w: &Waveform) -> Result<SpeakerEmbedding> {
        match self {
            Self::Proxy => proxy_speaker_embedding(w),
            Self::External(cmd) => {
                let dir = ScratchDir::new("speaker")?;
                let wav = dir.path().join("input.wav");
                let out = dir.path().join("embedding.json");
                write_waveform(&wav, w)?;
                run_tool(cmd, &[&wav, &out])?;
                let bytes = std::fs::read(&out).map_err(|e| Error::io(&out, e))?;
                let raw: Vec<f64> = serde_json::from_slice(&bytes)
                    .map_err(|e| Error::External(format!("{cmd}: embedding is not a JSON number array: {e}")))?;
                let program = cmd.split_whitespace().next().unwrap_or(cmd);
                SpeakerEmbedding::from_raw(&raw, format!("external:{program}"))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairTag {
    SameGender,
    CrossGender,
    IntraLingual,
    CrossLingual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub pair_id: String,
    pub source_path: PathBuf,
    pub target_path: PathBuf,
    pub tag: PairTag,
}

/// Read a pairs manifest, resolving relative paths against its directory.
pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs: Vec<PairRecord> = read_jsonl(path)?;
    for p in &mut pairs {
        for q in [&mut p.source_path, &mut p.target_path] {
            if q.is_relative() {
                *q = base.join(&*q);
            }
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub pair_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tag: Option<PairTag>,
    pub status: RowStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unit_overlap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Error,
    Aggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub aggregate: ReportRow,
}

impl EvalReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status == RowStatus::Error).count()
    }

    /// Fixed-width text table of all rows plus the aggregate.
    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = format!(
            "{:<24} {:<14} {:<9} {:>8} {:>8} {:>8}\n",
            "pair", "tag", "status", "cosine", "overlap", "dur"
        );
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            let tag = r
                .tag
                .map(|t| serde_json::to_value(t).unwrap().as_str().unwrap().to_string())
                .unwrap_or_else(|| "-".into());
            let status = serde_json::to_value(r.status).unwrap().as_str().unwrap().to_string();
            out += &format!(
                "{:<24} {:<14} {:<9} {:>8} {:>8} {:>8}\n",
                r.pair_id,
                tag,
                status,
                fmt(r.cosine),
                fmt(r.unit_overlap),
                fmt(r.duration_ratio)
            );
        }
        out
    }

    /// JSONL rows (aggregate last) at `path` and the table next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut all = self.rows.clone();
        all.push(self.aggregate.clone());
        write_jsonl(path, &all)?;
        let table = path.with_extension("txt");
        std::fs::write(&table, self.render()).map_err(|e| Error::io(&table, e))
    }
}

fn evaluate_pair(pair: &PairRecord, conv: &Converter, speaker: &SpeakerExtractor, sampler: &SamplerConfig, seed: u64) -> Result<ReportRow> {
    let source = load_waveform(&pair.source_path)?;
    let target = load_waveform(&pair.target_path)?;
    let mut req = ConversionRequest::new(source.clone(), target.clone(), seed);
    req.sampler = sampler.clone();
    let result = conv.convert(&req)?;
    let cosine = cosine_similarity(&speaker.embed(&result.audio)?, &speaker.embed(&target)?)?;
    let heard = encode_to_units(&result.audio, &conv.encoder, conv.codebook)?;
    Ok(ReportRow {
        pair_id: pair.pair_id.clone(),
        tag: Some(pair.tag),
        status: RowStatus::Ok,
        cosine: Some(cosine),
        unit_overlap: Some(unit_overlap(&heard, &result.source_units)),
        duration_ratio: Some(result.audio.duration_secs() / source.to_model_rate()?.duration_secs()),
        error: None,
    })
}

/// Convert and score every pair. Failures become error rows; the batch
/// carries on.
pub fn eval_batch(
    pairs: &[PairRecord],
    conv: &Converter,
    speaker: &SpeakerExtractor,
    sampler: &SamplerConfig,
    seed: u64,
) -> EvalReport {
    let rows: Vec<ReportRow> = pairs
        .iter()
        .map(|p| {
            evaluate_pair(p, conv, speaker, sampler, seed).unwrap_or_else(|e| ReportRow {
                pair_id: p.pair_id.clone(),
                tag: Some(p.tag),
                status: RowStatus::Error,
                cosine: None,
                unit_overlap: None,
                duration_ratio: None,
                error: Some(format!("{}: {e}", e.kind())),
            })
        })
        .collect();
    let ok: Vec<&ReportRow> = rows.iter().filter(|r| r.status == RowStatus::Ok).collect();
    let mean = |f: fn(&ReportRow) -> Option<f64>| {
        (!ok.is_empty()).then(|| ok.iter().filter_map(|r| f(r)).sum::<f64>() / ok.len() as f64)
    };
    let aggregate = ReportRow {
        pair_id: "aggregate".into(),
        tag: None,
        status: RowStatus::Aggregate,
        cosine: mean(|r| r.cosine),
        unit_overlap: mean(|r| r.unit_overlap),
        duration_ratio: mean(|r| r.duration_ratio),
        error: (ok.len() < rows.len()).then(|| format!("{} of {} pairs failed", rows.len() - ok.len(), rows.len())),
    };
    EvalReport { rows, aggregate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{desk_voices, utterance};
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> SpeakerEmbedding {
        SpeakerEmbedding::from_raw(v, "t").unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&emb(&[1.0, 2.0]), &emb(&[1.0, 2.0])).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[0.0, 3.0])).unwrap(), 0.0);
        assert!((cosine_similarity(&emb(&[1.0, 2.0]), &emb(&[-1.0, -2.0])).unwrap() + 1.0).abs() < 1e-6);
        let other = SpeakerEmbedding::from_raw(&[1.0, 0.0], "u").unwrap();
        assert!(matches!(cosine_similarity(&emb(&[1.0, 0.0]), &other), Err(Error::Contract(_))));
        assert!(cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn overlap_cases() {
        let s = |v: &[u32]| UnitSequence::new(v.to_vec());
        assert_eq!(unit_overlap(&s(&[1, 2, 3]), &s(&[1, 2, 3])), 1.0);
        assert_eq!(unit_overlap(&s(&[1, 2, 3]), &s(&[4, 5, 6])), 0.0);
        assert_eq!(unit_overlap(&s(&[1, 2, 3, 4]), &s(&[1, 3, 4])), 0.75);
        assert_eq!(unit_overlap(&s(&[]), &s(&[])), 1.0);
    }

    /// Exhaustive oracle: shortest edit script by breadth-first search over
    /// (i, j) states.
    fn bfs_distance(a: &[u32], b: &[u32]) -> usize {
        let mut dist = vec![vec![usize::MAX; b.len() + 1]; a.len() + 1];
        let mut queue = std::collections::VecDeque::from([(0, 0)]);
        dist[0][0] = 0;
        while let Some((i, j)) = queue.pop_front() {
            let d = dist[i][j];
            let mut push = |x: usize, y: usize, q: &mut std::collections::VecDeque<(usize, usize)>, cost: usize| {
                if dist[x][y] > d + cost {
                    dist[x][y] = d + cost;
                    if cost == 0 {
                        q.push_front((x, y));
                    } else {
                        q.push_back((x, y));
                    }
                }
            };
            if i < a.len() && j < b.len() {
                push(i + 1, j + 1, &mut queue, usize::from(a[i] != b[j]));
            }
            if i < a.len() {
                push(i + 1, j, &mut queue, 1);
            }
            if j < b.len() {
                push(i, j + 1, &mut queue, 1);
            }
        }
        dist[a.len()][b.len()]
    }

    proptest! {
        #[test]
        fn edit_distance_matches_oracle(a in proptest::collection::vec(0u32..4, 0..8), b in proptest::collection::vec(0u32..4, 0..8)) {
            prop_assert_eq!(edit_distance(&a, &b), bfs_distance(&a, &b));
            let (sa, sb) = (UnitSequence::new(a.clone()), UnitSequence::new(b.clone()));
            let o = unit_overlap(&sa, &sb);
            prop_assert!((0.0..=1.0).contains(&o));
            prop_assert_eq!(o, unit_overlap(&sb, &sa));
            prop_assert_eq!(o == 1.0, a == b);
        }

        #[test]
        fn cosine_symmetric_bounded(a in proptest::collection::vec(-5.0f64..5.0, 6), b in proptest::collection::vec(-5.0f64..5.0, 6)) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
            let (ea, eb) = (emb(&a), emb(&b));
            let c = cosine_similarity(&ea, &eb).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
            prop_assert!((c - cosine_similarity(&eb, &ea).unwrap()).abs() <= 1e-9);
        }
    }

    #[test]
    fn mel_l1_cases() {
        let a = MelSpectrogram::filled(4, 80, -2.0);
        let b = MelSpectrogram::filled(4, 80, -1.0);
        assert_eq!(mel_l1(&a, &a).unwrap(), 0.0);
        assert_eq!(mel_l1(&a, &b).unwrap(), 1.0);
        assert_eq!(mel_l1(&b, &a).unwrap(), 1.0);
        assert!(matches!(mel_l1(&a, &MelSpectrogram::filled(5, 80, 0.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn proxy_embedding_properties() {
        let w = utterance(desk_voices()[0], 1.0, 1);
        let e = proxy_speaker_embedding(&w).unwrap();
        assert_eq!(e.vector.len(), 160);
        let norm: f64 = e.vector.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(e, proxy_speaker_embedding(&w).unwrap());

        let quiet = Waveform::new(w.samples.iter().map(|v| v * 0.5).collect(), w.sample_rate).unwrap();
        let c = cosine_similarity(&e, &proxy_speaker_embedding(&quiet).unwrap()).unwrap();
        assert!(c > 0.99, "scaled copy cosine {c}");

        let short = Waveform::new(vec![0.1; 4000], 16000).unwrap();
        assert!(matches!(proxy_speaker_embedding(&short), Err(Error::Domain(_))));
    }

    #[test]
    fn proxy_separates_speakers() {
        let voices = desk_voices();
        let embed = |v, seed| proxy_speaker_embedding(&utterance(v, 1.0, seed)).unwrap();
        let others: Vec<SpeakerEmbedding> = voices.iter().enumerate().map(|(j, &v)| embed(v, 30 + j as u64)).collect();
        for (i, &v) in voices.iter().enumerate() {
            let a = embed(v, 10 + i as u64);
            let same = cosine_similarity(&a, &embed(v, 20 + i as u64)).unwrap();
            let cross: Vec<f64> = others
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, o)| cosine_similarity(&a, o).unwrap())
                .collect();
            let mean_cross = cross.iter().sum::<f64>() / cross.len() as f64;
            assert!(same > mean_cross, "voice {i}: same {same} vs cross {cross:?}");
        }
    }
}
