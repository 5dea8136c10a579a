use std::fs;
use std::path::Path;

use candle_core::DType;
use ezvc::audio::{read_mel, write_waveform};
use ezvc::decoder::{DecoderConfig, DitModel, SamplerConfig};
use ezvc::encoder::{surrogate_embed, EncoderSpec};
use ezvc::eval::{eval_batch, read_pairs, PairRecord, PairTag, RowStatus, SpeakerExtractor};
use ezvc::pipeline::{
    load_training_items, prepare_training_set, read_jsonl, write_jsonl, Converter, IndexEntry, ManifestEntry,
    INDEX_FILE,
};
use ezvc::quantizer::{train_kmeans, Codebook, KMeansConfig};
use ezvc::units::read_unit_records;
use ezvc::vocoder::VocoderSpec;

mod common;

use common::{desk_manifest, desk_utterances};

fn desk_codebook(k: usize) -> (EncoderSpec, Codebook) {
    let enc = EncoderSpec::default();
    let embs: Vec<_> = desk_utterances()
        .iter()
        .map(|(_, _, w)| surrogate_embed(w, &enc).unwrap())
        .collect();
    let cb = train_kmeans(embs.iter(), &KMeansConfig { k, ..KMeansConfig::default() }).unwrap();
    (enc, cb)
}

/// Nine bundled files plus one that is not audio at all.
fn manifest_with_corrupt(dir: &Path) -> Vec<ManifestEntry> {
    let mut m = desk_manifest();
    let bad = dir.join("broken.wav");
    fs::write(&bad, b"RIFF\x10\x00\x00\x00WAVEjunk").unwrap();
    m[4] = ManifestEntry {
        id: "broken".into(),
        audio_path: bad,
        language: None,
    };
    m
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "mels", "units"] {
        for e in fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn prepare_skips_corrupt_file_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = manifest_with_corrupt(tmp.path());
    let (enc, cb) = desk_codebook(16);

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    fs::create_dir(&a).unwrap();
    fs::create_dir(&b).unwrap();
    let set_a = prepare_training_set(&manifest, &enc, &cb, &a, 1).unwrap();
    let set_b = prepare_training_set(&manifest, &enc, &cb, &b, 2).unwrap();

    assert_eq!(set_a.entries.len(), 9);
    assert_eq!(set_a.skipped.len(), 1);
    assert_eq!(set_a.skipped[0].id, "broken");
    assert_eq!(set_a, set_b);
    assert_eq!(dir_snapshot(&a), dir_snapshot(&b));

    let index: Vec<IndexEntry> = read_jsonl(&a.join(INDEX_FILE)).unwrap();
    assert_eq!(index, set_a.entries);
    for e in &index {
        let mel = read_mel(a.join(&e.mel_path)).unwrap();
        let units = read_unit_records(a.join(&e.units_path)).unwrap();
        assert_eq!(mel.n_frames, e.frames);
        assert_eq!(units.len(), 1);
        let seq = units[0].sequence();
        assert_eq!(seq.len(), e.unit_count);
        assert!(seq.units.windows(2).all(|w| w[0] != w[1]), "{}: units not deduplicated", e.id);
    }
    let items = load_training_items(&a).unwrap();
    assert_eq!(items.len(), 9);
}

#[test]
fn all_corrupt_manifest_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("x.wav");
    fs::write(&bad, b"not audio").unwrap();
    let m = vec![ManifestEntry {
        id: "x".into(),
        audio_path: bad,
        language: None,
    }];
    let (enc, cb) = desk_codebook(4);
    let err = prepare_training_set(&m, &enc, &cb, tmp.path(), 1).unwrap_err();
    assert_eq!(err.kind(), "data");
    assert!(prepare_training_set(&[], &enc, &cb, tmp.path(), 1).is_err());
}

#[test]
fn missing_index_is_artifact_missing() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(load_training_items(tmp.path()).unwrap_err().kind(), "artifact-missing");
}

fn write_pairs(dir: &Path, pairs: &[PairRecord]) -> Vec<PairRecord> {
    let path = dir.join("pairs.jsonl");
    write_jsonl(&path, pairs).unwrap();
    read_pairs(&path).unwrap()
}

#[test]
fn eval_batch_reports_rows_and_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let utts = desk_utterances();
    for (id, _, w) in &utts {
        write_waveform(tmp.path().join(format!("{id}.wav")), w).unwrap();
    }
    let pair = |id: &str, s: usize, t: usize, tag| PairRecord {
        pair_id: id.into(),
        source_path: format!("{}.wav", utts[s].0).into(),
        target_path: format!("{}.wav", utts[t].0).into(),
        tag,
    };
    let k = 6;
    let (enc, cb) = desk_codebook(k);
    let model = DitModel::new(DecoderConfig::tiny(k), DType::F32, 0).unwrap();
    let conv = Converter {
        model: &model,
        codebook: &cb,
        encoder: enc,
        vocoder: VocoderSpec {
            gl_iters: 2,
            ..VocoderSpec::default()
        },
    };
    let sampler = SamplerConfig {
        steps: 2,
        ..SamplerConfig::default()
    };

    let good = write_pairs(
        tmp.path(),
        &[
            pair("p0", 0, 2, PairTag::SameGender),
            pair("p1", 1, 8, PairTag::CrossGender),
            pair("p2", 5, 3, PairTag::IntraLingual),
        ],
    );
    let report = eval_batch(&good, &conv, &SpeakerExtractor::Proxy, &sampler, 0);
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.failures(), 0);
    assert_eq!(report.aggregate.status, RowStatus::Aggregate);
    for r in &report.rows {
        assert_eq!(r.status, RowStatus::Ok);
        let c = r.cosine.unwrap();
        assert!((-1.0..=1.0).contains(&c));
        assert!((0.0..=1.0).contains(&r.unit_overlap.unwrap()));
        assert!((r.duration_ratio.unwrap() - 1.0).abs() <= 0.05);
    }
    let mean = report.rows.iter().map(|r| r.cosine.unwrap()).sum::<f64>() / 3.0;
    assert!((report.aggregate.cosine.unwrap() - mean).abs() < 1e-12);

    let mut with_missing = good.clone();
    with_missing[1].target_path = tmp.path().join("nope.wav");
    let report = eval_batch(&with_missing, &conv, &SpeakerExtractor::Proxy, &sampler, 0);
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.failures(), 1);
    assert_eq!(report.rows[1].status, RowStatus::Error);
    assert!(report.rows[1].error.as_deref().unwrap().starts_with("artifact-missing"));

    let out = tmp.path().join("report.jsonl");
    report.write(&out).unwrap();
    let rows: Vec<serde_json::Value> = read_jsonl(&out).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[3]["status"], "aggregate");
    assert!(fs::read_to_string(out.with_extension("txt")).unwrap().contains("aggregate"));
}
