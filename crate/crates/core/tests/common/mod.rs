//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use ezvc::audio::{load_waveform, MelSpectrogram, Waveform};
use ezvc::decoder::flow::{flow_loss, gaussian, BatchItem, FlowInputs, TrainingBatch};
use ezvc::decoder::{DecoderConfig, DitModel, Positional};
use ezvc::pipeline::{read_manifest, ManifestEntry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TINY_K: usize = 6;

pub fn desk_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/desk")
}

pub fn desk_manifest() -> Vec<ManifestEntry> {
    read_manifest(&desk_dir().join("manifest.jsonl")).expect("bundled desk manifest")
}

/// The bundled utterances as `(id, speaker, audio)`. Speaker ids come from
/// the `spk<N>_` prefix.
pub fn desk_utterances() -> Vec<(String, usize, Waveform)> {
    desk_manifest()
        .into_iter()
        .map(|e| {
            let speaker = e.id[3..e.id.find('_').unwrap()].parse().unwrap();
            (e.id, speaker, load_waveform(&e.audio_path).unwrap())
        })
        .collect()
}

pub fn host(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

/// Random log-mel-like items, each with one contiguous masked span.
pub fn batch_items(rng: &mut ChaCha8Rng, lens: &[usize]) -> Vec<BatchItem> {
    lens.iter()
        .map(|&len| {
            let data = (0..len * 80).map(|_| rng.random_range(-4.0f32..1.0)).collect();
            let start = rng.random_range(0..len / 2);
            BatchItem {
                mel: MelSpectrogram::new(data, 80, 160, 16000).unwrap(),
                tokens: (0..len).map(|_| rng.random_range(0..TINY_K as u32 + 1)).collect(),
                mask: (0..len).map(|i| i >= start && i < start + len / 2 + 1).collect(),
            }
        })
        .collect()
}

pub struct GradCheck {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Compare the autodiff gradient of the masked flow loss against central
/// finite differences for every scalar of a two-layer f64 model (T = 8).
pub fn gradient_check(positional: Positional) -> GradCheck {
    let mut cfg = DecoderConfig::tiny(TINY_K);
    cfg.positional = positional;
    let model = DitModel::new(cfg.clone(), DType::F64, 1).unwrap();
    // move the zero-initialized layers off zero so every tensor has a gradient
    model.perturb_parameters(2, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = TrainingBatch::new(&batch_items(&mut rng, &[8, 6]), cfg.vocabulary().pad(), DType::F64).unwrap();
    let inputs = FlowInputs {
        x0: gaussian(batch.mel.dims(), DType::F64, &mut rng).unwrap(),
        t: Tensor::new(&[0.35f64, 0.8], &Device::Cpu).unwrap(),
        drop: vec![false, true],
    };
    let filler = cfg.filler_token();
    let loss = |m: &DitModel| flow_loss(m, &batch, &inputs, filler).unwrap().to_scalar::<f64>().unwrap();
    let grads = flow_loss(&model, &batch, &inputs, filler).unwrap().backward().unwrap();

    let h = 1e-5;
    let mut out = GradCheck {
        checked: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    for (name, var) in model.params().entries() {
        let analytic = grads.get(var.as_tensor()).map(host).unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let base = host(var.as_tensor());
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            var.set(&Tensor::from_vec(p.clone(), var.shape(), &Device::Cpu).unwrap()).unwrap();
            let up = loss(&model);
            p[i] = base[i] - h;
            var.set(&Tensor::from_vec(p, var.shape(), &Device::Cpu).unwrap()).unwrap();
            let down = loss(&model);
            let fd = (up - down) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > out.worst {
                out.worst = rel;
                out.worst_at = format!("{name}[{i}]: analytic {a:.6e} fd {fd:.6e}");
            }
            out.checked += 1;
        }
        var.set(&Tensor::from_vec(base, var.shape(), &Device::Cpu).unwrap()).unwrap();
    }
    out
}
