//! Overfit the desk decoder on the bundled corpus and report resynthesis
//! quality. Usage: desk_probe STEPS PEAK_LR WARMUP CKPT_OUT
use std::time::Instant;

use candle_core::DType;
use ezvc::audio::log_mel;
use ezvc::decoder::train::moving_average;
use ezvc::decoder::{Checkpoint, DecoderConfig, DitModel, OptimConfig, SamplerConfig, TrainItem, Trainer, TrainerConfig};
use ezvc::encoder::{surrogate_embed, EncoderSpec};
use ezvc::eval::{cosine_similarity, mel_l1, proxy_speaker_embedding};
use ezvc::pipeline::Converter;
use ezvc::quantizer::{assign, train_kmeans, KMeansConfig};
use ezvc::synth::desk_corpus;
use ezvc::units::dedup;
use ezvc::vocoder::VocoderSpec;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args[1].parse().unwrap();
    let lr: f64 = args[2].parse().unwrap();
    let warmup: u64 = args[3].parse().unwrap();
    let out = &args[4];
    let k = 64;
    let corpus = desk_corpus();
    let spec = EncoderSpec::surrogate(400, 0);
    let embs: Vec<_> = corpus.iter().map(|u| surrogate_embed(&u.waveform, &spec).unwrap()).collect();
    let cb = train_kmeans(embs.iter(), &KMeansConfig { k, ..Default::default() }).unwrap();
    let items: Vec<TrainItem> = corpus
        .iter()
        .zip(&embs)
        .map(|(u, e)| TrainItem {
            id: u.id.clone(),
            mel: log_mel(&u.waveform).unwrap(),
            units: dedup(&assign(&cb, e).unwrap()),
        })
        .collect();
    let model = match std::path::Path::new(out).exists() {
        true => Checkpoint::load(std::path::Path::new(out)).unwrap().to_model(DType::F32).unwrap(),
        false => {
            let model = DitModel::new(DecoderConfig::desk(k), DType::F32, 0).unwrap();
            let optim = OptimConfig { peak_lr: lr, warmup_steps: warmup, total_steps: steps, ..OptimConfig::desk() };
            let mut tr = Trainer::new(model, optim.clone(), TrainerConfig { seed: 1, ..Default::default() }).unwrap();
            let t0 = Instant::now();
            for s in 0..steps {
                let r = tr.step(&items).unwrap();
                if s % 50 == 0 || s + 1 == steps {
                    let ma = moving_average(tr.history(), 50);
                    println!("step {} loss {:.4} ma {:.4} lr {:.2e} gn {:.3} t {:.1}s", r.step, r.loss, ma.last().unwrap(), r.lr, r.grad_norm, t0.elapsed().as_secs_f64());
                }
            }
            let ma = moving_average(tr.history(), 50);
            println!("ma@100 {:.4} final {:.4}", ma[99], ma.last().unwrap());
            tr.checkpoint(false).unwrap().save(std::path::Path::new(out)).unwrap();
            tr.into_model()
        }
    };
    let conv = Converter { model: &model, codebook: &cb, encoder: spec.clone(), vocoder: VocoderSpec::default() };
    let t0 = Instant::now();
    let mut self_cos = Vec::new();
    let mut cross_cos = Vec::new();
    for (i, u) in corpus.iter().enumerate() {
        let r = conv.resynthesize(&u.waveform, SamplerConfig::default(), 7).unwrap();
        let l1 = mel_l1(&r.generated_mel, &items[i].mel).unwrap();
        let e_out = proxy_speaker_embedding(&r.audio).unwrap();
        let sc = cosine_similarity(&e_out, &proxy_speaker_embedding(&u.waveform).unwrap()).unwrap();
        let other = &corpus[(i + 3) % corpus.len()];
        let cc = cosine_similarity(&e_out, &proxy_speaker_embedding(&other.waveform).unwrap()).unwrap();
        self_cos.push(sc);
        cross_cos.push(cc);
        println!("{} L1 {:.3} self {:.4} cross {:.4} t {:.1}s", u.id, l1, sc, cc, t0.elapsed().as_secs_f64());
    }
    println!("mean self {:.4} cross {:.4}", self_cos.iter().sum::<f64>() / 10.0, cross_cos.iter().sum::<f64>() / 10.0);
}
