//! Deterministic speech-like test signals: a harmonic glottal source with a
//! gliding pitch contour, shaped by vowel formants that move from segment to
//! segment, with short noise bursts standing in for fricatives.
//!
//! The bundled desk corpus is five voices times two utterances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{Waveform, MODEL_SAMPLE_RATE};

/// Speaker-level parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voice {
    pub f0_hz: f64,
    /// Source spectral slope in dB per octave (negative).
    pub tilt_db_per_octave: f64,
    /// Multiplies every formant frequency (vocal tract length).
    pub formant_scale: f64,
}

/// First three formants of a few vowels, in Hz.
const VOWELS: [[f64; 3]; 8] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
    [440.0, 1020.0, 2240.0],
    [390.0, 1990.0, 2550.0],
];

const BANDWIDTHS: [f64; 3] = [90.0, 110.0, 170.0];

#[derive(Debug, Clone)]
struct Segment {
    end: usize,
    formants: [f64; 3],
    voiced: bool,
}

/// One utterance of roughly `seconds` for `voice`, fully determined by
/// `seed`. Peak amplitude is 0.5.
pub fn utterance(voice: Voice, seconds: f64, seed: u64) -> Waveform {
    let sr = MODEL_SAMPLE_RATE as f64;
    let n = (seconds * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut segments = Vec::new();
    let mut at = 0;
    while at < n {
        let len = (rng.random_range(0.06..0.16) * sr) as usize;
        at = (at + len).min(n);
        let v = VOWELS[rng.random_range(0..VOWELS.len())];
        segments.push(Segment {
            end: at,
            formants: v.map(|f| f * voice.formant_scale),
            voiced: rng.random::<f64>() > 0.15,
        });
    }

    // pitch contour: declination plus a slow random wobble
    let wobble_hz = rng.random_range(2.0..4.0);
    let wobble_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise_gain = 0.05;
    let fade = (0.02 * sr) as usize;

    let mut out = vec![0.0f64; n];
    let mut phase = 0.0f64;
    let mut seg = 0;
    let mut prev = segments[0].clone();
    let mut seg_start = 0;
    for (i, o) in out.iter_mut().enumerate() {
        while i >= segments[seg].end {
            prev = segments[seg].clone();
            seg_start = segments[seg].end;
            seg += 1;
        }
        let cur = &segments[seg];
        // crossfade formants over the first samples of each segment
        let w = if seg == 0 { 1.0 } else { ((i - seg_start) as f64 / fade as f64).min(1.0) };
        let formants: [f64; 3] = std::array::from_fn(|k| prev.formants[k] * (1.0 - w) + cur.formants[k] * w);
        let voicing = if seg == 0 {
            cur.voiced as u8 as f64
        } else {
            prev.voiced as u8 as f64 * (1.0 - w) + cur.voiced as u8 as f64 * w
        };

        let time = i as f64 / sr;
        let f0 = voice.f0_hz * (1.0 - 0.1 * time / seconds.max(1e-9))
            * (1.0 + 0.05 * (std::f64::consts::TAU * wobble_hz * time + wobble_phase).sin());
        phase += std::f64::consts::TAU * f0 / sr;
        phase %= std::f64::consts::TAU * 1e6;

        let mut voiced = 0.0;
        let n_harm = (7600.0 / f0) as usize;
        for h in 1..=n_harm {
            let f = f0 * h as f64;
            let tilt = 10f64.powf(voice.tilt_db_per_octave * (h as f64).log2() / 20.0);
            voiced += tilt * envelope(f, &formants) * (phase * h as f64).sin();
        }
        let noise: f64 = StandardNormal.sample(&mut rng);
        *o = voicing * voiced + (1.0 - voicing) * 0.6 * noise + noise_gain * noise * voicing;
    }

    // 10 ms raised-cosine onset and offset
    let ramp = (0.01 * sr) as usize;
    for i in 0..ramp.min(n) {
        let g = 0.5 - 0.5 * (std::f64::consts::PI * i as f64 / ramp as f64).cos();
        out[i] *= g;
        out[n - 1 - i] *= g;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let samples = out.iter().map(|v| (0.5 * v / peak) as f32).collect();
    Waveform::new(samples, MODEL_SAMPLE_RATE).expect("synthetic samples are finite")
}

/// Sum of resonance peaks at the formant frequencies.
fn envelope(f: f64, formants: &[f64; 3]) -> f64 {
    formants
        .iter()
        .zip(BANDWIDTHS)
        .enumerate()
        .map(|(k, (&fc, bw))| {
            let gain = [1.0, 0.6, 0.3][k];
            let x = (f - fc) / (bw / 2.0);
            gain / (1.0 + x * x)
        })
        .sum::<f64>()
        + 0.01
}

/// The five built-in voices.
pub fn desk_voices() -> [Voice; 5] {
    [
        Voice {
            f0_hz: 105.0,
            tilt_db_per_octave: -14.0,
            formant_scale: 0.92,
        },
        Voice {
            f0_hz: 135.0,
            tilt_db_per_octave: -7.0,
            formant_scale: 1.0,
        },
        Voice {
            f0_hz: 185.0,
            tilt_db_per_octave: -10.5,
            formant_scale: 1.12,
        },
        Voice {
            f0_hz: 220.0,
            tilt_db_per_octave: -3.5,
            formant_scale: 1.18,
        },
        Voice {
            f0_hz: 260.0,
            tilt_db_per_octave: -8.5,
            formant_scale: 1.25,
        },
    ]
}

#[derive(Debug, Clone)]
pub struct CorpusUtterance {
    pub id: String,
    pub speaker: usize,
    pub waveform: Waveform,
}

/// Ten utterances of 1.0 to 1.45 s: two per voice.
pub fn desk_corpus() -> Vec<CorpusUtterance> {
    desk_voices()
        .iter()
        .enumerate()
        .flat_map(|(s, &voice)| {
            (0..2).map(move |u| {
                let idx = 2 * s + u;
                CorpusUtterance {
                    id: format!("spk{s}_utt{u}"),
                    speaker: s,
                    waveform: utterance(voice, 1.0 + 0.05 * idx as f64, 1000 + idx as u64),
                }
            })
        })
        .collect()
}
