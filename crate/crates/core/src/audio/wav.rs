use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

/// Read a PCM WAV file, averaging all channels into one.
///
/// Integer PCM is scaled by `2^(bits-1)`; float PCM is taken as is. The
/// original sample rate is preserved.
pub fn load_waveform(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::format(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?,
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<Result<_, _>>()
                .map_err(|e| Error::format(format!("{}: {e}", path.display())))?
        }
        (fmt, bits) => {
            return Err(Error::format(format!(
                "{}: unsupported encoding {fmt:?} {bits}-bit",
                path.display()
            )))
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(Error::format(format!("{}: truncated frame", path.display())));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Write 16-bit mono PCM. Samples are clipped to [-1, 1].
pub fn write_waveform(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let map = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(other.to_string()),
    };
    let mut writer = WavWriter::create(path, spec).map_err(map)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(map)?;
    }
    writer.finalize().map_err(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, spec: WavSpec, data: &[i32]) {
        let mut w = WavWriter::create(path, spec).unwrap();
        for &d in data {
            match spec.bits_per_sample {
                8 => w.write_sample(d as i8).unwrap(),
                16 => w.write_sample(d as i16).unwrap(),
                _ => w.write_sample(d).unwrap(),
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn one_second_mono_16bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let data: Vec<i32> = (0..16000).map(|i| ((i % 200) as i32 - 100) * 100).collect();
        write_raw(&p, spec, &data);
        let w = load_waveform(&p).unwrap();
        assert_eq!(w.len(), 16000);
        assert_eq!(w.sample_rate, 16000);
        assert!((w.samples[0] - (-10000.0 / 32768.0)).abs() < 1e-7);
    }

    #[test]
    fn opposite_channels_cancel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let data: Vec<i32> = (0..1000)
            .flat_map(|i| {
                let x = ((i * 37) % 2001) as i32 - 1000;
                [x, -x]
            })
            .collect();
        write_raw(&p, spec, &data);
        let w = load_waveform(&p).unwrap();
        assert_eq!(w.len(), 1000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn keeps_original_rate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        let w = Waveform::new(vec![0.25; 2400], 24000).unwrap();
        write_waveform(&p, &w).unwrap();
        let back = load_waveform(&p).unwrap();
        assert_eq!(back.sample_rate, 24000);
        assert_eq!(back.len(), 2400);
    }

    #[test]
    fn other_bit_depths() {
        let dir = tempfile::tempdir().unwrap();
        for bits in [8u16, 24, 32] {
            let p = dir.path().join(format!("b{bits}.wav"));
            let spec = WavSpec {
                channels: 1,
                sample_rate: 8000,
                bits_per_sample: bits,
                sample_format: SampleFormat::Int,
            };
            let full = ((1i64 << (bits - 1)) / 2) as i32;
            write_raw(&p, spec, &[full, -full]);
            let w = load_waveform(&p).unwrap();
            assert!((w.samples[0] - 0.5).abs() < 1e-6, "{bits}: {:?}", w.samples);
            assert!((w.samples[1] + 0.5).abs() < 1e-6);
        }
        let p = dir.path().join("f.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut wr = WavWriter::create(&p, spec).unwrap();
        wr.write_sample(0.125f32).unwrap();
        wr.finalize().unwrap();
        assert_eq!(load_waveform(&p).unwrap().samples, vec![0.125]);
    }

    #[test]
    fn rejects_non_wav_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        std::fs::write(&p, b"this is not a riff file at all").unwrap();
        assert!(matches!(load_waveform(&p), Err(Error::Format(_))));
        assert!(matches!(
            load_waveform(dir.path().join("nope.wav")),
            Err(Error::Io { .. })
        ));
    }
}
