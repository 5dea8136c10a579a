use super::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the sinc kernel on each side, at the kernel's cutoff.
const ZERO_CROSSINGS: usize = 32;
const ROLLOFF: f64 = 0.945;
const KAISER_BETA: f64 = 8.6;
/// Upsampling factors above this evaluate the kernel per output sample
/// instead of tabulating every phase.
const MAX_TABLE_PHASES: usize = 1024;

/// Band-limited rational resampling with a Kaiser-windowed sinc kernel.
///
/// Output length is `round(n * target / source)`. Same-rate input is returned
/// unchanged.
pub fn resample(w: &Waveform, target_sr: u32) -> Result<Waveform> {
    if target_sr == 0 {
        return Err(Error::domain("target sample rate must be positive"));
    }
    if target_sr == w.sample_rate {
        return Ok(w.clone());
    }
    let g = gcd(w.sample_rate as u64, target_sr as u64);
    let up = (target_sr as u64 / g) as usize;
    let down = (w.sample_rate as u64 / g) as usize;
    let n = w.samples.len();
    let out_len = ((n as u128 * up as u128 + down as u128 / 2) / down as u128) as usize;

    let kernel = Kernel::new(up, down);
    let table = (up <= MAX_TABLE_PHASES).then(|| kernel.table());

    let x = &w.samples;
    let mut out = Vec::with_capacity(out_len);
    let half = kernel.half as isize;
    let mut scratch = vec![0.0f64; 2 * kernel.half];
    for j in 0..out_len {
        let num = j as u128 * down as u128;
        let base = (num / up as u128) as isize;
        let phase = (num % up as u128) as usize;
        let taps: &[f64] = match &table {
            Some(t) => &t[phase * 2 * kernel.half..(phase + 1) * 2 * kernel.half],
            None => {
                kernel.fill_phase(phase, &mut scratch);
                &scratch
            }
        };
        let mut acc = 0.0f64;
        for (k, &h) in taps.iter().enumerate() {
            let i = base + k as isize - half + 1;
            if i >= 0 && (i as usize) < n {
                acc += h * x[i as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    Ok(Waveform {
        samples: out,
        sample_rate: target_sr,
    })
}

struct Kernel {
    up: usize,
    /// Cutoff as a fraction of the input Nyquist rate.
    cutoff: f64,
    /// Taps on each side of the interpolation point, in input samples.
    half: usize,
}

impl Kernel {
    fn new(up: usize, down: usize) -> Self {
        let cutoff = (up as f64 / down as f64).min(1.0) * ROLLOFF;
        let half = (ZERO_CROSSINGS as f64 / cutoff).ceil() as usize;
        Self { up, cutoff, half }
    }

    /// Kernel value at a distance of `x` input samples.
    fn eval(&self, x: f64) -> f64 {
        let span = self.half as f64;
        if x.abs() >= span {
            return 0.0;
        }
        let r = x / span;
        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA);
        self.cutoff * sinc(self.cutoff * x) * window
    }

    fn fill_phase(&self, phase: usize, taps: &mut [f64]) {
        let frac = phase as f64 / self.up as f64;
        let half = self.half as isize;
        for (k, t) in taps.iter_mut().enumerate() {
            // tap k sits at input index base + k - half + 1
            let offset = (k as isize - half + 1) as f64;
            *t = self.eval(frac - offset);
        }
    }

    fn table(&self) -> Vec<f64> {
        let width = 2 * self.half;
        let mut t = vec![0.0; self.up * width];
        for (phase, row) in t.chunks_exact_mut(width).enumerate() {
            self.fill_phase(phase, row);
        }
        t
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, sr: u32, n: usize) -> Waveform {
        let samples = (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / sr as f64).sin() as f32 * 0.5)
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    fn correlation(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn same_rate_is_identity() {
        let w = sine(440.0, 16000, 1234);
        let r = resample(&w, 16000).unwrap();
        assert_eq!(r, w);
    }

    #[test]
    fn one_second_48k_to_16k() {
        let w = sine(100.0, 48000, 48000);
        let r = resample(&w, 16000).unwrap();
        assert_eq!(r.sample_rate, 16000);
        assert!((r.len() as i64 - 16000).abs() <= 1);
    }

    #[test]
    fn sine_matches_analytic() {
        let w = sine(100.0, 48000, 48000);
        let r = resample(&w, 16000).unwrap();
        let analytic = sine(100.0, 16000, r.len());
        // the kernel reaches past the edges, so leave its support out
        let edge = 200;
        let c = correlation(
            &r.samples[edge..r.len() - edge],
            &analytic.samples[edge..r.len() - edge],
        );
        assert!(c > 0.999, "correlation {c}");
    }

    #[test]
    fn upsampling_sine_matches_analytic() {
        let w = sine(300.0, 16000, 16000);
        let r = resample(&w, 44100).unwrap();
        let analytic = sine(300.0, 44100, r.len());
        let edge = 1000;
        let c = correlation(
            &r.samples[edge..r.len() - edge],
            &analytic.samples[edge..r.len() - edge],
        );
        assert!(c > 0.9999, "correlation {c}");
    }

    #[test]
    fn round_trip_duration() {
        let w = sine(200.0, 16000, 16_037);
        for r in [8000, 22050, 24000, 44100, 48000] {
            let there = resample(&w, r).unwrap();
            let back = resample(&there, 16000).unwrap();
            assert!(
                (back.len() as i64 - w.len() as i64).abs() <= 2,
                "{r}: {} vs {}",
                back.len(),
                w.len()
            );
        }
    }

    #[test]
    fn odd_rate_uses_untabulated_kernel() {
        let w = sine(100.0, 16000, 4000);
        let r = resample(&w, 16001).unwrap();
        assert!((r.len() as i64 - 4000).abs() <= 1);
        let analytic = sine(100.0, 16001, r.len());
        let c = correlation(&r.samples[500..3500], &analytic.samples[500..3500]);
        assert!(c > 0.999);
    }

    #[test]
    fn zero_target_rejected() {
        let w = sine(100.0, 16000, 100);
        assert!(resample(&w, 0).is_err());
    }
}
