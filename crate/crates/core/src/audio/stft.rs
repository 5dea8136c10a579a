use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

pub use realfft::num_complex::Complex32;

/// Short-time Fourier transform with a Hann analysis window centered inside
/// each FFT frame and reflect padding of `n_fft / 2` on both sides.
///
/// Frame `t` is centered on sample `t * hop`. A signal of `n` samples has
/// `n / hop` frames (floor); the trailing partial hop does not get a frame of
/// its own. This fixes the frame count as a pure function of length and hop.
#[derive(Clone)]
pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f32>,
    forward: Arc<dyn RealToComplex<f32>>,
    inverse: Arc<dyn ComplexToReal<f32>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("n_fft", &self.n_fft)
            .field("hop", &self.hop)
            .finish()
    }
}

impl Stft {
    pub fn new(n_fft: usize, win_length: usize, hop: usize) -> Self {
        assert!(win_length <= n_fft && hop > 0 && n_fft >= 2);
        // periodic Hann, zero-padded to n_fft with the window centered
        let offset = (n_fft - win_length) / 2;
        let mut window = vec![0.0f32; n_fft];
        for i in 0..win_length {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / win_length as f64;
            window[offset + i] = (0.5 - 0.5 * phase.cos()) as f32;
        }
        let mut planner = RealFftPlanner::<f32>::new();
        Self {
            n_fft,
            hop,
            window,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        n_samples / self.hop
    }

    /// Complex spectrogram, row-major `frames × n_bins`.
    pub fn forward(&self, x: &[f32]) -> Vec<Complex32> {
        let n_frames = self.frame_count(x.len());
        let bins = self.n_bins();
        let mut out = vec![Complex32::new(0.0, 0.0); n_frames * bins];
        let mut frame = self.forward.make_input_vec();
        let mut scratch = self.forward.make_scratch_vec();
        let half = (self.n_fft / 2) as isize;
        for (t, row) in out.chunks_exact_mut(bins).enumerate() {
            let start = (t * self.hop) as isize - half;
            for (m, v) in frame.iter_mut().enumerate() {
                let w = self.window[m];
                *v = if w == 0.0 {
                    0.0
                } else {
                    x[reflect(start + m as isize, x.len())] * w
                };
            }
            self.forward
                .process_with_scratch(&mut frame, row, &mut scratch)
                .expect("buffer sizes fixed by plan");
        }
        out
    }

    /// Weighted overlap-add inverse, producing `n_frames * hop` samples.
    pub fn inverse(&self, spec: &[Complex32], n_frames: usize) -> Vec<f32> {
        let bins = self.n_bins();
        assert_eq!(spec.len(), n_frames * bins);
        let out_len = n_frames * self.hop;
        let mut acc = vec![0.0f64; out_len];
        let mut norm = vec![0.0f64; out_len];
        let mut buf = self.inverse.make_input_vec();
        let mut frame = self.inverse.make_output_vec();
        let mut scratch = self.inverse.make_scratch_vec();
        let half = (self.n_fft / 2) as isize;
        let scale = 1.0 / self.n_fft as f32;
        for (t, row) in spec.chunks_exact(bins).enumerate() {
            buf.copy_from_slice(row);
            buf[0].im = 0.0;
            buf[bins - 1].im = 0.0;
            self.inverse
                .process_with_scratch(&mut buf, &mut frame, &mut scratch)
                .expect("buffer sizes fixed by plan");
            let start = (t * self.hop) as isize - half;
            for (m, &v) in frame.iter().enumerate() {
                let s = start + m as isize;
                let w = self.window[m];
                if s < 0 || s as usize >= out_len || w == 0.0 {
                    continue;
                }
                acc[s as usize] += (v * scale * w) as f64;
                norm[s as usize] += (w * w) as f64;
            }
        }
        acc.iter()
            .zip(&norm)
            .map(|(&a, &n)| if n > 1e-8 { (a / n) as f32 } else { 0.0 })
            .collect()
    }
}

/// Mirror an out-of-range index back into `0..n` (numpy "reflect" mode).
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(8, 5), 0);
        assert_eq!(reflect(-7, 5), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn inverse_reconstructs_signal() {
        let stft = Stft::new(1024, 640, 160);
        let x: Vec<f32> = (0..8000)
            .map(|i| ((i as f32) * 0.013).sin() * 0.3 + ((i as f32) * 0.171).cos() * 0.1)
            .collect();
        let spec = stft.forward(&x);
        let n_frames = stft.frame_count(x.len());
        let y = stft.inverse(&spec, n_frames);
        assert_eq!(y.len(), 8000);
        let err = x[400..7600]
            .iter()
            .zip(&y[400..7600])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-4, "max err {err}");
    }
}
