use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Number of centered frames for a signal of `n_samples`.
pub fn frame_count(n_samples: usize, hop: usize) -> usize {
    1 + n_samples / hop
}

/// Short-time Fourier transform with a Hann window of `win_len` samples
/// centered inside an `n_fft` frame. Plans are owned by the instance.
pub struct Stft {
    pub n_fft: usize,
    pub win_len: usize,
    pub hop: usize,
    /// Window zero-padded to `n_fft`.
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(n_fft: usize, win_len: usize, hop: usize) -> Self {
        assert!(win_len <= n_fft && hop > 0);
        let mut window = vec![0.0; n_fft];
        let offset = (n_fft - win_len) / 2;
        window[offset..offset + win_len].copy_from_slice(&hann_window(win_len));
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            win_len,
            hop,
            window,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Positive-frequency spectrum of a real `n_fft` block.
    pub fn rfft(&self, block: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = block.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf.truncate(self.n_bins());
        buf
    }

    /// Real signal whose spectrum is the Hermitian completion of `half`.
    pub fn irfft(&self, half: &[Complex<f64>]) -> Vec<f64> {
        let n = self.n_fft;
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        buf[..half.len()].copy_from_slice(half);
        for k in 1..n - half.len() + 1 {
            buf[n - k] = half[k].conj();
        }
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        self.inverse.process(&mut buf);
        buf.iter().map(|c| c.re / n as f64).collect()
    }

    /// Frames `signal[t*hop .. t*hop + n_fft]` (zero beyond the end) for
    /// `n_frames` frames.
    pub fn analyze_raw(&self, signal: &[f64], n_frames: usize) -> Vec<Vec<Complex<f64>>> {
        let mut block = vec![0.0; self.n_fft];
        (0..n_frames)
            .map(|t| {
                let start = t * self.hop;
                for (i, b) in block.iter_mut().enumerate() {
                    *b = signal.get(start + i).copied().unwrap_or(0.0) * self.window[i];
                }
                self.rfft(&block)
            })
            .collect()
    }

    /// Reflect-pads by `n_fft / 2` and analyzes centered frames.
    /// Requires `signal.len() > n_fft / 2`.
    pub fn analyze_centered(&self, signal: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let padded = reflect_pad(signal, self.n_fft / 2);
        self.analyze_raw(&padded, frame_count(signal.len(), self.hop))
    }

    /// Least-squares inverse of `analyze_raw`: the signal whose STFT is
    /// closest to `frames`.
    pub fn synthesize_ls(&self, frames: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let len = frames.len().saturating_sub(1) * self.hop + self.n_fft;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        for (t, frame) in frames.iter().enumerate() {
            let block = self.irfft(frame);
            let start = t * self.hop;
            for i in 0..self.n_fft {
                let w = self.window[i];
                out[start + i] += w * block[i];
                norm[start + i] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            *o = if *n > 1e-12 { *o / n } else { 0.0 };
        }
        out
    }
}

pub(crate) fn reflect_pad(signal: &[f64], pad: usize) -> Vec<f64> {
    let n = signal.len();
    assert!(n > pad, "reflect padding needs more samples than the pad");
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| signal[i]));
    out.extend_from_slice(signal);
    out.extend((0..pad).map(|i| signal[n - 2 - i]));
    out
}
