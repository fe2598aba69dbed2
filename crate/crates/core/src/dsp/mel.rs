use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::stft::Stft;
use super::{AudioBuffer, AudioConfig, DspError, Result};
use crate::tensor::Tensor2;

/// Magnitude floor applied before taking the log of mel energies.
pub const MEL_LOG_FLOOR: f64 = 1e-5;

/// Frame-level log-mel spectrogram (`T x n_mels`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticFeature {
    pub mel: Tensor2,
    pub frame_shift: f64,
}

impl AcousticFeature {
    pub fn frames(&self) -> usize {
        self.mel.rows
    }

    pub fn dims(&self) -> usize {
        self.mel.cols
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, centers equally spaced on the HTK mel
/// scale over `[0, sample_rate / 2]`. Shape `n_mels x (n_fft / 2 + 1)`.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Tensor2 {
    let n_bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Tensor2::zeros(n_mels, n_bins);
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            fb.set(m, k, rising.min(falling).max(0.0));
        }
    }
    fb
}

/// Log-mel spectrogram with centered, reflect-padded Hann frames.
pub fn mel_spectrogram(audio: &AudioBuffer, config: &AudioConfig) -> Result<AcousticFeature> {
    let win = config.window_samples();
    if audio.len() < win {
        return Err(DspError::TooShort {
            samples: audio.len(),
            needed: win,
        });
    }
    if audio.sample_rate != config.sample_rate {
        return Err(DspError::Parameter(format!(
            "audio at {} Hz, features expect {} Hz",
            audio.sample_rate, config.sample_rate
        )));
    }
    let stft = Stft::new(config.n_fft(), win, config.hop_samples());
    let fb = mel_filterbank(config.sample_rate, config.n_fft(), config.n_mels);
    let frames = stft.analyze_centered(&audio.samples);
    let mut mel = Tensor2::zeros(frames.len(), config.n_mels);
    for (t, spec) in frames.iter().enumerate() {
        let mags: Vec<f64> = spec.iter().map(|c| c.norm()).collect();
        for m in 0..config.n_mels {
            let e: f64 = fb.row(m).iter().zip(&mags).map(|(w, a)| w * a).sum();
            mel.set(t, m, e.max(MEL_LOG_FLOOR).ln());
        }
    }
    Ok(AcousticFeature {
        mel,
        frame_shift: config.hop_samples() as f64 / config.sample_rate as f64,
    })
}

fn dct_basis(n: usize) -> Tensor2 {
    let mut basis = Tensor2::zeros(n, n);
    for k in 0..n {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            basis.set(k, i, scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos());
        }
    }
    basis
}

/// Orthonormal type-II DCT.
pub fn dct_ortho(x: &[f64]) -> Vec<f64> {
    let b = dct_basis(x.len());
    (0..x.len())
        .map(|k| b.row(k).iter().zip(x).map(|(w, v)| w * v).sum())
        .collect()
}

/// Inverse of [`dct_ortho`] (orthonormal type-III DCT).
pub fn idct_ortho(c: &[f64]) -> Vec<f64> {
    let b = dct_basis(c.len());
    (0..c.len())
        .map(|i| (0..c.len()).map(|k| b.get(k, i) * c[k]).sum())
        .collect()
}

/// Mel-cepstral coefficients 1..=order of every frame (c0 excluded).
pub fn mel_cepstra(feature: &AcousticFeature, order: usize) -> Result<Tensor2> {
    let d = feature.dims();
    if order == 0 || order > d {
        return Err(DspError::Parameter(format!(
            "cepstral order must be in 1..={d}, got {order}"
        )));
    }
    let basis = dct_basis(d);
    let mut out = Tensor2::zeros(feature.frames(), order);
    for t in 0..feature.frames() {
        let row = feature.mel.row(t);
        for k in 1..=order {
            let c: f64 = basis.row(k).iter().zip(row).map(|(w, v)| w * v).sum();
            out.set(t, k - 1, c);
        }
    }
    Ok(out)
}
