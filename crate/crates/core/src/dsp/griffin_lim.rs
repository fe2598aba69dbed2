//! Mel-to-waveform inversion: non-negative least-squares magnitude
//! recovery followed by Griffin-Lim phase reconstruction.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::mel::{mel_filterbank, AcousticFeature, MEL_LOG_FLOOR};
use super::stft::Stft;
use super::{AudioBuffer, AudioConfig, DspError, Result};
use crate::tensor::Tensor2;

/// Lawson-Hanson active-set solver for `min ||A x - b||` subject to `x >= 0`.
pub fn nnls(a: &Tensor2, b: &[f64]) -> Vec<f64> {
    assert_eq!(a.rows, b.len(), "row count must match the target length");
    let gram = gram(a);
    let atb: Vec<f64> = (0..a.cols)
        .map(|j| (0..a.rows).map(|i| a.get(i, j) * b[i]).sum())
        .collect();
    nnls_gram(&gram, &atb, a.cols)
}

fn gram(a: &Tensor2) -> Vec<f64> {
    let n = a.cols;
    let mut g = vec![0.0; n * n];
    for i in 0..a.rows {
        let row = a.row(i);
        let nz: Vec<usize> = (0..n).filter(|&j| row[j] != 0.0).collect();
        for &j in &nz {
            for &k in &nz {
                g[j * n + k] += row[j] * row[k];
            }
        }
    }
    g
}

/// Normal-equation form of [`nnls`]: `gram = A^T A`, `atb = A^T b`.
fn nnls_gram(gram: &[f64], atb: &[f64], n: usize) -> Vec<f64> {
    let mut x = vec![0.0; n];
    let scale = atb.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return x;
    }
    let tol = 1e-10 * scale;
    let mut passive = vec![false; n];
    let gradient = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|j| {
                let gx: f64 = (0..n).filter(|&k| x[k] != 0.0).map(|k| gram[j * n + k] * x[k]).sum();
                atb[j] - gx
            })
            .collect()
    };
    let solve = |set: &[usize]| -> Option<Vec<f64>> {
        let k = set.len();
        let trace: f64 = set.iter().map(|&j| gram[j * n + j]).sum();
        let ridge = 1e-12 * trace / k as f64;
        let m = DMatrix::from_fn(k, k, |r, c| {
            gram[set[r] * n + set[c]] + if r == c { ridge } else { 0.0 }
        });
        let rhs = DVector::from_iterator(k, set.iter().map(|&j| atb[j]));
        m.cholesky().map(|ch| ch.solve(&rhs).iter().copied().collect())
    };

    for _ in 0..3 * n {
        let w = gradient(&x);
        let Some((j, &wj)) = w
            .iter()
            .enumerate()
            .filter(|(j, _)| !passive[*j])
            .max_by(|a, b| a.1.total_cmp(b.1))
        else {
            break;
        };
        if wj <= tol {
            break;
        }
        passive[j] = true;
        loop {
            let set: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let Some(s) = solve(&set) else {
                // Numerically dependent column: drop it and stop growing.
                passive[j] = false;
                return x;
            };
            if s.iter().all(|&v| v > 0.0) {
                for (&i, &v) in set.iter().zip(&s) {
                    x[i] = v;
                }
                break;
            }
            let mut alpha = 1.0f64;
            for (&i, &v) in set.iter().zip(&s) {
                if v <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - v));
                }
            }
            for (&i, &v) in set.iter().zip(&s) {
                x[i] += alpha * (v - x[i]);
                if x[i] <= tol * 1e-6 {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x
}

fn check_feature(feature: &AcousticFeature, config: &AudioConfig) -> Result<()> {
    if !feature.mel.is_finite() {
        return Err(DspError::Data("mel spectrogram contains non-finite values".into()));
    }
    if feature.dims() != config.n_mels {
        return Err(DspError::Shape(format!(
            "feature has {} mel bands, config expects {}",
            feature.dims(),
            config.n_mels
        )));
    }
    if feature.frames() == 0 {
        return Err(DspError::Shape("feature has no frames".into()));
    }
    Ok(())
}

/// Half-width in bins of the window kernel used to model spectral lines.
const KERNEL_HALF_WIDTH: usize = 6;

/// Normalized magnitude response of the analysis window at integer bin
/// offsets `0..=KERNEL_HALF_WIDTH`.
fn window_kernel(stft: &Stft) -> Vec<f64> {
    let spec = stft.rfft(stft.window());
    let peak = spec[0].norm();
    (0..=KERNEL_HALF_WIDTH).map(|d| spec[d].norm() / peak).collect()
}

fn convolve_kernel(line: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = line.len();
    let mut out = vec![0.0; n];
    for (j, &a) in line.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (d, &k) in kernel.iter().enumerate() {
            if j + d < n {
                out[j + d] += a * k;
            }
            if d > 0 && j >= d {
                out[j - d] += a * k;
            }
        }
    }
    out
}

/// Linear STFT magnitudes (`T x (n_fft / 2 + 1)`) whose mel projection best
/// matches the feature. Each frame is modelled as a non-negative line
/// spectrum blurred by the analysis window, which keeps isolated partials
/// at their true frequency instead of snapping to filter centers.
/// Floor-valued bands are treated as silent.
pub fn mel_to_linear(feature: &AcousticFeature, config: &AudioConfig) -> Result<Tensor2> {
    check_feature(feature, config)?;
    let n_fft = config.n_fft();
    let stft = Stft::new(n_fft, config.window_samples(), config.hop_samples());
    let kernel = window_kernel(&stft);
    let fb = mel_filterbank(config.sample_rate, n_fft, config.n_mels);
    let n_bins = fb.cols;
    let mut basis = Tensor2::zeros(fb.rows, n_bins);
    for m in 0..fb.rows {
        let row = convolve_kernel(fb.row(m), &kernel);
        basis.row_mut(m).copy_from_slice(&row);
    }
    let g = gram(&basis);
    let silent = MEL_LOG_FLOOR * (1.0 + 1e-9);
    let mut out = Tensor2::zeros(feature.frames(), n_bins);
    for t in 0..feature.frames() {
        let target: Vec<f64> = feature
            .mel
            .row(t)
            .iter()
            .map(|&v| {
                let e = v.exp();
                if e <= silent {
                    0.0
                } else {
                    e
                }
            })
            .collect();
        let atb: Vec<f64> = (0..n_bins)
            .map(|j| (0..basis.rows).map(|m| basis.get(m, j) * target[m]).sum())
            .collect();
        let line = nnls_gram(&g, &atb, n_bins);
        out.row_mut(t).copy_from_slice(&convolve_kernel(&line, &kernel));
    }
    Ok(out)
}

/// [`griffin_lim_with_error`] without the error trace.
pub fn griffin_lim(
    feature: &AcousticFeature,
    iterations: usize,
    config: &AudioConfig,
    seed: u64,
) -> Result<AudioBuffer> {
    griffin_lim_with_error(feature, iterations, config, seed).map(|(audio, _)| audio)
}

/// Reconstructs a waveform of `(T - 1) * hop` samples. Also returns the
/// final relative magnitude-consistency error
/// `|| |STFT(y)| - M || / ||M||` (0 for an all-silent input).
pub fn griffin_lim_with_error(
    feature: &AcousticFeature,
    iterations: usize,
    config: &AudioConfig,
    seed: u64,
) -> Result<(AudioBuffer, f64)> {
    if iterations == 0 {
        return Err(DspError::Parameter("iterations must be at least 1".into()));
    }
    let magnitude = mel_to_linear(feature, config)?;
    let n_frames = magnitude.rows;
    let hop = config.hop_samples();
    let stft = Stft::new(config.n_fft(), config.window_samples(), hop);
    let norm = magnitude.data.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames: Vec<Vec<Complex<f64>>> = (0..n_frames)
        .map(|t| {
            magnitude
                .row(t)
                .iter()
                .map(|&m| Complex::from_polar(m, 2.0 * PI * rng.random::<f64>()))
                .collect()
        })
        .collect();
    let mut signal = stft.synthesize_ls(&frames);
    let mut error = 0.0;
    for _ in 0..iterations {
        let analysed = stft.analyze_raw(&signal, n_frames);
        let mut err2 = 0.0;
        for (t, (frame, spec)) in frames.iter_mut().zip(&analysed).enumerate() {
            for (k, (x, s)) in frame.iter_mut().zip(spec).enumerate() {
                let m = magnitude.get(t, k);
                let a = s.norm();
                err2 += (a - m) * (a - m);
                *x = if a > 0.0 { *s * (m / a) } else { Complex::new(m, 0.0) };
            }
        }
        error = if norm > 0.0 { err2.sqrt() / norm } else { 0.0 };
        signal = stft.synthesize_ls(&frames);
    }
    let start = stft.n_fft / 2;
    let len = (n_frames - 1) * hop;
    let samples = signal[start..start + len].to_vec();
    Ok((AudioBuffer::new(samples, config.sample_rate)?, error))
}
