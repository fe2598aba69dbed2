//! Source-filter analysis/synthesis with independent F0, spectral envelope
//! and aperiodicity channels.
//!
//! Analysis:
//! * F0 from [`estimate_f0_with`] at the vocoder hop.
//! * SP: periodogram averaged over one harmonic spacing, then cepstrally
//!   liftered in the log domain. Scaled so that white noise of variance
//!   `s` has `SP = s` and a pulse train of period `P` samples through a
//!   filter `H` has `SP = |H|^2 / P`.
//! * AP: per band, mean inter-harmonic power over mean total power.
//!
//! Synthesis drives zero-phase pulse responses `sqrt(SP * P * (1 - AP))`
//! at fractional pulse positions, plus white noise shaped by
//! `sqrt(SP * AP)` (`sqrt(SP)` when unvoiced), overlap-added with a
//! power-complementary window.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;

use super::pitch::{estimate_f0_with, F0Track};
use super::stft::{frame_count, hann_window, Stft};
use super::{AudioBuffer, AudioConfig, DspError, Result};
use crate::tensor::Tensor2;

const SP_FLOOR: f64 = 1e-8;
/// Smoothing width in Hz used for unvoiced frames.
const UNVOICED_SMOOTHING_HZ: f64 = 300.0;
const AP_BAND_EDGES_HZ: [f64; 5] = [0.0, 1000.0, 2000.0, 4000.0, 8000.0];
/// Half-width of the harmonic region around each partial, relative to F0.
const HARMONIC_HALF_WIDTH: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct VocoderParams {
    pub f0: F0Track,
    /// `T x (n_fft / 2 + 1)` power envelope.
    pub sp: Tensor2,
    /// `T x (n_fft / 2 + 1)` aperiodic power fraction in `[0, 1]`.
    pub ap: Tensor2,
    pub sample_rate: u32,
    /// Length of the analysed signal.
    pub num_samples: usize,
}

impl VocoderParams {
    pub fn frames(&self) -> usize {
        self.f0.len()
    }

    pub fn n_fft(&self) -> usize {
        (self.sp.cols - 1) * 2
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.f0.len();
        if self.f0.voiced.len() != t || self.sp.rows != t || self.ap.rows != t {
            return Err(DspError::Shape(format!(
                "frame counts differ: f0 {t}, voicing {}, sp {}, ap {}",
                self.f0.voiced.len(),
                self.sp.rows,
                self.ap.rows
            )));
        }
        if self.sp.cols != self.ap.cols || self.sp.cols < 2 {
            return Err(DspError::Shape(format!(
                "sp has {} bins, ap has {}",
                self.sp.cols, self.ap.cols
            )));
        }
        if self.sp.data.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(DspError::Data("spectral envelope must be positive".into()));
        }
        if self.ap.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(DspError::Data("aperiodicity must lie in [0, 1]".into()));
        }
        for (f, &v) in self.f0.f0_hz.iter().zip(&self.f0.voiced) {
            if v != (*f > 0.0) || !f.is_finite() {
                return Err(DspError::Data("f0 and voicing flags disagree".into()));
            }
        }
        Ok(())
    }

    /// Scales F0 by `2^(semitones / 12)` on voiced frames. SP and AP are
    /// copied unchanged.
    pub fn shift_pitch(&self, semitones: i32) -> VocoderParams {
        let ratio = (semitones as f64 / 12.0).exp2();
        let mut out = self.clone();
        for (f, &v) in out.f0.f0_hz.iter_mut().zip(&self.f0.voiced) {
            if v {
                *f *= ratio;
            }
        }
        out
    }
}

fn zero_padded_frames(stft: &Stft, samples: &[f64], n_frames: usize) -> Vec<Vec<Complex<f64>>> {
    let pad = stft.n_fft / 2;
    let mut padded = vec![0.0; pad];
    padded.extend_from_slice(samples);
    padded.extend(std::iter::repeat_n(0.0, pad));
    stft.analyze_raw(&padded, n_frames)
}

/// Average of `power` over `[k - width/2, k + width/2]` (in bins) treating
/// each bin as a unit-wide step, mirrored at both ends.
fn box_smooth(power: &[f64], width: f64) -> Vec<f64> {
    let n = power.len();
    let ext = (width.ceil() as usize + 2).min(n - 1);
    // Extended array: mirrored tail, body, mirrored head.
    let mut extended = Vec::with_capacity(n + 2 * ext);
    extended.extend((1..=ext).rev().map(|i| power[i]));
    extended.extend_from_slice(power);
    extended.extend((0..ext).map(|i| power[n - 2 - i]));
    let mut prefix = vec![0.0; extended.len() + 1];
    for (i, v) in extended.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    // Integral from the left edge of the extended array to position x,
    // where bin j occupies [j - 0.5, j + 0.5).
    let integral = |x: f64| -> f64 {
        let pos = (x + 0.5).clamp(0.0, extended.len() as f64);
        let whole = pos.floor() as usize;
        let frac = pos - whole as f64;
        prefix[whole] + if whole < extended.len() { frac * extended[whole] } else { 0.0 }
    };
    (0..n)
        .map(|k| {
            let c = (k + ext) as f64;
            (integral(c + width / 2.0) - integral(c - width / 2.0)) / width
        })
        .collect()
}

/// Smooths a log spectrum by keeping quefrencies below `cutoff` samples
/// under a raised-cosine lifter.
fn lifter(stft: &Stft, log_spec: &[f64], cutoff: f64) -> Vec<f64> {
    let as_complex: Vec<Complex<f64>> = log_spec.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut cep = stft.irfft(&as_complex);
    let n = cep.len();
    for (q, c) in cep.iter_mut().enumerate() {
        let quef = q.min(n - q) as f64;
        *c *= if quef < cutoff {
            0.5 * (1.0 + (PI * quef / cutoff).cos())
        } else {
            0.0
        };
    }
    stft.rfft(&cep).iter().map(|c| c.re).collect()
}

/// Extracts F0, spectral envelope and aperiodicity.
pub fn analyze(audio: &AudioBuffer, config: &AudioConfig) -> Result<VocoderParams> {
    if audio.is_empty() {
        return Err(DspError::TooShort {
            samples: 0,
            needed: 1,
        });
    }
    let sr = audio.sample_rate as f64;
    let f0 = estimate_f0_with(
        audio,
        config.vocoder_frame_shift,
        config.f0_min,
        config.f0_max,
        config.voicing_clarity,
        config.voicing_rms,
    )?;
    let hop = (config.vocoder_frame_shift * sr).round() as usize;
    let win = (config.frame_length * sr).round() as usize;
    let n_fft = win.next_power_of_two();
    let stft = Stft::new(n_fft, win, hop);
    let n_frames = frame_count(audio.len(), hop);
    debug_assert_eq!(n_frames, f0.len());
    let window_power: f64 = stft.window().iter().map(|w| w * w).sum();
    let bin_hz = sr / n_fft as f64;
    let n_bins = stft.n_bins();

    let frames = zero_padded_frames(&stft, &audio.samples, n_frames);
    let mut sp = Tensor2::zeros(n_frames, n_bins);
    let mut ap = Tensor2::filled(n_frames, n_bins, 1.0);
    for (t, spec) in frames.iter().enumerate() {
        let power: Vec<f64> = spec.iter().map(|c| c.norm_sqr() / window_power).collect();
        let voiced = f0.voiced[t];
        let ref_f0 = if voiced { f0.f0_hz[t] } else { UNVOICED_SMOOTHING_HZ };

        let smoothed = box_smooth(&power, ref_f0 / bin_hz);
        let log_spec: Vec<f64> = smoothed.iter().map(|p| (p + SP_FLOOR * 1e-4).ln()).collect();
        let envelope = lifter(&stft, &log_spec, 0.5 * sr / ref_f0);
        for (k, l) in envelope.iter().enumerate() {
            sp.set(t, k, l.exp().max(SP_FLOOR));
        }

        if voiced {
            let f = f0.f0_hz[t];
            let mut edges = AP_BAND_EDGES_HZ.to_vec();
            edges.retain(|&e| e < sr / 2.0);
            edges.push(sr / 2.0 + bin_hz);
            for band in edges.windows(2) {
                let (lo, hi) = (band[0], band[1]);
                let bins: Vec<usize> = (0..n_bins)
                    .filter(|&k| {
                        let hz = k as f64 * bin_hz;
                        hz >= lo && hz < hi
                    })
                    .collect();
                if bins.is_empty() {
                    continue;
                }
                let (mut inter_sum, mut inter_n, mut total) = (0.0, 0usize, 0.0);
                for &k in &bins {
                    let hz = k as f64 * bin_hz;
                    let harmonic = (hz / f).round();
                    let near = harmonic >= 1.0 && (hz - harmonic * f).abs() <= HARMONIC_HALF_WIDTH * f;
                    total += power[k];
                    if !near {
                        inter_sum += power[k];
                        inter_n += 1;
                    }
                }
                let mean_total = total / bins.len() as f64;
                let ratio = if mean_total <= 1e-20 || inter_n == 0 {
                    1.0
                } else {
                    (inter_sum / inter_n as f64 / mean_total).clamp(0.0, 1.0)
                };
                for &k in &bins {
                    ap.set(t, k, ratio);
                }
            }
        }
    }
    Ok(VocoderParams {
        f0,
        sp,
        ap,
        sample_rate: audio.sample_rate,
        num_samples: audio.len(),
    })
}

/// [`synthesize_with_seed`] with seed 0.
pub fn synthesize(params: &VocoderParams) -> Result<AudioBuffer> {
    synthesize_with_seed(params, 0)
}

/// Resynthesizes a waveform of `params.num_samples` samples. The noise
/// excitation is drawn from a generator seeded with `seed`.
pub fn synthesize_with_seed(params: &VocoderParams, seed: u64) -> Result<AudioBuffer> {
    params.validate()?;
    let sr = params.sample_rate as f64;
    let n_frames = params.frames();
    let n = params.num_samples;
    let hop = (params.f0.frame_shift * sr).round().max(1.0) as usize;
    let n_fft = params.n_fft();
    let n_bins = params.sp.cols;
    let stft = Stft::new(n_fft, n_fft, hop);
    let mut out = vec![0.0; n];

    // Periodic part.
    let f0_at = |pos: f64| -> Option<f64> {
        let x = pos / hop as f64;
        let i = (x.floor() as usize).min(n_frames - 1);
        let j = (i + 1).min(n_frames - 1);
        let nearest = if x - (i as f64) < 0.5 { i } else { j };
        if !params.f0.voiced[nearest] {
            return None;
        }
        let (fi, fj) = (params.f0.f0_hz[i], params.f0.f0_hz[j]);
        Some(match (params.f0.voiced[i], params.f0.voiced[j]) {
            (true, true) => {
                let a = (x - i as f64).clamp(0.0, 1.0);
                fi + a * (fj - fi)
            }
            (true, false) => fi,
            _ => fj,
        })
    };
    let taper = hann_window(n_fft);
    // Phase in cycles; a pulse fires at each integer crossing, located to
    // sub-sample precision, and at every voicing onset.
    let mut phase: Option<f64> = None;
    for s in 0..n {
        let Some(f) = f0_at(s as f64) else {
            phase = None;
            continue;
        };
        let inc = f / sr;
        phase = Some(match phase {
            None => {
                add_pulse(params, &stft, &taper, s as f64, hop, &mut out);
                0.0
            }
            Some(p) if p + inc >= 1.0 => {
                let tp = s as f64 - 1.0 + (1.0 - p) / inc;
                add_pulse(params, &stft, &taper, tp, hop, &mut out);
                p + inc - 1.0
            }
            Some(p) => p + inc,
        });
    }

    // Aperiodic part.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seg = 2 * hop;
    let ola: Vec<f64> = (0..seg).map(|i| (PI * i as f64 / seg as f64).sin()).collect();
    let mut noise = vec![0.0; n_fft];
    let mut shaped = vec![Complex::new(0.0, 0.0); n_bins];
    for t in 0..n_frames {
        for v in noise.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let spec = stft.rfft(&noise);
        let voiced = params.f0.voiced[t];
        for k in 0..n_bins {
            let ap = if voiced { params.ap.get(t, k) } else { 1.0 };
            shaped[k] = spec[k] * (params.sp.get(t, k) * ap).sqrt();
        }
        let filtered = stft.irfft(&shaped);
        let start = t as isize * hop as isize - hop as isize;
        let offset = n_fft / 2 - hop;
        for i in 0..seg {
            let pos = start + i as isize;
            if pos >= 0 && (pos as usize) < n {
                out[pos as usize] += ola[i] * filtered[offset + i];
            }
        }
    }
    AudioBuffer::new(out, params.sample_rate)
}

fn add_pulse(
    params: &VocoderParams,
    stft: &Stft,
    taper: &[f64],
    tp: f64,
    hop: usize,
    out: &mut [f64],
) {
    let sr = params.sample_rate as f64;
    let n_fft = stft.n_fft;
    let frame = ((tp / hop as f64).round() as usize).min(params.frames() - 1);
    let f = params.f0.f0_hz[frame];
    if f <= 0.0 {
        return;
    }
    let period = sr / f;
    let base = tp.floor();
    let frac = tp - base;
    let spectrum: Vec<Complex<f64>> = (0..params.sp.cols)
        .map(|k| {
            let amp = (params.sp.get(frame, k) * period * (1.0 - params.ap.get(frame, k))).sqrt();
            let angle = -2.0 * PI * k as f64 * frac / n_fft as f64;
            Complex::from_polar(amp, angle)
        })
        .collect();
    let response = stft.irfft(&spectrum);
    let half = n_fft as isize / 2;
    for i in 0..n_fft {
        let m = i as isize - half;
        let pos = base as isize + m;
        if pos < 0 || pos as usize >= out.len() {
            continue;
        }
        let idx = m.rem_euclid(n_fft as isize) as usize;
        out[pos as usize] += taper[i] * response[idx];
    }
}

/// Shifts pitch by an integer number of semitones through the vocoder,
/// leaving the spectral envelope and aperiodicity untouched.
pub fn pitch_shift_audio(audio: &AudioBuffer, semitones: i32, config: &AudioConfig) -> Result<AudioBuffer> {
    if semitones.abs() > config.max_shift_semitones {
        return Err(DspError::Range(format!(
            "shift of {semitones} semitones exceeds the ±{} bound",
            config.max_shift_semitones
        )));
    }
    let params = analyze(audio, config)?;
    let shifted = params.shift_pitch(semitones);
    let limit = audio.sample_rate as f64 / 4.0;
    if let Some(f) = shifted.f0.voiced_values().find(|&f| f > limit) {
        return Err(DspError::Range(format!(
            "shifted F0 {f:.1} Hz exceeds the {limit:.0} Hz safety bound"
        )));
    }
    synthesize(&shifted)
}
