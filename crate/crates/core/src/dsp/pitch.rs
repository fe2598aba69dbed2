//! Frequency/MIDI conversion and autocorrelation F0 estimation.

use serde::{Deserialize, Serialize};

use super::{stft::frame_count, AudioBuffer, DspError, Result};

/// Fraction of the strongest candidate a lag peak must reach to be chosen.
/// Taking the first such peak, rather than the maximum, avoids locking
/// onto multiples of the period.
const PEAK_RELATIVE_THRESHOLD: f64 = 0.95;

pub fn hz_to_midi(f: f64) -> Result<f64> {
    if !(f > 0.0) {
        return Err(DspError::Domain(f));
    }
    Ok(69.0 + 12.0 * (f / 440.0).log2())
}

pub fn midi_to_hz(m: f64) -> f64 {
    440.0 * ((m - 69.0) / 12.0).exp2()
}

/// Frame-level fundamental frequency; 0 Hz on unvoiced frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F0Track {
    pub f0_hz: Vec<f64>,
    pub voiced: Vec<bool>,
    pub frame_shift: f64,
}

impl F0Track {
    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn from_hz(f0_hz: Vec<f64>, frame_shift: f64) -> Self {
        let voiced = f0_hz.iter().map(|&f| f > 0.0).collect();
        Self {
            f0_hz,
            voiced,
            frame_shift,
        }
    }

    pub fn voiced_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.f0_hz
            .iter()
            .zip(&self.voiced)
            .filter(|(_, &v)| v)
            .map(|(&f, _)| f)
    }

    /// Median F0 over voiced frames.
    pub fn median_voiced(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.voiced_values().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 {
            v[m]
        } else {
            0.5 * (v[m - 1] + v[m])
        })
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.voiced.is_empty() {
            return 0.0;
        }
        self.voiced.iter().filter(|&&v| v).count() as f64 / self.voiced.len() as f64
    }

    pub fn truncate(&mut self, len: usize) {
        self.f0_hz.truncate(len);
        self.voiced.truncate(len);
    }
}

/// Result of analysing one frame.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FramePitch {
    pub f0: f64,
    pub clarity: f64,
}

/// Normalized cross-correlation pitch of the frame centered at `center`.
/// `window` is the integration length in samples.
pub(crate) fn frame_pitch(
    x: &[f64],
    center: usize,
    window: usize,
    min_lag: usize,
    max_lag: usize,
    sample_rate: f64,
) -> Option<FramePitch> {
    let start = center as isize - (window / 2) as isize;
    let at = |i: isize| -> f64 {
        if i < 0 {
            0.0
        } else {
            x.get(i as usize).copied().unwrap_or(0.0)
        }
    };
    let seg: Vec<f64> = (0..window + max_lag + 1)
        .map(|i| at(start + i as isize))
        .collect();
    let energy0: f64 = seg[..window].iter().map(|v| v * v).sum();
    if energy0 <= 0.0 {
        return None;
    }
    // Sliding energy of the lagged segment.
    let mut energy_lag: f64 = seg[min_lag - 1..min_lag - 1 + window].iter().map(|v| v * v).sum();
    let mut nccf = vec![0.0; max_lag + 2];
    for lag in min_lag - 1..=max_lag + 1 {
        if lag > min_lag - 1 {
            let out = seg[lag - 1];
            let inn = seg.get(lag - 1 + window).copied().unwrap_or(0.0);
            energy_lag += inn * inn - out * out;
        }
        let cross: f64 = seg[..window]
            .iter()
            .zip(&seg[lag..])
            .map(|(a, b)| a * b)
            .sum();
        let denom = (energy0 * energy_lag.max(0.0)).sqrt();
        nccf[lag] = if denom > 0.0 { cross / denom } else { 0.0 };
    }

    let peaks: Vec<usize> = (min_lag..=max_lag)
        .filter(|&l| nccf[l] > 0.0 && nccf[l] >= nccf[l - 1] && nccf[l] > nccf[l + 1])
        .collect();
    let best = peaks.iter().map(|&l| nccf[l]).fold(f64::NEG_INFINITY, f64::max);
    let lag = *peaks
        .iter()
        .find(|&&l| nccf[l] >= PEAK_RELATIVE_THRESHOLD * best)?;
    let (a, b, c) = (nccf[lag - 1], nccf[lag], nccf[lag + 1]);
    let curvature = a - 2.0 * b + c;
    let delta = if curvature < 0.0 {
        (0.5 * (a - c) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let clarity = b - 0.25 * (a - c) * delta;
    Some(FramePitch {
        f0: sample_rate / (lag as f64 + delta),
        clarity,
    })
}

/// Default voicing thresholds: normalized autocorrelation clarity and frame
/// RMS.
pub const DEFAULT_CLARITY: f64 = 0.6;
pub const DEFAULT_VOICING_RMS: f64 = 1e-4;

/// [`estimate_f0_with`] using the default voicing thresholds.
pub fn estimate_f0(audio: &AudioBuffer, frame_shift: f64, f0_min: f64, f0_max: f64) -> Result<F0Track> {
    estimate_f0_with(audio, frame_shift, f0_min, f0_max, DEFAULT_CLARITY, DEFAULT_VOICING_RMS)
}

/// Frame-wise F0 by normalized autocorrelation peak picking with parabolic
/// refinement. Frames are centered at multiples of `frame_shift`. A frame
/// is voiced when its clarity reaches `clarity_threshold`, its RMS reaches
/// `rms_threshold` and the estimate lies in `[f0_min, f0_max]`.
pub fn estimate_f0_with(
    audio: &AudioBuffer,
    frame_shift: f64,
    f0_min: f64,
    f0_max: f64,
    clarity_threshold: f64,
    rms_threshold: f64,
) -> Result<F0Track> {
    if !(frame_shift > 0.0) {
        return Err(DspError::Parameter(format!(
            "frame_shift must be positive, got {frame_shift}"
        )));
    }
    if !(f0_min > 0.0 && f0_min < f0_max) {
        return Err(DspError::Parameter(format!(
            "need 0 < f0_min < f0_max, got [{f0_min}, {f0_max}]"
        )));
    }
    if audio.is_empty() {
        return Err(DspError::TooShort {
            samples: 0,
            needed: 1,
        });
    }
    let sr = audio.sample_rate as f64;
    let hop = (frame_shift * sr).round().max(1.0) as usize;
    let min_lag = ((sr / f0_max).floor() as usize).max(2);
    let max_lag = (sr / f0_min).ceil() as usize;
    let window = 2 * max_lag;
    let n_frames = frame_count(audio.len(), hop);

    let mut f0_hz = vec![0.0; n_frames];
    let mut voiced = vec![false; n_frames];
    for t in 0..n_frames {
        let center = t * hop;
        let lo = center.saturating_sub(window / 2);
        let hi = (center + window / 2).min(audio.len());
        let rms = if hi > lo {
            (audio.samples[lo..hi].iter().map(|v| v * v).sum::<f64>() / (hi - lo) as f64).sqrt()
        } else {
            0.0
        };
        if rms < rms_threshold {
            continue;
        }
        if let Some(p) = frame_pitch(&audio.samples, center, window, min_lag, max_lag, sr) {
            if p.clarity >= clarity_threshold && p.f0 >= f0_min && p.f0 <= f0_max {
                f0_hz[t] = p.f0;
                voiced[t] = true;
            }
        }
    }
    Ok(F0Track {
        f0_hz,
        voiced,
        frame_shift: hop as f64 / sr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn sine(freq: f64, secs: f64) -> AudioBuffer {
        let sr = 24_000;
        let n = (sr as f64 * secs) as usize;
        AudioBuffer::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / sr as f64).sin())
                .collect(),
            sr,
        )
        .unwrap()
    }

    fn cents(a: f64, b: f64) -> f64 {
        1200.0 * (a / b).log2()
    }

    #[test]
    fn midi_reference_points() {
        assert_eq!(hz_to_midi(440.0).unwrap(), 69.0);
        assert_eq!(hz_to_midi(880.0).unwrap(), 81.0);
        let ratio = midi_to_hz(70.0) / midi_to_hz(69.0);
        assert!((ratio - 1.059).abs() < 5e-4);
        assert!((ratio - 2f64.powf(1.0 / 12.0)).abs() < 1e-12);
        assert!(matches!(hz_to_midi(0.0), Err(DspError::Domain(_))));
        assert!(matches!(hz_to_midi(-3.0), Err(DspError::Domain(_))));
    }

    proptest! {
        #[test]
        fn midi_hz_round_trip(f in 50.0f64..2000.0) {
            let back = midi_to_hz(hz_to_midi(f).unwrap());
            prop_assert!(((back - f) / f).abs() < 1e-9);
        }
    }

    #[test]
    fn pure_tone_within_five_cents() {
        let track = estimate_f0(&sine(220.0, 0.5), 0.0125, 60.0, 800.0).unwrap();
        let median = track.median_voiced().unwrap();
        assert!(cents(median, 220.0).abs() < 5.0, "median {median}");
        assert!(track.voiced_fraction() > 0.9);
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let audio =
            AudioBuffer::new((0..12_000).map(|_| rng.random_range(-0.5..0.5)).collect(), 24_000)
                .unwrap();
        let track = estimate_f0(&audio, 0.0125, 60.0, 800.0).unwrap();
        assert!(track.voiced_fraction() <= 0.1, "{}", track.voiced_fraction());
    }

    #[test]
    fn silence_is_unvoiced() {
        let audio = AudioBuffer::new(vec![0.0; 6000], 24_000).unwrap();
        let track = estimate_f0(&audio, 0.0125, 60.0, 800.0).unwrap();
        assert_eq!(track.len(), 21);
        assert!(track.voiced.iter().all(|v| !v));
        assert!(track.f0_hz.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn rejects_bad_parameters() {
        let audio = sine(220.0, 0.1);
        assert!(matches!(
            estimate_f0(&audio, 0.0, 60.0, 800.0),
            Err(DspError::Parameter(_))
        ));
        assert!(matches!(
            estimate_f0(&audio, 0.01, 800.0, 60.0),
            Err(DspError::Parameter(_))
        ));
    }
}
