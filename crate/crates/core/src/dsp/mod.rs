//! Audio front end: WAV I/O, mel features, F0 estimation, a small
//! source-filter vocoder with semitone-exact pitch shifting, and
//! Griffin-Lim inversion.

mod griffin_lim;
mod mel;
mod pitch;
mod stft;
mod vocoder;
mod wav;

pub use griffin_lim::{griffin_lim, griffin_lim_with_error, mel_to_linear, nnls};
pub use mel::{
    dct_ortho, idct_ortho, mel_cepstra, mel_filterbank, mel_spectrogram, AcousticFeature,
    MEL_LOG_FLOOR,
};
pub use pitch::{estimate_f0, estimate_f0_with, hz_to_midi, midi_to_hz, F0Track};
pub use stft::{frame_count, hann_window, Stft};
pub use vocoder::{analyze, pitch_shift_audio, synthesize, synthesize_with_seed, VocoderParams};
pub use wav::{load_audio, resample, save_audio};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("frequency must be positive, got {0}")]
    Domain(f64),
    #[error("unsupported or malformed audio file: {0}")]
    Format(String),
    #[error("audio has {samples} samples, at least {needed} required")]
    TooShort { samples: usize, needed: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(DspError::Parameter("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(DspError::Data("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Copy of `[start, end)` seconds, clamped to the buffer.
    pub fn slice_seconds(&self, start: f64, end: f64) -> AudioBuffer {
        let sr = self.sample_rate as f64;
        let a = ((start * sr).round().max(0.0) as usize).min(self.samples.len());
        let b = ((end * sr).round().max(0.0) as usize).clamp(a, self.samples.len());
        AudioBuffer {
            samples: self.samples[a..b].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Analysis parameters shared by the feature extractor, the F0 estimator
/// and the vocoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    /// Feature hop in seconds.
    pub frame_shift: f64,
    /// Analysis window in seconds.
    pub frame_length: f64,
    pub n_mels: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    pub voicing_clarity: f64,
    pub voicing_rms: f64,
    /// Hop of the vocoder analysis in seconds.
    pub vocoder_frame_shift: f64,
    pub max_shift_semitones: i32,
    pub griffin_lim_iterations: usize,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            frame_shift: 0.0125,
            frame_length: 0.05,
            n_mels: 80,
            f0_min: 60.0,
            f0_max: 800.0,
            voicing_clarity: 0.6,
            voicing_rms: 1e-4,
            vocoder_frame_shift: 0.005,
            max_shift_semitones: 24,
            griffin_lim_iterations: 60,
        }
    }
}

impl AudioConfig {
    pub fn hop_samples(&self) -> usize {
        (self.frame_shift * self.sample_rate as f64).round() as usize
    }

    pub fn window_samples(&self) -> usize {
        (self.frame_length * self.sample_rate as f64).round() as usize
    }

    /// Smallest power of two not below the window length.
    pub fn n_fft(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DspError::Parameter(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if !(self.frame_shift > 0.0) || self.hop_samples() == 0 {
            return bad("frame_shift must be positive");
        }
        if !(self.frame_length > 0.0) || self.window_samples() < 2 {
            return bad("frame_length must cover at least two samples");
        }
        if !(self.vocoder_frame_shift > 0.0) {
            return bad("vocoder_frame_shift must be positive");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive");
        }
        if !(self.f0_min > 0.0 && self.f0_min < self.f0_max) {
            return bad("need 0 < f0_min < f0_max");
        }
        if self.f0_max >= self.sample_rate as f64 / 2.0 {
            return bad("f0_max must be below Nyquist");
        }
        if self.griffin_lim_iterations == 0 {
            return bad("griffin_lim_iterations must be at least 1");
        }
        Ok(())
    }
}
