use std::path::Path;

use super::{AudioBuffer, DspError, Result};

const SINC_ZERO_CROSSINGS: usize = 16;

/// Reads a 16-bit PCM mono WAV file and resamples it to `target_rate`.
pub fn load_audio(path: impl AsRef<Path>, target_rate: u32) -> Result<AudioBuffer> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(DspError::Format(format!("{} does not exist", path.display())));
    }
    let reader = hound::WavReader::open(path).map_err(|e| DspError::Format(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DspError::Format(format!(
            "expected mono audio, found {} channels",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(DspError::Format(format!(
            "expected 16-bit PCM, found {:?} at {} bits",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| DspError::Format(e.to_string()))?;
    let audio = AudioBuffer::new(samples, spec.sample_rate)?;
    Ok(resample(&audio, target_rate))
}

/// Writes 16-bit PCM mono. Samples are clipped to [-1, 1).
pub fn save_audio(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    if audio.samples.iter().any(|s| !s.is_finite()) {
        return Err(DspError::Data("non-finite sample".into()));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| DspError::Format(e.to_string()))?;
    for &s in &audio.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(q)
            .map_err(|e| DspError::Format(e.to_string()))?;
    }
    writer
        .finalize()
        .map_err(|e| DspError::Format(e.to_string()))
}

/// Band-limited resampling with a Blackman-windowed sinc kernel.
pub fn resample(audio: &AudioBuffer, target_rate: u32) -> AudioBuffer {
    if audio.sample_rate == target_rate || audio.samples.is_empty() {
        return AudioBuffer {
            samples: audio.samples.clone(),
            sample_rate: target_rate,
        };
    }
    let ratio = target_rate as f64 / audio.sample_rate as f64;
    let cutoff = ratio.min(1.0);
    let half_width = SINC_ZERO_CROSSINGS as f64 / cutoff;
    let n_in = audio.samples.len();
    let n_out = (n_in as f64 * ratio).round() as usize;
    let kernel = |x: f64| -> f64 {
        if x.abs() >= half_width {
            return 0.0;
        }
        let sinc = if x == 0.0 {
            1.0
        } else {
            let px = std::f64::consts::PI * x * cutoff;
            px.sin() / px
        };
        let t = (x / half_width + 1.0) * 0.5;
        let two_pi_t = 2.0 * std::f64::consts::PI * t;
        let window = 0.42 - 0.5 * two_pi_t.cos() + 0.08 * (2.0 * two_pi_t).cos();
        cutoff * sinc * window
    };
    let samples = (0..n_out)
        .map(|j| {
            let t = j as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(n_in - 1);
            (lo..=hi).map(|i| audio.samples[i] * kernel(t - i as f64)).sum()
        })
        .collect();
    AudioBuffer {
        samples,
        sample_rate: target_rate,
    }
}
