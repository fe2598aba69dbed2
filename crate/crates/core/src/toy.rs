//! Seeded synthetic singing corpus for tests, demos and sanity runs.
//!
//! Each phrase is a rest, three to five sung notes and a closing rest.
//! Notes are harmonic tones whose partial amplitudes follow a per-phoneme
//! formant envelope, so both the phoneme and the pitch are recoverable from
//! the spectrum.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{self, TrainingPair};
use crate::dsp::{midi_to_hz, save_audio, AudioBuffer, AudioConfig, DspError};
use crate::score_io::{serialize_phrase_label, MusicScore, PhonemeVocab, ScoreEvent, REST_PHONEME, REST_PITCH};

/// Sung tokens with their first three formant frequencies in Hz.
pub const TOY_PHONEMES: [(&str, [f64; 3]); 9] = [
    ("a", [800.0, 1200.0, 2500.0]),
    ("e", [500.0, 1900.0, 2600.0]),
    ("i", [300.0, 2300.0, 3000.0]),
    ("o", [500.0, 850.0, 2500.0]),
    ("u", [320.0, 800.0, 2300.0]),
    ("m", [250.0, 1100.0, 2200.0]),
    ("n", [250.0, 1600.0, 2600.0]),
    ("l", [380.0, 1300.0, 2900.0]),
    ("r", [450.0, 1250.0, 1700.0]),
];

pub const TOY_LOWEST_PITCH: u8 = 55;
pub const TOY_PITCHES: u8 = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusConfig {
    pub phrases: usize,
    pub seed: u64,
    pub sample_rate: u32,
    /// Note lengths are whole multiples of this grid, in seconds.
    pub grid: f64,
    pub min_note_steps: usize,
    pub max_note_steps: usize,
    pub rest_steps: usize,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            phrases: 32,
            seed: 0,
            sample_rate: 24_000,
            grid: 0.0125,
            min_note_steps: 7,
            max_note_steps: 13,
            rest_steps: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub vocab: PhonemeVocab,
    /// Phrase scores starting at time zero with their audio.
    pub phrases: Vec<(MusicScore, AudioBuffer)>,
}

pub fn toy_vocab() -> PhonemeVocab {
    PhonemeVocab::from_tokens(TOY_PHONEMES.iter().map(|(t, _)| *t))
}

pub fn generate(config: &ToyCorpusConfig) -> ToyCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let phrases = (0..config.phrases)
        .map(|i| {
            let score = random_score(&format!("toy_{i:03}"), config, &mut rng);
            let audio = render(&score, config.sample_rate);
            (score, audio)
        })
        .collect();
    ToyCorpus {
        vocab: toy_vocab(),
        phrases,
    }
}

fn random_score<R: Rng>(id: &str, config: &ToyCorpusConfig, rng: &mut R) -> MusicScore {
    let mut events = Vec::new();
    let mut t = 0usize;
    let mut push = |phoneme, pitch, steps: usize, t: &mut usize| {
        events.push(ScoreEvent {
            phoneme,
            pitch,
            onset: *t as f64 * config.grid,
            offset: (*t + steps) as f64 * config.grid,
        });
        *t += steps;
    };
    push(REST_PHONEME, REST_PITCH, config.rest_steps, &mut t);
    for _ in 0..rng.random_range(3..=5) {
        let phoneme = rng.random_range(1..=TOY_PHONEMES.len());
        let pitch = TOY_LOWEST_PITCH + rng.random_range(0..TOY_PITCHES);
        let steps = rng.random_range(config.min_note_steps..=config.max_note_steps);
        push(phoneme, pitch, steps, &mut t);
    }
    push(REST_PHONEME, REST_PITCH, config.rest_steps, &mut t);
    MusicScore {
        phrase_id: id.to_string(),
        events,
    }
}

fn formant_gain(freq: f64, formants: &[f64; 3]) -> f64 {
    let peaks: f64 = formants
        .iter()
        .zip([1.0, 0.6, 0.3])
        .map(|(&f, g)| {
            let bw = 80.0 + 0.06 * f;
            g * (-0.5 * ((freq - f) / bw).powi(2)).exp()
        })
        .sum();
    peaks + 0.02
}

/// Renders a score as additive harmonic tones with short fades at note
/// boundaries. Rests are silent.
pub fn render(score: &MusicScore, sample_rate: u32) -> AudioBuffer {
    let sr = sample_rate as f64;
    let end = score.events.last().map_or(0.0, |e| e.offset);
    let start = score.events.first().map_or(0.0, |e| e.onset);
    let mut samples = vec![0.0; ((end - start) * sr).round() as usize];
    let fade = (0.008 * sr) as usize;
    for e in score.events.iter().filter(|e| !e.is_rest()) {
        let a = ((e.onset - start) * sr).round() as usize;
        let b = (((e.offset - start) * sr).round() as usize).min(samples.len());
        let f0 = midi_to_hz(e.pitch as f64);
        let formants = &TOY_PHONEMES[e.phoneme - 1].1;
        let harmonics: Vec<(f64, f64)> = (1..)
            .map(|h| h as f64 * f0)
            .take_while(|&f| f < 0.45 * sr)
            .map(|f| (f, formant_gain(f, formants)))
            .collect();
        let norm: f64 = harmonics.iter().map(|(_, g)| g).sum();
        for (n, s) in samples[a..b].iter_mut().enumerate() {
            let t = n as f64 / sr;
            let v: f64 = harmonics.iter().map(|(f, g)| g * (TAU * f * t).sin()).sum();
            let edge = n.min(b - a - 1 - n);
            let env = if edge < fade {
                0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / fade as f64).cos()
            } else {
                1.0
            };
            *s = 0.4 * env * v / norm;
        }
    }
    AudioBuffer {
        samples,
        sample_rate,
    }
}

impl ToyCorpus {
    pub fn training_pairs(&self, config: &AudioConfig) -> augment::Result<Vec<TrainingPair>> {
        self.phrases
            .iter()
            .map(|(s, a)| TrainingPair::new(s.clone(), a.clone(), config))
            .collect()
    }

    /// Writes songs of `phrases_per_song` phrases separated by `gap`
    /// seconds of silence as `<song>.wav` + `<song>.lab` pairs. Returns the
    /// label paths.
    pub fn write_songs(&self, dir: &Path, phrases_per_song: usize, gap: f64) -> Result<Vec<PathBuf>, DspError> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (song, chunk) in self.phrases.chunks(phrases_per_song.max(1)).enumerate() {
            let mut events = Vec::new();
            let mut samples = Vec::new();
            let sr = chunk[0].1.sample_rate;
            for (i, (score, audio)) in chunk.iter().enumerate() {
                if i > 0 {
                    samples.extend(std::iter::repeat_n(0.0, (gap * sr as f64).round() as usize));
                }
                let offset = samples.len() as f64 / sr as f64;
                events.extend(score.events.iter().map(|e| ScoreEvent {
                    onset: e.onset + offset,
                    offset: e.offset + offset,
                    ..e.clone()
                }));
                samples.extend_from_slice(&audio.samples);
            }
            let name = format!("song_{song:02}");
            let label = serialize_phrase_label(
                &MusicScore {
                    phrase_id: name.clone(),
                    events,
                },
                &self.vocab,
            )
            .map_err(|e| DspError::Data(e.to_string()))?;
            save_audio(dir.join(format!("{name}.wav")), &AudioBuffer { samples, sample_rate: sr })?;
            let lab = dir.join(format!("{name}.lab"));
            fs::write(&lab, label)?;
            written.push(lab);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{estimate_f0, load_audio};
    use crate::score_io::{parse_events, segment_song, VocabMode};

    #[test]
    fn corpus_shape() {
        let c = generate(&ToyCorpusConfig::default());
        assert_eq!(c.phrases.len(), 32);
        assert_eq!(c.vocab.len(), 10);
        for (s, a) in &c.phrases {
            assert!((4..=7).contains(&s.events.len()));
            assert!(s.events.iter().filter(|e| !e.is_rest()).all(|e| (55..=66).contains(&e.pitch)));
            assert_eq!(a.len(), (s.events.last().unwrap().offset * 24_000.0).round() as usize);
            assert!(a.samples.iter().all(|v| v.abs() < 1.0));
        }
        assert_eq!(c, generate(&ToyCorpusConfig::default()));
    }

    #[test]
    fn notes_carry_their_pitch() {
        let c = generate(&ToyCorpusConfig { phrases: 2, ..ToyCorpusConfig::default() });
        let (s, a) = &c.phrases[0];
        let track = estimate_f0(a, 0.0125, 60.0, 800.0).unwrap();
        let note = &s.events[1];
        let mid = ((note.onset + note.offset) / 2.0 / 0.0125) as usize;
        let cents = 1200.0 * (track.f0_hz[mid] / midi_to_hz(note.pitch as f64)).log2();
        assert!(cents.abs() < 20.0, "{cents}");
    }

    #[test]
    fn songs_segment_back_into_phrases() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&ToyCorpusConfig { phrases: 6, ..ToyCorpusConfig::default() });
        let labs = c.write_songs(dir.path(), 3, 0.5).unwrap();
        assert_eq!(labs.len(), 2);
        let mut vocab = c.vocab.clone();
        let events = parse_events(&fs::read_to_string(&labs[1]).unwrap(), VocabMode::Strict(&mut vocab)).unwrap();
        let phrases = segment_song("song_01", &events, 0.3);
        assert_eq!(phrases.len(), 3);
        for (p, (orig, _)) in phrases.iter().zip(&c.phrases[3..]) {
            assert_eq!(p.rebased().phonemes(), orig.phonemes());
        }
        let audio = load_audio(labs[1].with_extension("wav"), 24_000).unwrap();
        let total: f64 = c.phrases[3..].iter().map(|(_, a)| a.duration()).sum::<f64>() + 1.0;
        assert!((audio.duration() - total).abs() < 1e-3);
    }
}
