//! Music score ingestion: phrase label files, transposition, song
//! segmentation and conversion of note timings to frame durations.
//!
//! A label file holds one event per line:
//!
//! ```text
//! phoneme<TAB>midi_pitch<TAB>onset_sec<TAB>offset_sec
//! ```
//!
//! Lines starting with `#` are comments. Pitch `0` marks a rest.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// MIDI pitch reserved for rests and silence.
pub const REST_PITCH: u8 = 0;
/// Phoneme id reserved for rests and silence.
pub const REST_PHONEME: usize = 0;
/// Token used for the rest phoneme in label files.
pub const REST_TOKEN: &str = "pau";

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("event {index}: {message}")]
    Validation { index: usize, message: String },
    #[error("unknown phoneme token `{0}`")]
    UnknownPhoneme(String),
    #[error("phoneme id {0} is outside the vocabulary")]
    UnknownPhonemeId(usize),
    #[error("event {index}: pitch {pitch} shifted by {semitones} leaves the MIDI range")]
    PitchRange { index: usize, pitch: u8, semitones: i32 },
    #[error("cannot fit {events} events into {frames} frames")]
    Infeasible { events: usize, frames: usize },
    #[error("frame shift must be positive, got {0}")]
    FrameShift(f64),
    #[error("score has no pitched events")]
    UndefinedPitch,
    #[error("score has no events")]
    Empty,
}

/// One note (or rest) of a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEvent {
    pub phoneme: usize,
    pub pitch: u8,
    pub onset: f64,
    pub offset: f64,
}

impl ScoreEvent {
    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }

    pub fn is_rest(&self) -> bool {
        self.pitch == REST_PITCH
    }
}

/// A singing phrase: ordered, non-overlapping events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicScore {
    pub phrase_id: String,
    pub events: Vec<ScoreEvent>,
}

/// Per-event frame counts used by the length regulator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameDurations {
    pub frames_per_event: Vec<usize>,
    pub total_frames: usize,
}

impl FrameDurations {
    pub fn new(frames_per_event: Vec<usize>) -> Self {
        let total_frames = frames_per_event.iter().sum();
        Self {
            frames_per_event,
            total_frames,
        }
    }

    pub fn len(&self) -> usize {
        self.frames_per_event.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames_per_event.is_empty()
    }

    /// Repeats each per-event value by its frame count.
    pub fn expand<T: Copy>(&self, per_event: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.total_frames);
        for (&value, &n) in per_event.iter().zip(&self.frames_per_event) {
            out.extend(std::iter::repeat_n(value, n));
        }
        out
    }
}

/// Bidirectional phoneme token table. Id 0 is always the rest token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeVocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Default for PhonemeVocab {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<&str>())
    }
}

impl PhonemeVocab {
    /// Builds a vocabulary; the rest token is inserted at id 0 if absent.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            tokens: vec![REST_TOKEN.to_string()],
            index: BTreeMap::from([(REST_TOKEN.to_string(), REST_PHONEME)]),
        };
        for t in tokens {
            vocab.get_or_insert(t.as_ref());
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn get_or_insert(&mut self, token: &str) -> usize {
        if let Some(id) = self.id(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    /// Restores the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

/// How unknown tokens are treated while parsing.
#[derive(Debug)]
pub enum VocabMode<'a> {
    /// Unknown tokens are errors.
    Strict(&'a PhonemeVocab),
    /// Unknown tokens are appended to the vocabulary.
    Grow(&'a mut PhonemeVocab),
}

impl VocabMode<'_> {
    fn lookup(&mut self, token: &str) -> Result<usize, ScoreError> {
        match self {
            VocabMode::Strict(v) => v
                .id(token)
                .ok_or_else(|| ScoreError::UnknownPhoneme(token.to_string())),
            VocabMode::Grow(v) => Ok(v.get_or_insert(token)),
        }
    }
}

/// Parses label lines into raw events without ordering checks.
pub fn parse_events(text: &str, mut vocab: VocabMode<'_>) -> Result<Vec<ScoreEvent>, ScoreError> {
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(ScoreError::Parse {
                line: line_no,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let parse_err = |what: &str, v: &str| ScoreError::Parse {
            line: line_no,
            message: format!("invalid {what} `{v}`"),
        };
        let token = fields[0].trim();
        if token.is_empty() {
            return Err(parse_err("phoneme", token));
        }
        let pitch: u8 = fields[1]
            .trim()
            .parse()
            .map_err(|_| parse_err("pitch", fields[1]))?;
        if pitch > 127 {
            return Err(parse_err("pitch", fields[1]));
        }
        let onset: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err("onset", fields[2]))?;
        let offset: f64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| parse_err("offset", fields[3]))?;
        if !onset.is_finite() || !offset.is_finite() || onset < 0.0 {
            return Err(parse_err("timing", line));
        }
        let phoneme = vocab.lookup(token).map_err(|e| match e {
            ScoreError::UnknownPhoneme(t) => ScoreError::Parse {
                line: line_no,
                message: format!("unknown phoneme token `{t}`"),
            },
            other => other,
        })?;
        events.push(ScoreEvent {
            phoneme,
            pitch,
            onset,
            offset,
        });
    }
    Ok(events)
}

/// Checks ordering and timing invariants of an event list.
pub fn validate_events(events: &[ScoreEvent]) -> Result<(), ScoreError> {
    for (i, e) in events.iter().enumerate() {
        if e.offset <= e.onset {
            return Err(ScoreError::Validation {
                index: i,
                message: format!("offset {} is not after onset {}", e.offset, e.onset),
            });
        }
        if let Some(prev) = i.checked_sub(1).map(|p| &events[p]) {
            if e.onset < prev.onset {
                return Err(ScoreError::Validation {
                    index: i,
                    message: "events are not sorted by onset".into(),
                });
            }
            if e.onset < prev.offset {
                return Err(ScoreError::Validation {
                    index: i,
                    message: format!("overlaps previous event ending at {}", prev.offset),
                });
            }
        }
    }
    Ok(())
}

/// Parses one phrase label file.
pub fn parse_phrase_label(
    phrase_id: &str,
    text: &str,
    vocab: VocabMode<'_>,
) -> Result<MusicScore, ScoreError> {
    let events = parse_events(text, vocab)?;
    if events.is_empty() {
        return Err(ScoreError::Empty);
    }
    validate_events(&events)?;
    Ok(MusicScore {
        phrase_id: phrase_id.to_string(),
        events,
    })
}

/// Shortest round-trip representation, padded to at least four decimals.
fn format_seconds(v: f64) -> String {
    let s = format!("{v}");
    let decimals = s.split_once('.').map_or(0, |(_, frac)| frac.len());
    if decimals >= 4 {
        s
    } else {
        format!("{v:.4}")
    }
}

/// Writes a score in label format.
pub fn serialize_phrase_label(score: &MusicScore, vocab: &PhonemeVocab) -> Result<String, ScoreError> {
    let mut out = String::new();
    for e in &score.events {
        let token = vocab
            .token(e.phoneme)
            .ok_or(ScoreError::UnknownPhonemeId(e.phoneme))?;
        writeln!(
            out,
            "{token}\t{}\t{}\t{}",
            e.pitch,
            format_seconds(e.onset),
            format_seconds(e.offset)
        )
        .expect("writing to a String");
    }
    Ok(out)
}

impl MusicScore {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn phonemes(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.phoneme).collect()
    }

    pub fn pitches(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.pitch as usize).collect()
    }

    /// Shifts every pitched event by a number of semitones. Rests are kept.
    pub fn transpose(&self, semitones: i32) -> Result<MusicScore, ScoreError> {
        let mut events = self.events.clone();
        for (index, e) in events.iter_mut().enumerate() {
            if e.is_rest() {
                continue;
            }
            let shifted = e.pitch as i32 + semitones;
            // 0 is the rest marker, so a pitched note cannot land on it.
            if !(1..=127).contains(&shifted) {
                return Err(ScoreError::PitchRange {
                    index,
                    pitch: e.pitch,
                    semitones,
                });
            }
            e.pitch = shifted as u8;
        }
        Ok(MusicScore {
            phrase_id: self.phrase_id.clone(),
            events,
        })
    }

    /// Duration-weighted mean MIDI pitch over pitched events.
    pub fn mean_pitch(&self) -> Result<f64, ScoreError> {
        let (weighted, total) = self
            .events
            .iter()
            .filter(|e| !e.is_rest())
            .fold((0.0, 0.0), |(w, t), e| {
                (w + e.pitch as f64 * e.duration(), t + e.duration())
            });
        if total <= 0.0 {
            return Err(ScoreError::UndefinedPitch);
        }
        Ok(weighted / total)
    }

    /// Same events with onsets shifted so the first event starts at zero.
    pub fn rebased(&self) -> MusicScore {
        let start = self.events.first().map_or(0.0, |e| e.onset);
        MusicScore {
            phrase_id: self.phrase_id.clone(),
            events: self
                .events
                .iter()
                .map(|e| ScoreEvent {
                    onset: e.onset - start,
                    offset: e.offset - start,
                    ..e.clone()
                })
                .collect(),
        }
    }
}

pub fn transpose_score(score: &MusicScore, semitones: i32) -> Result<MusicScore, ScoreError> {
    score.transpose(semitones)
}

pub fn mean_pitch(score: &MusicScore) -> Result<f64, ScoreError> {
    score.mean_pitch()
}

/// Splits a song into phrases wherever consecutive events are separated by
/// at least `min_gap` seconds. Phrase ids are `<song_id>_<nnn>`.
pub fn segment_song(song_id: &str, events: &[ScoreEvent], min_gap: f64) -> Vec<MusicScore> {
    let mut phrases: Vec<Vec<ScoreEvent>> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        let split = i == 0 || e.onset - events[i - 1].offset >= min_gap;
        if split {
            phrases.push(Vec::new());
        }
        phrases.last_mut().expect("a phrase was opened").push(e.clone());
    }
    phrases
        .into_iter()
        .enumerate()
        .map(|(i, events)| MusicScore {
            phrase_id: format!("{song_id}_{i:03}"),
            events,
        })
        .collect()
}

/// Converts event timings to per-event frame counts summing to
/// `total_frames`.
///
/// Each event starts at `max(1, round(duration / frame_shift))`. Surplus
/// frames go one at a time to events in descending order of fractional
/// remainder; deficits are taken from events in ascending order of
/// remainder, never dropping an event below one frame. Ties go to the
/// earlier event.
pub fn durations_to_frames(
    score: &MusicScore,
    frame_shift: f64,
    total_frames: usize,
) -> Result<FrameDurations, ScoreError> {
    if frame_shift <= 0.0 || !frame_shift.is_finite() {
        return Err(ScoreError::FrameShift(frame_shift));
    }
    let n = score.events.len();
    if n == 0 {
        return Err(ScoreError::Empty);
    }
    if total_frames < n {
        return Err(ScoreError::Infeasible {
            events: n,
            frames: total_frames,
        });
    }
    let exact: Vec<f64> = score
        .events
        .iter()
        .map(|e| e.duration() / frame_shift)
        .collect();
    let mut frames: Vec<usize> = exact.iter().map(|d| (d.round() as usize).max(1)).collect();
    let remainder = |i: usize, frames: &[usize]| exact[i] - frames[i] as f64;

    let mut sum: usize = frames.iter().sum();
    while sum < total_frames {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            remainder(b, &frames)
                .total_cmp(&remainder(a, &frames))
                .then(a.cmp(&b))
        });
        for i in order.into_iter().take(total_frames - sum) {
            frames[i] += 1;
        }
        sum = frames.iter().sum();
    }
    while sum > total_frames {
        let mut order: Vec<usize> = (0..n).filter(|&i| frames[i] > 1).collect();
        order.sort_by(|&a, &b| {
            remainder(a, &frames)
                .total_cmp(&remainder(b, &frames))
                .then(a.cmp(&b))
        });
        for i in order.into_iter().take(sum - total_frames) {
            frames[i] -= 1;
        }
        sum = frames.iter().sum();
    }
    Ok(FrameDurations {
        frames_per_event: frames,
        total_frames,
    })
}
