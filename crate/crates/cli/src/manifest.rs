//! Prepared-corpus manifest and the on-disk phrase files it points to.
//!
//! A feature file holds one log-mel matrix, little-endian:
//!
//! ```text
//! magic        8 bytes   "SVSAFEAT"
//! frame_shift  f64       seconds
//! rows         u32       frames
//! cols         u32       mel bins
//! values       rows * cols f64, row-major
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svs_aug::augment::TrainingPair;
use svs_aug::dsp::{load_audio, AcousticFeature, AudioConfig};
use svs_aug::score_io::{parse_phrase_label, FrameDurations, MusicScore, PhonemeVocab, VocabMode};
use svs_aug::tensor::Tensor2;
use svs_aug::training::{NormStats, Sample};

use crate::error::{CliError, Context, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"SVSAFEAT";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_feature(path: &Path, feature: &AcousticFeature) -> Result<()> {
    let m = &feature.mel;
    let mut out = Vec::with_capacity(24 + m.data.len() * 8);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&feature.frame_shift.to_le_bytes());
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).context(path.display())
}

pub fn read_feature(path: &Path) -> Result<AcousticFeature> {
    let bytes = fs::read(path).context(path.display())?;
    let bad = || CliError::data(format!("{}: not a feature file", path.display()));
    if bytes.len() < 24 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad());
    }
    let frame_shift = f64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes"));
    let rows = u32::from_le_bytes(bytes[16..20].try_into().expect("four bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[20..24].try_into().expect("four bytes")) as usize;
    let body = &bytes[24..];
    if body.len() != rows * cols * 8 {
        return Err(bad());
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    Ok(AcousticFeature {
        mel: Tensor2::from_vec(rows, cols, data),
        frame_shift,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Phrase this entry was derived from; equal to `id` for originals.
    pub source: String,
    /// Semitone shift relative to `source`.
    pub shift: i32,
    pub split: Split,
    /// Paths are relative to the manifest's directory.
    pub wav: PathBuf,
    pub lab: PathBuf,
    pub feature: PathBuf,
    pub frames: usize,
    pub durations: Vec<usize>,
}

impl ManifestEntry {
    pub fn is_original(&self) -> bool {
        self.shift == 0
    }
}

/// A song or phrase that could not be used, kept for the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Failure {
    pub item: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub audio: AudioConfig,
    pub vocab: Vec<String>,
    /// Feature statistics of the original training phrases.
    pub stats: NormStats,
    /// Duration-weighted mean MIDI pitch of the original training phrases.
    pub dataset_mean_pitch: f64,
    pub entries: Vec<ManifestEntry>,
    pub failures: Vec<Failure>,
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub dir: PathBuf,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).context(path.display())
    }

    pub fn load(path: &Path) -> Result<LoadedManifest> {
        let text = fs::read_to_string(path).context(path.display())?;
        let manifest: Manifest = serde_json::from_str(&text).context(path.display())?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedManifest { manifest, dir })
    }

    pub fn vocab(&self) -> PhonemeVocab {
        PhonemeVocab::from_tokens(&self.vocab)
    }

    pub fn has_augmented(&self) -> bool {
        self.entries.iter().any(|e| !e.is_original())
    }
}

impl LoadedManifest {
    pub fn path(&self, rel: &Path) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.manifest.entries.iter().filter(move |e| e.split == split)
    }

    pub fn score(&self, entry: &ManifestEntry, vocab: &PhonemeVocab) -> Result<MusicScore> {
        let path = self.path(&entry.lab);
        let text = fs::read_to_string(&path).context(path.display())?;
        parse_phrase_label(&entry.id, &text, VocabMode::Strict(vocab)).context(path.display())
    }

    pub fn feature(&self, entry: &ManifestEntry) -> Result<AcousticFeature> {
        let f = read_feature(&self.path(&entry.feature))?;
        if f.frames() != entry.frames || entry.durations.iter().sum::<usize>() != entry.frames {
            return Err(CliError::data(format!(
                "{}: feature has {} frames, manifest records {}",
                entry.id,
                f.frames(),
                entry.frames
            )));
        }
        Ok(f)
    }

    /// Normalized training sample for `entry`.
    pub fn sample(&self, entry: &ManifestEntry, vocab: &PhonemeVocab) -> Result<Sample> {
        let score = self.score(entry, vocab)?;
        let feature = self.feature(entry)?;
        let target = self.manifest.stats.normalize(&feature.mel)?;
        Sample::new(score, FrameDurations::new(entry.durations.clone()), target).context(&entry.id)
    }

    /// Score, audio, feature and durations of `entry`.
    pub fn pair(&self, entry: &ManifestEntry, vocab: &PhonemeVocab, audio: &AudioConfig) -> Result<TrainingPair> {
        let path = self.path(&entry.wav);
        let pair = TrainingPair {
            score: self.score(entry, vocab)?,
            audio: load_audio(&path, audio.sample_rate).context(path.display())?,
            feature: self.feature(entry)?,
            durations: FrameDurations::new(entry.durations.clone()),
        };
        pair.check().context(&entry.id)?;
        Ok(pair)
    }
}
