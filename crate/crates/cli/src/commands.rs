//! The five pipeline commands. Each is an ordinary function so it can be
//! driven from tests as well as from the binary.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use svs_aug::augment::{
    apply_pitch_augmentation, augmented_id, plan_shifts, ShiftKind, ShiftPolicy, TrainingPair,
};
use svs_aug::dsp::{frame_count, griffin_lim, load_audio, save_audio, AcousticFeature, AudioBuffer, AudioConfig};
use svs_aug::metrics::{evaluate, EvalPair, EvalReport};
use svs_aug::score_io::{
    durations_to_frames, parse_events, parse_phrase_label, segment_song, serialize_phrase_label, validate_events,
    MusicScore, PhonemeVocab, VocabMode,
};
use svs_aug::training::{
    config_hash, rng_stream, Checkpoint, FitSummary, NormStats, RngStream, RunDir, Sample, TrainError, Trainer,
};

use crate::config::RunConfig;
use crate::error::{CliError, Context, Result};
use crate::manifest::{
    write_feature, Failure, LoadedManifest, Manifest, ManifestEntry, Split, MANIFEST_FILE,
};

pub const EVAL_REPORT_FILE: &str = "eval_report.json";

const PHRASE_DIR: &str = "phrases";
const FEATURE_DIR: &str = "features";

/// Rounds to the 16-bit grid so the written WAV reproduces the audio the
/// features were computed from.
fn quantize(audio: &AudioBuffer) -> AudioBuffer {
    AudioBuffer {
        samples: audio
            .samples
            .iter()
            .map(|s| (s * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0)
            .collect(),
        sample_rate: audio.sample_rate,
    }
}

/// `(stem, wav, lab)` for every complete pair under `dir`, sorted by stem,
/// plus a failure for every file missing its partner.
fn find_pairs(dir: &Path) -> Result<(Vec<(String, PathBuf, PathBuf)>, Vec<Failure>)> {
    let mut wavs = BTreeSet::new();
    let mut labs = BTreeSet::new();
    for entry in fs::read_dir(dir).context(dir.display())? {
        let path = entry.context(dir.display())?.path();
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else {
            continue;
        };
        let stem = stem.to_string_lossy().into_owned();
        match ext.to_string_lossy().as_ref() {
            "wav" => wavs.insert(stem),
            "lab" => labs.insert(stem),
            _ => false,
        };
    }
    let mut failures = Vec::new();
    for stem in wavs.symmetric_difference(&labs) {
        let missing = if wavs.contains(stem) { "lab" } else { "wav" };
        failures.push(Failure {
            item: stem.clone(),
            error: format!("missing {stem}.{missing}"),
        });
    }
    let pairs = wavs
        .intersection(&labs)
        .map(|s| (s.clone(), dir.join(format!("{s}.wav")), dir.join(format!("{s}.lab"))))
        .collect();
    Ok((pairs, failures))
}

/// Splits one song into rebased phrase scores with their audio.
fn load_song(
    stem: &str,
    wav: &Path,
    lab: &Path,
    vocab: &mut PhonemeVocab,
    config: &RunConfig,
) -> Result<Vec<(MusicScore, AudioBuffer)>> {
    let text = fs::read_to_string(lab).context(lab.display())?;
    let events = parse_events(&text, VocabMode::Grow(vocab)).context(lab.display())?;
    if events.is_empty() {
        return Err(CliError::data(format!("{}: no events", lab.display())));
    }
    validate_events(&events).context(lab.display())?;
    let audio = load_audio(wav, config.audio.sample_rate).context(wav.display())?;
    let end = events.last().expect("non-empty").offset;
    // Allow one sample of rounding in the label times.
    if end > audio.duration() + 1.0 / audio.sample_rate as f64 {
        return Err(CliError::data(format!(
            "{}: labels run to {end:.3} s, audio lasts {:.3} s",
            lab.display(),
            audio.duration()
        )));
    }
    Ok(segment_song(stem, &events, config.data.min_gap)
        .into_iter()
        .map(|score| {
            let start = score.events.first().expect("phrases are non-empty").onset;
            let stop = score.events.last().expect("phrases are non-empty").offset;
            let clip = quantize(&audio.slice_seconds(start, stop));
            (score.rebased(), clip)
        })
        .collect())
}

fn split_key(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

fn split_count(n: usize, fraction: f64) -> usize {
    let c = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n >= 3 {
        c.max(1)
    } else {
        c
    }
}

/// Orders phrases by a seeded hash of their id and cuts the order into
/// train, validation and test parts.
pub fn assign_splits(ids: &[String], seed: u64, valid_fraction: f64, test_fraction: f64) -> Vec<Split> {
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| split_key(seed, &ids[i]));
    let n_test = split_count(n, test_fraction);
    let n_valid = split_count(n, valid_fraction).min(n.saturating_sub(n_test + 1));
    let n_train = n.saturating_sub(n_valid + n_test);
    let mut splits = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    splits
}

fn relative(dir: &str, id: &str, ext: &str) -> PathBuf {
    Path::new(dir).join(format!("{id}.{ext}"))
}

/// Writes the WAV, label and feature files of one phrase under `out`.
fn write_phrase(
    out: &Path,
    source: &str,
    shift: i32,
    split: Split,
    pair: &TrainingPair,
    vocab: &PhonemeVocab,
) -> Result<ManifestEntry> {
    let id = &pair.score.phrase_id;
    let entry = ManifestEntry {
        id: id.clone(),
        source: source.to_string(),
        shift,
        split,
        wav: relative(PHRASE_DIR, id, "wav"),
        lab: relative(PHRASE_DIR, id, "lab"),
        feature: relative(FEATURE_DIR, id, "feat"),
        frames: pair.feature.frames(),
        durations: pair.durations.frames_per_event.clone(),
    };
    let wav = out.join(&entry.wav);
    save_audio(&wav, &pair.audio).context(wav.display())?;
    let lab = out.join(&entry.lab);
    fs::write(&lab, serialize_phrase_label(&pair.score, vocab)?).context(lab.display())?;
    write_feature(&out.join(&entry.feature), &pair.feature)?;
    Ok(entry)
}

fn create_layout(out: &Path) -> Result<()> {
    for d in [PHRASE_DIR, FEATURE_DIR] {
        let p = out.join(d);
        fs::create_dir_all(&p).context(p.display())?;
    }
    Ok(())
}

fn failure_summary(failures: &[Failure]) -> String {
    failures
        .iter()
        .map(|f| format!("\n  {}: {}", f.item, f.error))
        .collect()
}

/// Segments every song of `corpus`, extracts features and durations, splits
/// the phrases and writes `out/manifest.json`.
pub fn prepare(corpus: &Path, out: &Path, config: &RunConfig) -> Result<Manifest> {
    if !corpus.is_dir() {
        return Err(CliError::data(format!("corpus directory {} does not exist", corpus.display())));
    }
    let (songs, mut failures) = find_pairs(corpus)?;
    if songs.is_empty() {
        return Err(CliError::data(format!(
            "no wav + lab pairs in {}{}",
            corpus.display(),
            failure_summary(&failures)
        )));
    }
    let mut vocab = PhonemeVocab::default();
    let mut pairs = Vec::new();
    for (stem, wav, lab) in &songs {
        let phrases = match load_song(stem, wav, lab, &mut vocab, config) {
            Ok(p) => p,
            Err(e) => {
                failures.push(Failure {
                    item: stem.clone(),
                    error: e.to_string(),
                });
                continue;
            }
        };
        for (score, audio) in phrases {
            let id = score.phrase_id.clone();
            match TrainingPair::new(score, audio, &config.audio) {
                Ok(p) => pairs.push(p),
                Err(e) => failures.push(Failure {
                    item: id,
                    error: e.to_string(),
                }),
            }
        }
    }
    for f in &failures {
        log::warn!("skipped {}: {}", f.item, f.error);
    }
    if pairs.is_empty() {
        return Err(CliError::data(format!(
            "no usable phrases in {}{}",
            corpus.display(),
            failure_summary(&failures)
        )));
    }

    let ids: Vec<String> = pairs.iter().map(|p| p.score.phrase_id.clone()).collect();
    let splits = assign_splits(&ids, config.seed, config.data.valid_fraction, config.data.test_fraction);
    let train: Vec<&TrainingPair> = pairs
        .iter()
        .zip(&splits)
        .filter(|(_, s)| **s == Split::Train)
        .map(|(p, _)| p)
        .collect();
    let stats = NormStats::from_features(train.iter().map(|p| &p.feature.mel))?;
    let dataset_mean_pitch = svs_aug::augment::dataset_mean_pitch(train.iter().map(|p| &p.score))?;

    create_layout(out)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (pair, split) in pairs.iter().zip(&splits) {
        entries.push(write_phrase(out, &pair.score.phrase_id, 0, *split, pair, &vocab)?);
    }
    let manifest = Manifest {
        seed: config.seed,
        audio: config.audio.clone(),
        vocab: vocab.tokens().to_vec(),
        stats,
        dataset_mean_pitch,
        entries,
        failures,
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    let count = |s| splits.iter().filter(|&&x| x == s).count();
    log::info!(
        "prepared {} phrases from {} songs: {} train, {} valid, {} test",
        pairs.len(),
        songs.len(),
        count(Split::Train),
        count(Split::Valid),
        count(Split::Test)
    );
    Ok(manifest)
}

/// Fills in the dataset mean of an adaptive policy from the manifest.
pub fn resolve_policy(policy: &ShiftPolicy, manifest: &Manifest) -> ShiftPolicy {
    match (policy.kind, policy.dataset_mean_pitch) {
        (ShiftKind::PAdaptive, None) => ShiftPolicy::adaptive(manifest.dataset_mean_pitch),
        _ => policy.clone(),
    }
}

/// Pitch-shifted copies of every original training phrase. Shifts are drawn
/// per phrase from a stream keyed by the phrase's manifest position, so the
/// same manifest and seed always give the same copies. Phrases whose shift
/// leaves the valid range are reported and skipped.
pub fn shifted_pairs(
    lm: &LoadedManifest,
    config: &RunConfig,
) -> Result<(Vec<(usize, i32, TrainingPair)>, Vec<Failure>)> {
    let vocab = lm.manifest.vocab();
    let policy = resolve_policy(&config.shift_policy, &lm.manifest);
    let existing: BTreeSet<&str> = lm.manifest.entries.iter().map(|e| e.id.as_str()).collect();
    let mut out = Vec::new();
    let mut failures = Vec::new();
    for (index, e) in lm.manifest.entries.iter().enumerate() {
        if e.split != Split::Train || !e.is_original() {
            continue;
        }
        let pair = lm.pair(e, &vocab, &config.audio)?;
        let mut rng = rng_stream(config.seed, RngStream::Augment, index as u64);
        for k in plan_shifts(&policy, &pair.score, config.data.pa_copies, &mut rng)? {
            let id = augmented_id(&e.id, k);
            if existing.contains(id.as_str()) {
                continue;
            }
            match apply_pitch_augmentation(&pair, k, &config.audio) {
                Ok(mut p) => {
                    p.score.phrase_id = id;
                    out.push((index, k, p));
                }
                Err(err) => {
                    log::warn!("skipped {id}: {err}");
                    failures.push(Failure {
                        item: id,
                        error: err.to_string(),
                    });
                }
            }
        }
    }
    Ok((out, failures))
}

fn copy_into(lm: &LoadedManifest, e: &ManifestEntry, out: &Path) -> Result<()> {
    for rel in [&e.wav, &e.lab, &e.feature] {
        let (from, to) = (lm.path(rel), out.join(rel));
        let same = match (from.canonicalize(), to.canonicalize()) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        };
        if !same {
            fs::copy(&from, &to).context(from.display())?;
        }
    }
    Ok(())
}

/// Materializes pitch-shifted training phrases and writes a manifest under
/// `out` listing them after their originals.
pub fn augment(manifest: &Path, out: &Path, config: &RunConfig) -> Result<Manifest> {
    let lm = Manifest::load(manifest)?;
    if lm.manifest.audio != config.audio {
        return Err(CliError::usage("audio settings differ from those the manifest was prepared with"));
    }
    create_layout(out)?;
    let vocab = lm.manifest.vocab();
    let (shifted, new_failures) = shifted_pairs(&lm, config)?;
    let mut entries = Vec::with_capacity(lm.manifest.entries.len() + shifted.len());
    let mut next = shifted.into_iter().peekable();
    for (index, e) in lm.manifest.entries.iter().enumerate() {
        copy_into(&lm, e, out)?;
        entries.push(e.clone());
        while let Some((_, k, pair)) = next.next_if(|(i, _, _)| *i == index) {
            entries.push(write_phrase(out, &e.id, k, Split::Train, &pair, &vocab)?);
        }
    }
    let added = entries.len() - lm.manifest.entries.len();
    let mut failures = lm.manifest.failures.clone();
    failures.extend(new_failures);
    let augmented = Manifest {
        entries,
        failures,
        ..lm.manifest
    };
    augmented.save(&out.join(MANIFEST_FILE))?;
    log::info!("added {added} pitch-shifted phrases");
    Ok(augmented)
}

/// Options of [`train`] beyond the run configuration.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub manifest: Option<PathBuf>,
    pub resume: bool,
    pub stop_after: Option<usize>,
}

/// Training and validation samples as selected by the configuration.
pub fn load_samples(lm: &LoadedManifest, config: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let vocab = lm.manifest.vocab();
    let mut train = Vec::new();
    for e in lm.entries(Split::Train) {
        if e.is_original() || config.toggles.pa {
            train.push(lm.sample(e, &vocab)?);
        }
    }
    if config.toggles.pa && !lm.manifest.has_augmented() {
        let (shifted, _) = shifted_pairs(lm, config)?;
        for (_, _, pair) in &shifted {
            train.push(Sample::from_pair(pair, &lm.manifest.stats)?);
        }
    }
    let valid = lm
        .entries(Split::Valid)
        .filter(|e| e.is_original())
        .map(|e| lm.sample(e, &vocab))
        .collect::<Result<Vec<_>>>()?;
    if train.is_empty() || valid.is_empty() {
        return Err(CliError::data("the manifest needs training and validation phrases"));
    }
    Ok((train, valid))
}

/// Trains into `run_dir`. A fresh run freezes the configuration into the
/// directory; a resumed run replays the frozen configuration.
pub fn train(run_dir: &Path, config: &RunConfig, options: &TrainOptions) -> Result<FitSummary> {
    let run = RunDir::create(run_dir)?;
    let frozen_path = run.config_path();
    let mut config = if options.resume {
        RunConfig::load(&frozen_path)?
    } else {
        if frozen_path.exists() || run.latest_checkpoint()?.is_some() {
            return Err(CliError::usage(format!(
                "{} already holds a run; pass --resume to continue it",
                run_dir.display()
            )));
        }
        config.clone()
    };
    let manifest_path = options
        .manifest
        .clone()
        .or_else(|| config.data.manifest.clone())
        .ok_or_else(|| CliError::usage("no manifest given"))?;
    let lm = Manifest::load(&manifest_path)?;
    if !options.resume {
        config.data.manifest = Some(manifest_path);
        config.shift_policy = resolve_policy(&config.shift_policy, &lm.manifest);
        config.save(&frozen_path)?;
    }
    let (train, valid) = load_samples(&lm, &config)?;
    log::info!("training on {} phrases, validating on {}", train.len(), valid.len());
    let tc = config.train_config();
    let mut trainer = if options.resume {
        Trainer::resume(tc, &run)?
    } else {
        Trainer::new(tc, lm.manifest.vocab(), lm.manifest.stats.clone())?
    };
    Ok(trainer.fit(&train, &valid, Some(&run), options.stop_after)?)
}

fn load_checkpoint(path: &Path, config: Option<&RunConfig>) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path).context(path.display())?;
    if let Some(c) = config {
        if config_hash(&c.model, &ckpt.meta.vocab) != ckpt.config_hash {
            return Err(TrainError::Compatibility(format!(
                "{} was trained with a different model configuration",
                path.display()
            ))
            .into());
        }
    }
    Ok(ckpt)
}

fn inference_trainer(ckpt: &Checkpoint, audio: &AudioConfig) -> Result<Trainer> {
    if ckpt.meta.model.mel_dims != audio.n_mels {
        return Err(TrainError::Compatibility(format!(
            "checkpoint predicts {} mel bins, audio settings use {}",
            ckpt.meta.model.mel_dims, audio.n_mels
        ))
        .into());
    }
    Ok(Trainer::for_inference(ckpt)?)
}

fn label_files(scores: &Path) -> Result<Vec<PathBuf>> {
    if !scores.is_dir() {
        return Ok(vec![scores.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(scores)
        .context(scores.display())?
        .map(|e| e.map(|e| e.path()).context(scores.display()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "lab"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::data(format!("no .lab files in {}", scores.display())));
    }
    Ok(files)
}

/// Predicts a mel spectrogram for every label file under `scores`, using
/// durations taken from the label timing, and writes `<id>.feat` and a
/// Griffin-Lim `<id>.wav` per phrase. All scores are checked against the
/// vocabulary before anything is written.
pub fn synth(checkpoint: &Path, scores: &Path, out: &Path, config: &RunConfig, check_hash: bool) -> Result<Vec<String>> {
    let ckpt = load_checkpoint(checkpoint, check_hash.then_some(config))?;
    let audio = &config.audio;
    let trainer = inference_trainer(&ckpt, audio)?;
    let mut parsed = Vec::new();
    for path in label_files(scores)? {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let text = fs::read_to_string(&path).context(path.display())?;
        let score = parse_phrase_label(&id, &text, VocabMode::Strict(&trainer.vocab)).context(path.display())?;
        parsed.push(score.rebased());
    }
    fs::create_dir_all(out).context(out.display())?;
    let frame_shift = audio.hop_samples() as f64 / audio.sample_rate as f64;
    let mut ids = Vec::with_capacity(parsed.len());
    for score in parsed {
        let end = score.events.last().expect("parsed scores are non-empty").offset;
        let frames = frame_count((end * audio.sample_rate as f64).round() as usize, audio.hop_samples());
        let durations = durations_to_frames(&score, frame_shift, frames).context(&score.phrase_id)?;
        let feature = AcousticFeature {
            mel: trainer.predict(&score, &durations)?,
            frame_shift,
        };
        write_feature(&out.join(format!("{}.feat", score.phrase_id)), &feature)?;
        let wav = griffin_lim(&feature, audio.griffin_lim_iterations, audio, config.seed)?;
        let path = out.join(format!("{}.wav", score.phrase_id));
        save_audio(&path, &wav).context(path.display())?;
        ids.push(score.phrase_id);
    }
    log::info!("synthesized {} phrases into {}", ids.len(), out.display());
    Ok(ids)
}

/// How [`eval`] obtains the synthesized side of each pair.
#[derive(Debug, Clone, Copy)]
pub enum EvalSource<'a> {
    /// Predict with a checkpoint and invert with Griffin-Lim.
    Checkpoint { path: &'a Path, check_hash: bool },
    /// Use the ground-truth mel and waveform, which checks the metric
    /// pipeline itself.
    Oracle,
}

/// Scores the test split and writes `out/eval_report.json`.
pub fn eval(manifest: &Path, source: EvalSource<'_>, out: &Path, config: &RunConfig) -> Result<EvalReport> {
    let lm = Manifest::load(manifest)?;
    let audio = &lm.manifest.audio;
    let vocab = lm.manifest.vocab();
    let trainer = match source {
        EvalSource::Oracle => None,
        EvalSource::Checkpoint { path, check_hash } => {
            let ckpt = load_checkpoint(path, check_hash.then_some(config))?;
            if ckpt.meta.vocab != lm.manifest.vocab {
                return Err(TrainError::Compatibility(format!(
                    "{} uses a different phoneme vocabulary than the manifest",
                    path.display()
                ))
                .into());
            }
            Some(inference_trainer(&ckpt, audio)?)
        }
    };
    let tests: Vec<&ManifestEntry> = lm.entries(Split::Test).filter(|e| e.is_original()).collect();
    if tests.is_empty() {
        return Err(CliError::data("the manifest has no test phrases"));
    }
    let mut pairs = Vec::with_capacity(tests.len());
    for e in tests {
        let wav = lm.path(&e.wav);
        let ref_audio = load_audio(&wav, audio.sample_rate).context(wav.display())?;
        let ref_feature = lm.feature(e)?;
        let (syn_audio, syn_feature) = match &trainer {
            None => (ref_audio.clone(), ref_feature.clone()),
            Some(t) => {
                let score = lm.score(e, &vocab)?;
                let durations = svs_aug::score_io::FrameDurations::new(e.durations.clone());
                let feature = AcousticFeature {
                    mel: t.predict(&score, &durations)?,
                    frame_shift: ref_feature.frame_shift,
                };
                let wav = griffin_lim(&feature, audio.griffin_lim_iterations, audio, config.seed)?;
                (wav, feature)
            }
        };
        pairs.push(EvalPair {
            id: e.id.clone(),
            ref_audio,
            syn_audio,
            ref_feature,
            syn_feature,
        });
    }
    let report = evaluate(&pairs, audio)?;
    fs::create_dir_all(out).context(out.display())?;
    let path = out.join(EVAL_REPORT_FILE);
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(&path, text).context(path.display())?;
    for p in report.pairs.iter().filter(|p| p.error.is_some()) {
        log::warn!("{}: {}", p.id, p.error.as_deref().unwrap_or_default());
    }
    log::info!("wrote {}", path.display());
    Ok(report)
}
