//! Pitch augmentation over paired (score, audio) samples and mix-up
//! interpolation primitives over expanded hidden states.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{mel_spectrogram, pitch_shift_audio, AcousticFeature, AudioBuffer, AudioConfig, DspError};
use crate::score_io::{durations_to_frames, FrameDurations, MusicScore, ScoreError};
use crate::tensor::Tensor2;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

/// One supervised sample: a phrase score, its audio, the cached log-mel
/// feature and the frame durations aligning the two.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub score: MusicScore,
    pub audio: AudioBuffer,
    pub feature: AcousticFeature,
    pub durations: FrameDurations,
}

impl TrainingPair {
    /// Extracts the feature and derives durations from the score timing.
    pub fn new(score: MusicScore, audio: AudioBuffer, config: &AudioConfig) -> Result<Self> {
        let feature = mel_spectrogram(&audio, config)?;
        let durations = durations_to_frames(&score, feature.frame_shift, feature.frames())?;
        Ok(Self {
            score,
            audio,
            feature,
            durations,
        })
    }

    pub fn check(&self) -> Result<()> {
        if self.durations.total_frames != self.feature.frames() {
            return Err(AugmentError::Shape(format!(
                "durations cover {} frames, feature has {}",
                self.durations.total_frames,
                self.feature.frames()
            )));
        }
        if self.durations.frames_per_event.len() != self.score.events.len() {
            return Err(AugmentError::Shape(format!(
                "{} durations for {} events",
                self.durations.frames_per_event.len(),
                self.score.events.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Uniform over {-1, 0, 1}.
    P1,
    /// Uniform over {-2, ..., 2}.
    P2,
    /// Three-wide window pointing toward the dataset mean pitch.
    PAdaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftPolicy {
    pub kind: ShiftKind,
    #[serde(default)]
    pub dataset_mean_pitch: Option<f64>,
}

/// Tolerance in semitones within which a sample counts as already at the
/// dataset mean.
pub const ADAPTIVE_TOLERANCE: f64 = 0.5;

impl Default for ShiftPolicy {
    fn default() -> Self {
        Self::new(ShiftKind::P1)
    }
}

impl ShiftPolicy {
    pub fn new(kind: ShiftKind) -> Self {
        Self {
            kind,
            dataset_mean_pitch: None,
        }
    }

    pub fn adaptive(dataset_mean_pitch: f64) -> Self {
        Self {
            kind: ShiftKind::PAdaptive,
            dataset_mean_pitch: Some(dataset_mean_pitch),
        }
    }

    /// Candidate shifts for a sample with the given mean pitch.
    pub fn candidates(&self, sample_mean: f64) -> Result<[i32; 3]> {
        match self.kind {
            ShiftKind::P1 => Ok([-1, 0, 1]),
            ShiftKind::P2 => Err(AugmentError::Config("P2 has five candidates".into())),
            ShiftKind::PAdaptive => {
                let mean = self.dataset_mean_pitch.ok_or_else(|| {
                    AugmentError::Config("adaptive policy needs dataset_mean_pitch".into())
                })?;
                Ok(if (sample_mean - mean).abs() <= ADAPTIVE_TOLERANCE {
                    [-1, 0, 1]
                } else if sample_mean < mean {
                    [0, 1, 2]
                } else {
                    [-2, -1, 0]
                })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ShiftKind::PAdaptive {
            match self.dataset_mean_pitch {
                Some(m) if m.is_finite() => {}
                _ => return Err(AugmentError::Config("adaptive policy needs a finite dataset_mean_pitch".into())),
            }
        }
        Ok(())
    }
}

/// Duration-weighted mean MIDI pitch over the non-rest events of all
/// scores.
pub fn dataset_mean_pitch<'a>(scores: impl IntoIterator<Item = &'a MusicScore>) -> Result<f64> {
    let (mut weighted, mut total) = (0.0, 0.0);
    for s in scores {
        for e in s.events.iter().filter(|e| !e.is_rest()) {
            weighted += e.pitch as f64 * e.duration();
            total += e.duration();
        }
    }
    if total <= 0.0 {
        return Err(AugmentError::Score(ScoreError::UndefinedPitch));
    }
    Ok(weighted / total)
}

/// Draws a semitone shift for `score` under `policy`.
pub fn sample_shift<R: Rng + ?Sized>(policy: &ShiftPolicy, score: &MusicScore, rng: &mut R) -> Result<i32> {
    match policy.kind {
        ShiftKind::P2 => Ok(rng.random_range(-2..=2)),
        ShiftKind::P1 => Ok(rng.random_range(-1..=1)),
        ShiftKind::PAdaptive => {
            policy.validate()?;
            let window = policy.candidates(score.mean_pitch()?)?;
            Ok(window[rng.random_range(0..3)])
        }
    }
}

/// Transposes the score and resynthesizes the audio with F0 scaled by
/// `2^(semitones / 12)`, then re-extracts the feature and durations.
pub fn apply_pitch_augmentation(pair: &TrainingPair, semitones: i32, config: &AudioConfig) -> Result<TrainingPair> {
    let score = pair.score.transpose(semitones)?;
    let audio = pitch_shift_audio(&pair.audio, semitones, config)?;
    TrainingPair::new(score, audio, config)
}

/// Shifts to materialize for one phrase: `copies` draws from the policy with
/// duplicates and zero removed (the original already covers zero), in
/// ascending order.
pub fn plan_shifts<R: Rng + ?Sized>(
    policy: &ShiftPolicy,
    score: &MusicScore,
    copies: usize,
    rng: &mut R,
) -> Result<Vec<i32>> {
    let mut shifts = Vec::with_capacity(copies);
    for _ in 0..copies {
        shifts.push(sample_shift(policy, score, rng)?);
    }
    shifts.retain(|&k| k != 0);
    shifts.sort_unstable();
    shifts.dedup();
    Ok(shifts)
}

/// Identifier of an augmented copy, e.g. `song_001__pa+1`.
pub fn augmented_id(phrase_id: &str, semitones: i32) -> String {
    format!("{phrase_id}__pa{semitones:+}")
}

/// Mix-up hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixupConfig {
    /// Beta(alpha, alpha) shape.
    pub alpha: f64,
    /// Fraction of the batch paired into mixtures.
    pub proportion: f64,
    /// Weight of the mixture loss against the original loss.
    pub w_mix: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            proportion: 0.15,
            w_mix: 0.1,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(AugmentError::Parameter(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.proportion) {
            return Err(AugmentError::Parameter(format!(
                "proportion must lie in [0, 1], got {}",
                self.proportion
            )));
        }
        if !(0.0..=1.0).contains(&self.w_mix) {
            return Err(AugmentError::Parameter(format!("w_mix must lie in [0, 1], got {}", self.w_mix)));
        }
        Ok(())
    }
}

/// One draw from Beta(alpha, alpha) as `g1 / (g1 + g2)` with
/// `g1, g2 ~ Gamma(alpha, 1)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(AugmentError::Parameter(format!("alpha must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| AugmentError::Parameter(e.to_string()))?;
    loop {
        let g1: f64 = gamma.sample(rng);
        let g2: f64 = gamma.sample(rng);
        let s = g1 + g2;
        // Both draws can underflow to zero for tiny alpha; redraw.
        if s > 0.0 {
            return Ok(g1 / s);
        }
    }
}

/// Frame-level hidden states with their valid (pre-padding) length.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSequence {
    pub values: Tensor2,
    pub length: usize,
}

impl HiddenSequence {
    pub fn new(values: Tensor2) -> Result<Self> {
        if !values.is_finite() {
            return Err(AugmentError::Parameter("hidden states must be finite".into()));
        }
        let length = values.rows;
        Ok(Self { values, length })
    }
}

/// Result of [`mix_hidden`]: the mixture over `T_max` rows and the two
/// source lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedHidden {
    pub hidden: HiddenSequence,
    pub source_lengths: (usize, usize),
}

/// `lambda * pad(h_i) + (1 - lambda) * pad(h_j)` with both sequences
/// zero-padded on the right to `T_max = max(T_i, T_j)`.
pub fn mix_hidden(h_i: &HiddenSequence, h_j: &HiddenSequence, lambda: f64) -> Result<MixedHidden> {
    if h_i.values.cols != h_j.values.cols {
        return Err(AugmentError::Shape(format!(
            "hidden widths differ: {} vs {}",
            h_i.values.cols, h_j.values.cols
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(AugmentError::Parameter(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let t_max = h_i.values.rows.max(h_j.values.rows);
    let a = h_i.values.pad_rows(t_max);
    let b = h_j.values.pad_rows(t_max);
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    Ok(MixedHidden {
        hidden: HiddenSequence {
            values: Tensor2::from_vec(t_max, a.cols, data),
            length: t_max,
        },
        source_lengths: (h_i.length, h_j.length),
    })
}

/// `round(proportion * batch_size)` disjoint pairs of distinct indices,
/// capped at `batch_size / 2`. A batch of fewer than two samples yields no
/// pairs and logs a warning.
pub fn select_mixup_pairs<R: Rng + ?Sized>(batch_size: usize, proportion: f64, rng: &mut R) -> Vec<(usize, usize)> {
    if proportion <= 0.0 {
        return Vec::new();
    }
    if batch_size < 2 {
        log::warn!("mix-up needs at least two samples, batch has {batch_size}");
        return Vec::new();
    }
    let n = ((proportion * batch_size as f64).round() as usize).min(batch_size / 2);
    if n == 0 {
        return Vec::new();
    }
    let picks = sample(rng, batch_size, 2 * n).into_vec();
    picks.chunks(2).map(|c| (c[0], c[1])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::estimate_f0;
    use crate::score_io::ScoreEvent;
    use crate::toy;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn score_at(pitch: u8) -> MusicScore {
        MusicScore {
            phrase_id: "s".into(),
            events: vec![ScoreEvent {
                phoneme: 1,
                pitch,
                onset: 0.0,
                offset: 0.4,
            }],
        }
    }

    #[test]
    fn p1_draws_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = ShiftPolicy::new(ShiftKind::P1);
        let s = score_at(60);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[(sample_shift(&policy, &s, &mut rng).unwrap() + 1) as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn p2_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let policy = ShiftPolicy::new(ShiftKind::P2);
        let s = score_at(60);
        let mut seen = [false; 5];
        for _ in 0..10_000 {
            let k = sample_shift(&policy, &s, &mut rng).unwrap();
            assert!(k.abs() <= 2);
            seen[(k + 2) as usize] = true;
        }
        assert!(seen.iter().all(|&v| v));
    }

    #[test]
    fn adaptive_points_toward_dataset_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let policy = ShiftPolicy::adaptive(65.0);
        for _ in 0..1000 {
            assert!((0..=2).contains(&sample_shift(&policy, &score_at(63), &mut rng).unwrap()));
            assert!((-2..=0).contains(&sample_shift(&policy, &score_at(67), &mut rng).unwrap()));
            assert!((-1..=1).contains(&sample_shift(&policy, &score_at(65), &mut rng).unwrap()));
        }
        let missing = ShiftPolicy::new(ShiftKind::PAdaptive);
        assert!(matches!(
            sample_shift(&missing, &score_at(63), &mut rng),
            Err(AugmentError::Config(_))
        ));
    }

    #[test]
    fn shift_sampling_is_reproducible() {
        let policy = ShiftPolicy::new(ShiftKind::P2);
        let s = score_at(60);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_shift(&policy, &s, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
    }

    fn toy_pair() -> TrainingPair {
        let cfg = AudioConfig::default();
        let corpus = toy::generate(&toy::ToyCorpusConfig {
            phrases: 1,
            ..toy::ToyCorpusConfig::default()
        });
        let (score, audio) = corpus.phrases[0].clone();
        TrainingPair::new(score, audio, &cfg).unwrap()
    }

    #[test]
    fn zero_shift_keeps_score() {
        let cfg = AudioConfig::default();
        let pair = toy_pair();
        let out = apply_pitch_augmentation(&pair, 0, &cfg).unwrap();
        assert_eq!(out.score, pair.score);
        assert_eq!(out.audio.len(), pair.audio.len());
        assert_eq!(out.feature.frames(), pair.feature.frames());
        out.check().unwrap();
    }

    #[test]
    fn unit_shift_moves_score_and_f0() {
        let cfg = AudioConfig::default();
        let pair = toy_pair();
        let out = apply_pitch_augmentation(&pair, 1, &cfg).unwrap();
        for (a, b) in pair.score.events.iter().zip(&out.score.events) {
            assert_eq!((a.phoneme, a.onset, a.offset), (b.phoneme, b.onset, b.offset));
            if a.is_rest() {
                assert_eq!(b.pitch, 0);
            } else {
                assert_eq!(b.pitch, a.pitch + 1);
            }
        }
        let f_in = estimate_f0(&pair.audio, 0.0125, 60.0, 800.0).unwrap();
        let f_out = estimate_f0(&out.audio, 0.0125, 60.0, 800.0).unwrap();
        let mut ratios: Vec<f64> = f_in
            .f0_hz
            .iter()
            .zip(&f_out.f0_hz)
            .filter(|(a, b)| **a > 0.0 && **b > 0.0)
            .map(|(a, b)| b / a)
            .collect();
        ratios.sort_by(f64::total_cmp);
        let median = ratios[ratios.len() / 2];
        assert!((1200.0 * (median / 1.059_463).log2()).abs() < 20.0, "ratio {median}");
        assert!((out.feature.frames() as i64 - pair.feature.frames() as i64).abs() <= 1);
    }

    #[test]
    fn symbolic_shifts_are_additive() {
        let s = toy_pair().score;
        let twice = s.transpose(1).unwrap().transpose(1).unwrap();
        assert_eq!(twice, s.transpose(2).unwrap());
    }

    #[test]
    fn shift_plans_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let policy = ShiftPolicy::new(ShiftKind::P1);
        let s = score_at(60);
        let mut total = 0;
        for _ in 0..1000 {
            let plan = plan_shifts(&policy, &s, 2, &mut rng).unwrap();
            assert!(plan.len() <= 2 && !plan.contains(&0));
            assert!(plan.windows(2).all(|w| w[0] < w[1]));
            total += plan.len();
        }
        assert!(total <= 2000 && total > 0);
    }

    #[test]
    fn augmented_names() {
        assert_eq!(augmented_id("song_001", 1), "song_001__pa+1");
        assert_eq!(augmented_id("song_001", -2), "song_001__pa-2");
    }

    #[test]
    fn lambda_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_lambda(0.5, &mut rng).unwrap()).collect();
        assert!(draws.iter().all(|l| (0.0..=1.0).contains(l)));
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n as f64;
        // Beta(a, a) variance a^2 / ((2a)^2 (2a + 1)).
        let a = 0.5f64;
        let expected = a * a / ((2.0 * a).powi(2) * (2.0 * a + 1.0));
        assert!((expected - 0.125).abs() < 1e-15);
        assert!((mean - 0.5).abs() < 0.01);
        assert!((var - expected).abs() < 0.005);
        assert!(matches!(sample_lambda(0.0, &mut rng), Err(AugmentError::Parameter(_))));
    }

    fn hs(rows: usize, cols: usize, seed: u64) -> HiddenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HiddenSequence::new(Tensor2::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
        ))
        .unwrap()
    }

    #[test]
    fn mix_endpoints_and_cancellation() {
        let a = hs(3, 4, 1);
        let b = hs(5, 4, 2);
        let m = mix_hidden(&a, &b, 1.0).unwrap();
        assert_eq!(m.hidden.values.rows, 5);
        assert_eq!(m.source_lengths, (3, 5));
        assert_eq!(m.hidden.values.head_rows(3), a.values);
        assert!(m.hidden.values.data[12..].iter().all(|&v| v == 0.0));
        let m0 = mix_hidden(&a, &b, 0.0).unwrap();
        assert_eq!(m0.hidden.values, b.values);
        let neg = HiddenSequence::new(b.values.map(|v| -v)).unwrap();
        let z = mix_hidden(&b, &neg, 0.5).unwrap();
        assert!(z.hidden.values.data.iter().all(|&v| v == 0.0));
        assert!(matches!(mix_hidden(&a, &hs(3, 5, 3), 0.5), Err(AugmentError::Shape(_))));
    }

    #[test]
    fn pair_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(select_mixup_pairs(20, 0.15, &mut rng).len(), 3);
        assert!(select_mixup_pairs(20, 0.0, &mut rng).is_empty());
        assert!(select_mixup_pairs(1, 0.5, &mut rng).is_empty());
        for _ in 0..10_000 {
            let b = rng.random_range(2..40);
            let pairs = select_mixup_pairs(b, 0.3, &mut rng);
            let mut used = std::collections::HashSet::new();
            for (i, j) in pairs {
                assert_ne!(i, j);
                assert!(i < b && j < b);
                assert!(used.insert(i) && used.insert(j));
            }
        }
    }

    proptest! {
        #[test]
        fn mix_is_symmetric(seed in 0u64..10_000, ti in 1usize..6, tj in 1usize..6, lambda in 0.0f64..=1.0) {
            let a = hs(ti, 3, seed);
            let b = hs(tj, 3, seed + 1);
            let m1 = mix_hidden(&a, &b, lambda).unwrap();
            let m2 = mix_hidden(&b, &a, 1.0 - lambda).unwrap();
            prop_assert!(m1.hidden.values.max_abs_diff(&m2.hidden.values) < 1e-12);
            for r in 0..ti.min(tj) {
                for c in 0..3 {
                    let (x, y) = (a.values.get(r, c), b.values.get(r, c));
                    let v = m1.hidden.values.get(r, c);
                    prop_assert!(v >= x.min(y) - 1e-12 && v <= x.max(y) + 1e-12);
                }
            }
        }
    }
}
