//! End-to-end checks through the public API: toy phrases go through label
//! I/O, feature extraction and pitch augmentation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svs_aug::augment::{apply_pitch_augmentation, plan_shifts, ShiftKind, ShiftPolicy, TrainingPair};
use svs_aug::dsp::{load_audio, save_audio, AudioConfig};
use svs_aug::score_io::{parse_phrase_label, serialize_phrase_label, VocabMode};
use svs_aug::toy::{generate, ToyCorpusConfig};

fn corpus(phrases: usize) -> svs_aug::toy::ToyCorpus {
    generate(&ToyCorpusConfig {
        phrases,
        seed: 7,
        ..ToyCorpusConfig::default()
    })
}

#[test]
fn labels_round_trip() {
    let toy = corpus(4);
    for (score, _) in &toy.phrases {
        let text = serialize_phrase_label(score, &toy.vocab).unwrap();
        let back = parse_phrase_label(&score.phrase_id, &text, VocabMode::Strict(&toy.vocab)).unwrap();
        assert_eq!(&back, score);
    }
}

#[test]
fn wav_round_trip_within_quantization() {
    let toy = corpus(1);
    let (_, audio) = &toy.phrases[0];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    save_audio(&path, audio).unwrap();
    let back = load_audio(&path, audio.sample_rate).unwrap();
    assert_eq!(back.samples.len(), audio.samples.len());
    let worst = audio
        .samples
        .iter()
        .zip(&back.samples)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1.0 / 32767.0, "worst {worst}");
}

#[test]
fn shifted_pairs_keep_timing() {
    let config = AudioConfig::default();
    let toy = corpus(2);
    for (score, audio) in toy.phrases {
        let pair = TrainingPair::new(score, audio, &config).unwrap();
        pair.check().unwrap();
        for k in [-2, 1] {
            let shifted = apply_pitch_augmentation(&pair, k, &config).unwrap();
            shifted.check().unwrap();
            assert_eq!(shifted.feature.frames(), pair.feature.frames());
            assert_eq!(shifted.durations, pair.durations);
            for (a, b) in pair.score.events.iter().zip(&shifted.score.events) {
                assert_eq!(a.phoneme, b.phoneme);
                if a.pitch == 0 {
                    assert_eq!(b.pitch, 0);
                } else {
                    assert_eq!(b.pitch as i32, a.pitch as i32 + k);
                }
            }
        }
    }
}

#[test]
fn shift_plans_are_sorted_unique_and_nonzero() {
    let toy = corpus(8);
    let mean = svs_aug::augment::dataset_mean_pitch(toy.phrases.iter().map(|(s, _)| s)).unwrap();
    let policies = [
        (ShiftPolicy::new(ShiftKind::P1), 1),
        (ShiftPolicy::new(ShiftKind::P2), 2),
        (ShiftPolicy::adaptive(mean), 2),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (policy, bound) in &policies {
        for (score, _) in &toy.phrases {
            let plan = plan_shifts(policy, score, 4, &mut rng).unwrap();
            assert!(plan.len() <= 4);
            assert!(plan.windows(2).all(|w| w[0] < w[1]));
            assert!(plan.iter().all(|&k| k != 0 && k.abs() <= *bound));
        }
    }
}
