use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LossWeights, Result, TrainError};
use crate::augment::TrainingPair;
use crate::nn::{snap_slice, Graph, Networks, Var, PITCH_VOCAB};
use crate::score_io::{FrameDurations, MusicScore};
use crate::tensor::Tensor2;

/// Mean absolute difference over the first `min(T_p, T_t)` frames.
pub fn masked_l1(pred: &Tensor2, target: &Tensor2) -> Result<f64> {
    if pred.cols != target.cols {
        return Err(TrainError::Shape(format!(
            "prediction width {} vs target width {}",
            pred.cols, target.cols
        )));
    }
    let n = pred.rows.min(target.rows) * pred.cols;
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for i in 0..n {
        sum += (pred.data[i] - target.data[i]).abs();
    }
    Ok(sum / n as f64)
}

/// Mean over frames of `-log softmax(logits)[label]`.
pub fn frame_cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<f64> {
    if logits.rows != labels.len() {
        return Err(TrainError::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols) {
        return Err(TrainError::Label(format!("label {bad} outside {} classes", logits.cols)));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let log_z = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += log_z - row[label];
    }
    Ok(total / labels.len() as f64)
}

/// `lambda * L1(y_mix, y_i) + (1 - lambda) * L1(y_mix, y_j)`, each term over
/// its own target's frames.
pub fn mixture_loss(y_mix: &Tensor2, y_i: &Tensor2, y_j: &Tensor2, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TrainError::Parameter(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(lambda * masked_l1(y_mix, y_i)? + (1.0 - lambda) * masked_l1(y_mix, y_j)?)
}

/// `(1 - w_mix) * l_ori + w_mix * l_mix`.
pub fn combined_svs_loss(l_ori: f64, l_mix: f64, w_mix: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&w_mix) {
        return Err(TrainError::Parameter(format!("w_mix must lie in [0, 1], got {w_mix}")));
    }
    Ok((1.0 - w_mix) * l_ori + w_mix * l_mix)
}

pub fn total_loss(l_svs: f64, l_si: f64, l_pd: f64, weights: &LossWeights) -> f64 {
    weights.w_svs * l_svs + weights.w_si * l_si + weights.w_pd * l_pd
}

/// Per-dimension mean of the training features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
}

impl NormStats {
    /// Frame-weighted mean over all rows of all features, rounded to 32-bit
    /// precision so that it survives a checkpoint unchanged.
    pub fn from_features<'a>(features: impl IntoIterator<Item = &'a Tensor2>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut frames = 0usize;
        for f in features {
            if sum.is_empty() {
                sum = vec![0.0; f.cols];
            } else if f.cols != sum.len() {
                return Err(TrainError::Shape(format!("feature width {} vs {}", f.cols, sum.len())));
            }
            for r in 0..f.rows {
                for (s, v) in sum.iter_mut().zip(f.row(r)) {
                    *s += v;
                }
            }
            frames += f.rows;
        }
        if frames == 0 {
            return Err(TrainError::Shape("no frames to compute statistics from".into()));
        }
        let mut mean: Vec<f64> = sum.iter().map(|s| s / frames as f64).collect();
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(TrainError::Shape("non-finite feature statistics".into()));
        }
        snap_slice(&mut mean);
        Ok(Self { mean })
    }

    fn check(&self, y: &Tensor2) -> Result<()> {
        if y.cols != self.mean.len() {
            return Err(TrainError::Shape(format!(
                "feature width {} vs statistics width {}",
                y.cols,
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, y: &Tensor2) -> Result<Tensor2> {
        self.check(y)?;
        let mut out = y.clone();
        for r in 0..out.rows {
            for (v, m) in out.row_mut(r).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, y: &Tensor2) -> Result<Tensor2> {
        self.check(y)?;
        let mut out = y.clone();
        for r in 0..out.rows {
            for (v, m) in out.row_mut(r).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(out)
    }
}

/// A training pair prepared for the loop: normalized target and
/// frame-expanded labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub score: MusicScore,
    pub durations: FrameDurations,
    pub target: Tensor2,
    pub phoneme_labels: Vec<usize>,
    pub pitch_labels: Vec<usize>,
}

impl Sample {
    pub fn new(score: MusicScore, durations: FrameDurations, target: Tensor2) -> Result<Self> {
        if durations.frames_per_event.len() != score.events.len() {
            return Err(TrainError::Shape(format!(
                "{} durations for {} events",
                durations.frames_per_event.len(),
                score.events.len()
            )));
        }
        if durations.total_frames != target.rows {
            return Err(TrainError::Shape(format!(
                "durations cover {} frames, target has {}",
                durations.total_frames, target.rows
            )));
        }
        let phoneme_labels = durations.expand(&score.phonemes());
        let pitch_labels = durations.expand(&score.pitches());
        if let Some(&p) = pitch_labels.iter().find(|&&p| p >= PITCH_VOCAB) {
            return Err(TrainError::Label(format!("pitch {p} outside 0..{PITCH_VOCAB}")));
        }
        Ok(Self {
            id: score.phrase_id.clone(),
            score,
            durations,
            target,
            phoneme_labels,
            pitch_labels,
        })
    }

    pub fn from_pair(pair: &TrainingPair, stats: &NormStats) -> Result<Self> {
        Self::new(pair.score.clone(), pair.durations.clone(), stats.normalize(&pair.feature.mel)?)
    }

    pub fn frames(&self) -> usize {
        self.target.rows
    }
}

/// Average of the phoneme-branch and pitch-branch cross-entropies of the
/// predictor applied to `y`, against `sample`'s labels over `frames` rows.
pub(crate) fn branch_ce(g: &mut Graph, ph: Var, pi: Var, sample: &Sample, frames: usize) -> Result<Var> {
    let rows = g.value(ph).rows;
    if frames > rows || frames > sample.phoneme_labels.len() {
        return Err(TrainError::Label(format!(
            "{frames} label frames requested from {rows} predicted rows"
        )));
    }
    let vocab = g.value(ph).cols;
    if let Some(&bad) = sample.phoneme_labels.iter().find(|&&l| l >= vocab) {
        return Err(TrainError::Label(format!("phoneme {bad} outside {vocab} classes")));
    }
    let (ph, pi) = if frames == rows {
        (ph, pi)
    } else {
        (g.slice_rows(ph, 0, frames), g.slice_rows(pi, 0, frames))
    };
    let a = g.cross_entropy(ph, &sample.phoneme_labels[..frames]);
    let b = g.cross_entropy(pi, &sample.pitch_labels[..frames]);
    Ok(g.linear_comb(&[(a, 0.5), (b, 0.5)]))
}

/// Evaluation-mode `(L_si, L_pd)` over a batch: the predictor applied to the
/// ground-truth features and to the acoustic model's predictions.
pub fn cycle_losses(batch: &[Sample], nets: &Networks) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(TrainError::Shape("empty batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut si, mut pd) = (0.0, 0.0);
    for s in batch {
        let mut g = Graph::new(&nets.store);
        let y = g.constant(s.target.clone());
        let (ph, pi) = nets.predictor.forward(&mut g, y, false, &mut rng)?;
        let l = branch_ce(&mut g, ph, pi, s, s.frames())?;
        si += g.value(l).item();
        let (y_hat, _) = nets.acoustic.forward(&mut g, &s.score, &s.durations, false, &mut rng)?;
        let (ph, pi) = nets.predictor.forward(&mut g, y_hat, false, &mut rng)?;
        let l = branch_ce(&mut g, ph, pi, s, s.frames())?;
        pd += g.value(l).item();
    }
    let n = batch.len() as f64;
    Ok((si / n, pd / n))
}
