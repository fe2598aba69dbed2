//! Objective metrics between reference and synthesized singing: mel-cepstral
//! distortion and four F0 measures.

use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{estimate_f0_with, hz_to_midi, mel_cepstra, AcousticFeature, AudioBuffer, AudioConfig, DspError, F0Track};
use crate::tensor::Tensor2;

/// Cepstral coefficients c1..c24 enter the distortion.
pub const MCD_ORDER: usize = 24;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Mean over frames of `(10 / ln 10) * sqrt(2 * sum_d (c_d - c'_d)^2)`.
pub fn mcd(reference: &Tensor2, synthesized: &Tensor2) -> Result<f64> {
    if reference.shape() != synthesized.shape() {
        return Err(MetricsError::Shape(format!(
            "cepstra {:?} vs {:?}",
            reference.shape(),
            synthesized.shape()
        )));
    }
    if reference.rows == 0 {
        return Err(MetricsError::Empty);
    }
    let k = 10.0 / LN_10;
    let total: f64 = (0..reference.rows)
        .map(|t| {
            let sq: f64 = reference
                .row(t)
                .iter()
                .zip(synthesized.row(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            k * (2.0 * sq).sqrt()
        })
        .sum();
    Ok(total / reference.rows as f64)
}

/// F0 measures of one pair. The three voiced-frame metrics are `None` when
/// no frame is voiced in both tracks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F0Metrics {
    /// RMSE of natural-log F0, in log-Hz.
    pub lf0_rmse: Option<f64>,
    /// Pearson correlation of F0 in Hz.
    pub f0_corr: Option<f64>,
    /// Percent of frames quantizing to the same MIDI note.
    pub st_acc: Option<f64>,
    /// Percent of frames whose voicing decisions disagree.
    pub vuv_err: f64,
    pub n_frames_voiced_both: usize,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        // Correlation is undefined for a flat track; identical tracks still
        // count as perfectly correlated.
        return (x == y).then_some(1.0);
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn f0_metrics(reference: &F0Track, synthesized: &F0Track) -> Result<F0Metrics> {
    let (r, s) = (&reference.f0_hz, &synthesized.f0_hz);
    if r.len() != s.len() {
        return Err(MetricsError::Shape(format!("{} vs {} F0 frames", r.len(), s.len())));
    }
    if r.is_empty() {
        return Err(MetricsError::Empty);
    }
    let disagree = r.iter().zip(s).filter(|(a, b)| (**a > 0.0) != (**b > 0.0)).count();
    let vuv_err = 100.0 * disagree as f64 / r.len() as f64;
    let (vr, vs): (Vec<f64>, Vec<f64>) = r.iter().zip(s).filter(|(a, b)| **a > 0.0 && **b > 0.0).unzip();
    let n = vr.len();
    if n == 0 {
        return Ok(F0Metrics {
            lf0_rmse: None,
            f0_corr: None,
            st_acc: None,
            vuv_err,
            n_frames_voiced_both: 0,
        });
    }
    let mse = vr.iter().zip(&vs).map(|(a, b)| (a.ln() - b.ln()).powi(2)).sum::<f64>() / n as f64;
    let mut same = 0usize;
    for (a, b) in vr.iter().zip(&vs) {
        if hz_to_midi(*a)?.round() == hz_to_midi(*b)?.round() {
            same += 1;
        }
    }
    Ok(F0Metrics {
        lf0_rmse: Some(mse.sqrt()),
        f0_corr: pearson(&vr, &vs),
        st_acc: Some(100.0 * same as f64 / n as f64),
        vuv_err,
        n_frames_voiced_both: n,
    })
}

/// Reference and synthesized renditions of one phrase, aligned frame by
/// frame through shared durations.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub id: String,
    pub ref_audio: AudioBuffer,
    pub syn_audio: AudioBuffer,
    pub ref_feature: AcousticFeature,
    pub syn_feature: AcousticFeature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mcd: f64,
    pub lf0_rmse: Option<f64>,
    pub f0_corr: Option<f64>,
    pub st_acc: Option<f64>,
    pub vuv_err: f64,
    pub n_frames_voiced_both: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub id: String,
    pub n_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Contents of `eval_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: MetricReport,
    pub pairs: Vec<PairReport>,
}

fn evaluate_pair(pair: &EvalPair, config: &AudioConfig) -> Result<(usize, MetricReport)> {
    let track = |a: &AudioBuffer| {
        estimate_f0_with(
            a,
            config.frame_shift,
            config.f0_min,
            config.f0_max,
            config.voicing_clarity,
            config.voicing_rms,
        )
    };
    let (mut f_ref, mut f_syn) = (track(&pair.ref_audio)?, track(&pair.syn_audio)?);
    let t = pair.ref_feature.frames().min(pair.syn_feature.frames());
    let tf = f_ref.len().min(f_syn.len()).min(t);
    f_ref.truncate(tf);
    f_syn.truncate(tf);
    let c_ref = mel_cepstra(&pair.ref_feature, MCD_ORDER)?.head_rows(t);
    let c_syn = mel_cepstra(&pair.syn_feature, MCD_ORDER)?.head_rows(t);
    let f0 = f0_metrics(&f_ref, &f_syn)?;
    Ok((
        t,
        MetricReport {
            mcd: mcd(&c_ref, &c_syn)?,
            lf0_rmse: f0.lf0_rmse,
            f0_corr: f0.f0_corr,
            st_acc: f0.st_acc,
            vuv_err: f0.vuv_err,
            n_frames_voiced_both: f0.n_frames_voiced_both,
        },
    ))
}

/// Frame-weighted corpus summary: MCD and VUV error weighted by frames,
/// the voiced metrics by mutually voiced frames (log-F0 RMSE pooled over
/// squared errors). Failing pairs are reported and left out of the summary.
pub fn aggregate(reports: &[(usize, MetricReport)]) -> Result<MetricReport> {
    let frames: usize = reports.iter().map(|(t, _)| t).sum();
    if frames == 0 {
        return Err(MetricsError::Empty);
    }
    let weighted = |f: &dyn Fn(&MetricReport) -> f64| {
        reports.iter().map(|(t, r)| f(r) * *t as f64).sum::<f64>() / frames as f64
    };
    let voiced_mean = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
        let (mut sum, mut n) = (0.0, 0usize);
        for (_, r) in reports {
            if let Some(v) = f(r) {
                sum += v * r.n_frames_voiced_both as f64;
                n += r.n_frames_voiced_both;
            }
        }
        (n > 0).then(|| sum / n as f64)
    };
    Ok(MetricReport {
        mcd: weighted(&|r| r.mcd),
        lf0_rmse: voiced_mean(&|r| r.lf0_rmse.map(|v| v * v)).map(f64::sqrt),
        f0_corr: voiced_mean(&|r| r.f0_corr),
        st_acc: voiced_mean(&|r| r.st_acc),
        vuv_err: weighted(&|r| r.vuv_err),
        n_frames_voiced_both: reports.iter().map(|(_, r)| r.n_frames_voiced_both).sum(),
    })
}

pub fn evaluate(pairs: &[EvalPair], config: &AudioConfig) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut ok = Vec::new();
    let mut per_pair = Vec::with_capacity(pairs.len());
    for p in pairs {
        match evaluate_pair(p, config) {
            Ok((t, r)) => {
                per_pair.push(PairReport {
                    id: p.id.clone(),
                    n_frames: t,
                    metrics: Some(r.clone()),
                    error: None,
                });
                ok.push((t, r));
            }
            Err(e) => {
                log::warn!("evaluation of {} failed: {e}", p.id);
                per_pair.push(PairReport {
                    id: p.id.clone(),
                    n_frames: 0,
                    metrics: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(EvalReport {
        summary: aggregate(&ok)?,
        pairs: per_pair,
    })
}
