use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::nn::{snap_slice, Gradients, ParamStore};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.clip_norm >= 0.0) {
            return bad("eps must be positive and clip_norm non-negative".into());
        }
        Ok(())
    }
}

/// Noam schedule `base_lr * sqrt(warmup) * min(step^-0.5, step * warmup^-1.5)`:
/// a linear ramp to `base_lr` at `step == warmup`, then inverse-square-root
/// decay. The usual `d_model^-0.5` factor is folded into `base_lr`, so
/// `d_model` only has to be valid.
pub fn noam_lr(step: u64, base_lr: f64, warmup: u64, d_model: usize) -> Result<f64> {
    if step == 0 {
        return Err(TrainError::Parameter("the schedule starts at step 1".into()));
    }
    if warmup == 0 || d_model == 0 {
        return Err(TrainError::Parameter("warmup and d_model must be positive".into()));
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(base_lr * w.sqrt() * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Adam moments and step counter. Moments are kept at 32-bit precision, like
/// the parameters, so that a checkpoint captures the state exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor2> = store.iter().map(|(_, t)| Tensor2::zeros(t.rows, t.cols)).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Clips `grads` to the configured global norm and applies one update at
    /// learning rate `lr`. Returns the pre-clip gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, config: &OptimizerConfig) -> f64 {
        let norm = grads.norm();
        let scale = if config.clip_norm > 0.0 && norm > config.clip_norm {
            config.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.value_mut(id);
            let g = grads.get(id);
            for i in 0..p.data.len() {
                let gi = g.map_or(0.0, |g| if scale == 1.0 { g.data[i] } else { g.data[i] * scale });
                m.data[i] = config.beta1 * m.data[i] + (1.0 - config.beta1) * gi;
                v.data[i] = config.beta2 * v.data[i] + (1.0 - config.beta2) * gi * gi;
                let m_hat = m.data[i] / c1;
                let v_hat = v.data[i] / c2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
            }
            snap_slice(&mut p.data);
            snap_slice(&mut m.data);
            snap_slice(&mut v.data);
        }
        norm
    }
}
