//! AdamW with global-norm clipping and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Linear warmup steps before the cosine decay begins.
    pub warmup: usize,
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            warmup: 0,
            total_steps: 1,
        }
    }
}

/// Learning rate at `step` (0-based): linear warmup, then cosine decay from
/// `peak` to zero at `total`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Optimizer state. Weight decay is decoupled and applies to matrices only
/// (rank ≥ 2); gains, biases and other vectors are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: ParamMap<f32>,
    v: ParamMap<f32>,
    step: usize,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamMap<f32>) -> Self {
        Self { config, m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        cosine_lr(self.step, c.total_steps, c.warmup, c.peak_lr)
    }

    /// One update. Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamMap<f32>, grads: &ParamMap<f32>) -> Result<f64> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::Shape("gradients do not match parameters".into()));
        }
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        let c = self.config;
        let norm = grads.global_norm();
        let clip = if norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for ((p, g), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
            let decay = if p.1.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let (pd, gd) = (p.1.data_mut(), g.1.data());
            for (((w, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi as f64 * clip;
                let mn = c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi;
                let vn = c.beta2 * *vi as f64 + (1.0 - c.beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
                let wf = *w as f64;
                *w = (wf - lr * (update + decay * wf)) as f32;
            }
        }
        Ok(norm)
    }
}
