//! AdamW with global-norm clipping, and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::nn::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Clip the global gradient norm to this value; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl AdamWConfig {
    pub fn with_decay(weight_decay: f64, clip_norm: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            clip_norm: Some(clip_norm),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub post_clip_norm: f64,
    pub clipped: bool,
}

/// Adam moments with weight decay applied directly to the weights rather
/// than folded into the gradient.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let m = store
            .ids()
            .map(|id| vec![0.0; store.get(id).len()])
            .collect::<Vec<_>>();
        Self {
            cfg,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads[i]` belongs to the i-th parameter of the
    /// store; frozen parameters and missing gradients are skipped.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<f64>>],
        lr: f64,
    ) -> StepInfo {
        let ids: Vec<ParamId> = store.ids().collect();
        let sq: f64 = ids
            .iter()
            .zip(grads)
            .filter(|(id, _)| store.is_trainable(**id))
            .filter_map(|(_, g)| g.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum();
        let norm = sq.sqrt();
        let (factor, clipped) = match self.cfg.clip_norm {
            Some(c) if norm > c => (c / norm, true),
            _ => (1.0, false),
        };
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, id) in ids.iter().enumerate() {
            if !store.is_trainable(*id) {
                continue;
            }
            let Some(g) = grads[i].as_ref() else { continue };
            let decay = store.name(*id).ends_with(".w");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.get_mut(*id).data_mut();
            for j in 0..w.len() {
                let gj = g[j] * factor;
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * gj;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                if decay {
                    w[j] -= lr * self.cfg.weight_decay * w[j];
                }
                w[j] -= lr * mh / (vh.sqrt() + self.cfg.epsilon);
            }
        }
        StepInfo {
            grad_norm: norm,
            post_clip_norm: norm * factor,
            clipped,
        }
    }
}

/// Linear warmup from `base_lr` to `peak_lr`, then cosine decay back to
/// `base_lr` at `total_epochs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.peak_lr >= self.base_lr) {
            return Err(config("schedule needs 0 < base_lr <= peak_lr"));
        }
        if !(self.warmup_epochs >= 0.0 && self.total_epochs >= self.warmup_epochs) {
            return Err(config("schedule needs 0 <= warmup_epochs <= total_epochs"));
        }
        Ok(())
    }
}

/// Learning rate at a (fractional) epoch position.
pub fn lr_at(epoch: f64, s: &Schedule) -> f64 {
    let t = epoch.clamp(0.0, s.total_epochs);
    if t < s.warmup_epochs {
        return s.base_lr + (s.peak_lr - s.base_lr) * t / s.warmup_epochs;
    }
    let span = s.total_epochs - s.warmup_epochs;
    if span <= 0.0 {
        return s.peak_lr;
    }
    let progress = (t - s.warmup_epochs) / span;
    s.base_lr + 0.5 * (s.peak_lr - s.base_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}
