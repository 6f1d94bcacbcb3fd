//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::BTreeMap;

use super::scalar::Scalar;
use super::store::ParamStore;
use crate::error::{DmError, Result};

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Total steps of the cosine schedule; the rate reaches `lr_floor` here
    /// and stays there.
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            lr_floor: 0.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: 1000,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter Adam moments plus the shared step counter.
pub struct OptimizerState {
    cfg: AdamWConfig,
    step: usize,
    moments: BTreeMap<String, Moments>,
}

/// lr_t = floor + 0.5 (lr - floor) (1 + cos(pi t / T)), clamped to the floor
/// once t >= T.
pub fn cosine_lr(cfg: &AdamWConfig, step: usize) -> f64 {
    if cfg.total_steps == 0 || step >= cfg.total_steps {
        return cfg.lr_floor;
    }
    let progress = step as f64 / cfg.total_steps as f64;
    cfg.lr_floor + 0.5 * (cfg.lr - cfg.lr_floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

impl OptimizerState {
    pub fn new(cfg: AdamWConfig) -> Self {
        OptimizerState { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate that the next [`OptimizerState::step`] call will use.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(&self.cfg, self.step)
    }

    /// Apply one AdamW update to every parameter accepted by `select`,
    /// then clear all gradients (selected or not) and advance the counter.
    ///
    /// Moment math runs in f64 regardless of the store type so the update
    /// rule is identical in both compute modes.
    pub fn step<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        select: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            if !select(name) {
                continue;
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(DmError::NonFinite(format!("gradient of {name}")));
            }
            let mom = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments { m: vec![0.0; p.data.len()], v: vec![0.0; p.data.len()] });
            let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
            for (((w_ref, g_ref), m_ref), v_ref) in
                p.data.iter_mut().zip(&p.grad).zip(&mut mom.m).zip(&mut mom.v)
            {
                let g = g_ref.to_f64();
                *m_ref = b1 * *m_ref + (1.0 - b1) * g;
                *v_ref = b2 * *v_ref + (1.0 - b2) * g * g;
                let m_hat = *m_ref / bc1;
                let v_hat = *v_ref / bc2;
                let mut w = w_ref.to_f64();
                w -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * w);
                *w_ref = T::from_f64(w);
            }
        }
        store.zero_grads();
        self.step += 1;
        Ok(())
    }
}
