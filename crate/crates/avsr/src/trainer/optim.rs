//! Adam with a transformer-style warmup/decay schedule and global-norm
//! gradient clipping.

use std::collections::BTreeMap;

use crate::autodiff::TensorD;
use crate::error::{AvsrError, Result};
use crate::model::ParameterTree;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub peak_lr: f64,
}

/// `lr(step) = peak_lr * min(step/warmup, sqrt(warmup/step))`, 1-based.
pub fn lr_at(schedule: &Schedule, step: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = schedule.warmup_steps.max(1) as f64;
    schedule.peak_lr * (s / w).min((w / s).sqrt())
}

/// First/second moment accumulators mirroring the parameter tree.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, TensorD>,
    pub v: BTreeMap<String, TensorD>,
}

impl AdamState {
    pub fn for_tree(tree: &ParameterTree) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in tree.iter() {
            m.insert(name.clone(), TensorD::zeros(t.raw_dim()));
            v.insert(name.clone(), TensorD::zeros(t.raw_dim()));
        }
        AdamState { m, v }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, TensorD>, max_norm: f64) -> f64 {
    let sumsq: f64 = grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = sumsq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// One Adam update (with bias correction) at the scheduled learning rate.
/// A non-finite gradient aborts with a divergence error before any state is
/// touched, so the caller's checkpoint stays intact.
pub fn optimizer_step(
    tree: &mut ParameterTree,
    grads: &BTreeMap<String, TensorD>,
    state: &mut AdamState,
    acfg: &AdamConfig,
    schedule: &Schedule,
    step: u64,
) -> Result<()> {
    for g in grads.values() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(AvsrError::Divergence(step));
        }
    }
    let lr = lr_at(schedule, step);
    let t = step.max(1) as i32;
    let bc1 = 1.0 - acfg.beta1.powi(t);
    let bc2 = 1.0 - acfg.beta2.powi(t);
    for (name, g) in grads {
        let Some(p) = tree.get_mut(name) else { continue };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| TensorD::zeros(g.raw_dim()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| TensorD::zeros(g.raw_dim()));
        m.zip_mut_with(g, |mi, &gi| *mi = acfg.beta1 * *mi + (1.0 - acfg.beta1) * gi);
        v.zip_mut_with(g, |vi, &gi| *vi = acfg.beta2 * *vi + (1.0 - acfg.beta2) * gi * gi);
        ndarray::Zip::from(p)
            .and(&*m)
            .and(&*v)
            .for_each(|pi, &mi, &vi| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + acfg.eps);
            });
    }
    Ok(())
}
