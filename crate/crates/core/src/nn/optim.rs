//! Adam with bias correction and a cosine learning-rate schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, Moments>,
}

impl OptimState {
    pub fn new(config: AdamConfig) -> Self {
        OptimState {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over `grads`. Gradients for frozen parameters are ignored;
    /// a non-finite gradient aborts before anything is written.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f32>)]) -> Result<()> {
        self.step_with_lr(store, grads, self.config.lr)
    }

    pub fn step_with_lr(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Vec<f32>)],
        lr: f32,
    ) -> Result<()> {
        for (id, g) in grads {
            let p = store.get(*id);
            if g.len() != p.tensor.len() {
                return Err(Error::Config(format!(
                    "gradient for {} has {} elements, parameter has {}",
                    p.name,
                    g.len(),
                    p.tensor.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            if !store.get(*id).trainable {
                continue;
            }
            let n = g.len();
            let mom = self.moments.entry(*id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let data = store.tensor_mut(*id).data_mut();
            for i in 0..n {
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g[i];
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f32, lr_min: f32) -> f32 {
    if total_steps == 0 {
        return lr_max;
    }
    let t = (step.min(total_steps) as f32) / total_steps as f32;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f32::consts::PI * t).cos())
}

/// Sums gradients that refer to the same parameter (a parameter used by
/// several graph nodes yields several entries).
pub fn merge_grads<'g>(grads: impl Iterator<Item = (ParamId, &'g [f32])>) -> Vec<(ParamId, Vec<f32>)> {
    let mut merged: Vec<(ParamId, Vec<f32>)> = Vec::new();
    let mut index: HashMap<ParamId, usize> = HashMap::new();
    for (id, g) in grads {
        match index.get(&id) {
            Some(&i) => {
                for (a, b) in merged[i].1.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                index.insert(id, merged.len());
                merged.push((id, g.to_vec()));
            }
        }
    }
    merged
}
