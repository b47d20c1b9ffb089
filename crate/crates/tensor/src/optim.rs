//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::BTreeMap;

use log::warn;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let t = (step.min(total) as f64) / total as f64;
    lr_min + (lr_max - lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Optimizer state: first/second moments per parameter and the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

const MOMENT_PREFIX_M: &str = "optim.m.";
const MOMENT_PREFIX_V: &str = "optim.v.";
const STEP_NAME: &str = "optim.step";

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, ..Default::default() }
    }

    /// One update of every trainable entry in `params` that has a gradient.
    ///
    /// Entries without a gradient are left untouched and returned; when
    /// `expect_missing` is false each one is logged.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        expect_missing: impl Fn(&str) -> bool,
    ) -> Result<Vec<String>> {
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let names: Vec<String> = params.iter().filter(|(_, e)| e.trainable).map(|(n, _)| n.to_string()).collect();
        let mut skipped = Vec::new();
        for name in names {
            let Some(g) = grads.get(&name) else {
                if !expect_missing(&name) {
                    warn!("no gradient for trainable parameter `{name}`; skipped");
                }
                skipped.push(name);
                continue;
            };
            let p = params.tensor_mut(&name)?;
            let n = p.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let pd = p.data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pd[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * pd[i]);
            }
        }
        Ok(skipped)
    }

    /// Export moments and step count as non-trainable store entries so they
    /// travel inside a checkpoint.
    pub fn export_into(&self, store: &mut ParamStore) {
        for (name, m) in &self.m {
            store.set(format!("{MOMENT_PREFIX_M}{name}"), "optimizer", Tensor::new([m.len()], m.clone()).unwrap(), false);
        }
        for (name, v) in &self.v {
            store.set(format!("{MOMENT_PREFIX_V}{name}"), "optimizer", Tensor::new([v.len()], v.clone()).unwrap(), false);
        }
        store.set(STEP_NAME, "optimizer", Tensor::scalar(self.step as f64), false);
    }

    /// Inverse of [`AdamW::export_into`]; removes the optimizer entries from `store`.
    pub fn import_from(config: AdamWConfig, store: &mut ParamStore) -> Self {
        let mut opt = Self::new(config);
        let names: Vec<String> = store.names().filter(|n| n.starts_with("optim.")).map(str::to_string).collect();
        for name in names {
            let entry = store.remove(&name).unwrap();
            if let Some(p) = name.strip_prefix(MOMENT_PREFIX_M) {
                opt.m.insert(p.to_string(), entry.tensor.into_data());
            } else if let Some(p) = name.strip_prefix(MOMENT_PREFIX_V) {
                opt.v.insert(p.to_string(), entry.tensor.into_data());
            } else if name == STEP_NAME {
                opt.step = entry.tensor.data()[0] as u64;
            }
        }
        opt
    }
}
