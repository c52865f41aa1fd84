//! AdamW, step decay and global-norm clipping.

use std::collections::BTreeMap;
use std::path::Path;

use floodfuse_autograd::Float;
use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{CheckpointMeta, Component, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Decoupled-weight-decay Adam over named tensors.
#[derive(Debug, Clone)]
pub struct AdamW<F: Float> {
    pub cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Float> AdamW<F> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter named in `grads`. Names that are not
    /// trainable in `store` are rejected, so frozen weights cannot move.
    /// Returns the names that were updated.
    pub fn step(&mut self, store: &mut ParameterStore<F>, grads: &BTreeMap<String, ArrayD<F>>, lr: f64) -> Result<Vec<String>> {
        for name in grads.keys() {
            match store.get(name) {
                Some(e) if e.trainable => {}
                Some(_) => return Err(Error::Config(format!("optimizer received frozen parameter {name}"))),
                None => return Err(Error::Config(format!("optimizer received unknown parameter {name}"))),
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one, eps) = (F::one(), F::of(c.eps));
        let decay = F::of(1.0 - lr * c.weight_decay);
        let step_size = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let p = store.value_mut(name);
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient for {name} is {:?}, parameter {:?}", g.shape(), p.shape())));
            }
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let denom = (*v * inv_bc2).sqrt() + eps;
                *p = *p * decay - step_size * *m / denom;
            });
        }
        Ok(grads.keys().cloned().collect())
    }

    /// Moments as a checkpointable store (`m.<name>`, `v.<name>`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = ParameterStore::<F>::new();
        for (k, a) in &self.m {
            s.insert_param(&format!("m.{k}"), a.clone(), false, Component::Decoder);
        }
        for (k, a) in &self.v {
            s.insert_param(&format!("v.{k}"), a.clone(), false, Component::Decoder);
        }
        let meta = CheckpointMeta {
            step: self.step,
            config: serde_json::to_value(self.cfg).unwrap_or_default(),
            extra: serde_json::Value::Null,
        };
        s.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (s, manifest) = ParameterStore::<F>::load(path)?;
        let cfg: AdamWConfig =
            serde_json::from_value(manifest.config).map_err(|e| Error::format(path, format!("optimizer config: {e}")))?;
        let mut opt = Self::new(cfg);
        opt.step = manifest.step;
        for (name, e) in s.params() {
            let value = e.value.as_ref().clone();
            if let Some(k) = name.strip_prefix("m.") {
                opt.m.insert(k.to_string(), value);
            } else if let Some(k) = name.strip_prefix("v.") {
                opt.v.insert(k.to_string(), value);
            }
        }
        Ok(opt)
    }
}

/// `lr · gamma^⌊epoch / step_size⌋` for a zero-based epoch index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLr {
    pub base_lr: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl StepLr {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.gamma.powi((epoch / self.step_size.max(1)) as i32)
    }
}

pub fn global_norm<F: Float>(grads: &BTreeMap<String, ArrayD<F>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<F: Float>(grads: &mut BTreeMap<String, ArrayD<F>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm.is_finite() && norm > max_norm {
        let s = F::of(max_norm / (norm + 1e-6));
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}
