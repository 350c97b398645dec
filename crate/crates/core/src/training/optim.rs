//! AdamW with decoupled weight decay, the multi-step learning-rate
//! schedule, gradient accumulation and global-norm clipping.
//!
//! Weight decay applies to weight matrices only; biases, normalization
//! gains, and embedding-like tables (names ending in `.bias` / `.gain` or
//! containing `embed`) are exempt.

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub milestones: Vec<u64>,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            milestones: vec![5000, 150_000, 300_000],
            gamma: 0.5,
        }
    }
}

/// `lr0 * gamma^(number of milestones <= step)`.
pub fn lr_at(step: u64, sched: &LrSchedule, lr0: f64) -> f64 {
    let hits = sched.milestones.iter().filter(|&&m| m <= step).count() as i32;
    lr0 * sched.gamma.powi(hits)
}

/// Whether a parameter is exempt from weight decay.
pub fn decay_exempt(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gain") || name.contains("embed")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            betas: (0.9, 0.96),
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

/// AdamW state: first/second-moment estimates per parameter plus the shared
/// step counter.
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub t: u64,
    pub m: IndexMap<String, Array2<f64>>,
    pub v: IndexMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One decoupled-decay update over every parameter that has a gradient.
    /// Errors on non-finite gradients, naming the parameter.
    pub fn step<F>(
        &mut self,
        lr: f64,
        grads: &IndexMap<String, Array2<f64>>,
        visit_mut: F,
    ) -> Result<()>
    where
        F: FnOnce(&mut dyn FnMut(String, &mut Array2<f64>)),
    {
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
        }
        self.t += 1;
        let (b1, b2) = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let eps = self.cfg.eps;
        let wd = self.cfg.weight_decay;

        let mut apply = |name: String, param: &mut Array2<f64>| {
            let Some(g) = grads.get(&name) else {
                return;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(param.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(param.dim()));
            let decay = if decay_exempt(&name) { 0.0 } else { wd };
            for ((p, g), (m, v)) in param
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * *p);
            }
        };
        visit_mut(&mut apply);
        Ok(())
    }

    /// Moment tensors for checkpointing, prefixed `opt.m.` / `opt.v.`.
    pub fn export_state(&self) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        for (name, m) in &self.m {
            out.push((format!("opt.m.{name}"), m.clone()));
        }
        for (name, v) in &self.v {
            out.push((format!("opt.v.{name}"), v.clone()));
        }
        out
    }

    pub fn import_state(&mut self, t: u64, tensors: &IndexMap<String, Array2<f64>>) {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (name, tensor) in tensors {
            if let Some(stripped) = name.strip_prefix("opt.m.") {
                self.m.insert(stripped.to_string(), tensor.clone());
            } else if let Some(stripped) = name.strip_prefix("opt.v.") {
                self.v.insert(stripped.to_string(), tensor.clone());
            }
        }
    }
}

/// Sums micro-batch gradients and divides by the count on `mean()`.
#[derive(Default)]
pub struct GradAccumulator {
    sums: IndexMap<String, Array2<f64>>,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, named: Vec<(String, Array2<f64>)>) {
        for (name, g) in named {
            match self.sums.get_mut(&name) {
                Some(sum) => *sum += &g,
                None => {
                    self.sums.insert(name, g);
                }
            }
        }
        self.count += 1;
    }

    /// Mean-reduced gradients; resets the accumulator.
    pub fn mean(&mut self) -> IndexMap<String, Array2<f64>> {
        let n = self.count.max(1) as f64;
        let mut out = IndexMap::new();
        std::mem::swap(&mut out, &mut self.sums);
        self.count = 0;
        for (_, g) in out.iter_mut() {
            *g /= n;
        }
        out
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. `max_norm <= 0` disables clipping.
pub fn clip_global_norm(grads: &mut IndexMap<String, Array2<f64>>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}
