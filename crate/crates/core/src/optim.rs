//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers, one per store entry, allocated on first use.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update: `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ`.
    /// Entries without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape {
                op: "optimizer_step",
                expected: vec![params.len()],
                got: vec![grads.len()],
            });
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite { op: "optimizer_step" });
        }
        self.m.resize(params.len(), None);
        self.v.resize(params.len(), None);
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let Some(g) = grads.get(i) else { continue };
            let theta = params.entry_mut(i).data_mut();
            if g.len() != theta.len() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    expected: vec![theta.len()],
                    got: vec![g.len()],
                });
            }
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
            for k in 0..g.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                let old = theta[k];
                theta[k] = old - c.lr * mh / (vh.sqrt() + c.eps) - c.lr * c.weight_decay * old;
            }
        }
        Ok(())
    }
}
