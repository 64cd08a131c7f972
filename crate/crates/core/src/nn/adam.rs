use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam with bias correction. Moments are keyed by parameter name so they
/// can be checkpointed and restored.
pub struct Adam {
    config: AdamConfig,
    step: u64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(params: impl IntoIterator<Item = (String, Var)>, config: AdamConfig) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for (name, var) in params {
            let m = var.as_tensor().zeros_like()?.detach();
            let v = m.clone();
            slots.insert(name, Slot { var, m, v });
        }
        Ok(Self {
            config,
            step: 0,
            slots,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Applies one update. Parameters absent from `grads` keep their values
    /// and moments.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for slot in self.slots.values_mut() {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            slot.m = ((&slot.m * beta1)? + (&g * (1.0 - beta1))?)?;
            slot.v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&slot.m / c1)?;
            let v_hat = (&slot.v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = (slot.var.as_tensor().detach() - (update * lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }

    /// Moment tensors as `m.<name>` / `v.<name>`.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.slots.len() * 2);
        for (name, slot) in &self.slots {
            out.push((format!("m.{name}"), slot.m.clone()));
            out.push((format!("v.{name}"), slot.v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, slot) in self.slots.iter_mut() {
            for (key, target) in [("m", &mut slot.m), ("v", &mut slot.v)] {
                let full = format!("{key}.{name}");
                let t = tensors
                    .get(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{full}`")))?;
                if t.dims() != slot.var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state `{full}` has wrong shape")));
                }
                *target = t.to_dtype(slot.var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}
