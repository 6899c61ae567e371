//! AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{cst, Float, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: step counter and per-parameter moment estimates.
#[derive(Clone, Debug)]
pub struct AdamW<T = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    m: HashMap<ParamId, Vec<T>>,
    v: HashMap<ParamId, Vec<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[T]> {
        self.m.get(&id).map(Vec::as_slice)
    }

    /// Applies one update to every trainable parameter that carries a gradient.
    ///
    /// Fails without touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        let ids: Vec<ParamId> = store
            .ids()
            .filter(|&id| store.is_trainable(id) && store.get(id).grad.is_some())
            .collect();
        for &id in &ids {
            let grad = store.get(id).grad.as_ref().expect("filtered");
            if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch: 0,
                    batch: 0,
                    lr,
                    reason: format!("non-finite gradient in {} at index {bad}", store.name(id)),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (cst::<T>(c.beta1), cst::<T>(c.beta2));
        let bc1 = cst::<T>(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = cst::<T>(1.0 - c.beta2.powi(self.step as i32));
        let lr_t = cst::<T>(lr);
        let decay = cst::<T>(1.0 - lr * c.weight_decay);
        let eps = cst::<T>(c.epsilon);
        for id in ids {
            let t = store.get_mut(id);
            let n = t.numel();
            let m = self.m.entry(id).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(id).or_insert_with(|| vec![T::zero(); n]);
            let grad = t.grad.take().expect("filtered");
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p = *p * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            t.grad = Some(grad);
        }
        Ok(())
    }
}

/// Builds a training-mode graph, backpropagates the scalar it returns and
/// applies one optimizer step. Returns the loss value.
///
/// A non-finite loss or gradient aborts before any parameter changes.
pub fn train_step<T: Float, F>(store: &mut ParamStore<T>, opt: &mut AdamW<T>, lr: f64, build: F) -> Result<f64>
where
    F: FnOnce(&mut Graph<T>) -> Result<Var>,
{
    let (value, grads, updates) = {
        let mut g = Graph::new(store, true);
        let loss = build(&mut g)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Training {
                epoch: 0,
                batch: 0,
                lr,
                reason: format!("non-finite loss {value}"),
            });
        }
        let grads = g.backward(loss)?;
        (value, grads, g.take_buffer_updates())
    };
    store.zero_grad();
    store.accumulate(&grads);
    opt.step(store, lr)?;
    store.apply_buffer_updates(updates);
    Ok(value)
}

/// Linear warmup followed by one cosine annealing cycle, then held at the floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub t_max: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr_max: 8e-4,
            lr_min: 3.0398e-6,
            warmup_epochs: 34,
            t_max: 33,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lr_min && self.lr_min < self.lr_max) || self.t_max < 1 {
            return Err(Error::Parameter(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.lr_max * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let t = epoch - self.warmup_epochs;
        if t >= self.t_max {
            return self.lr_min;
        }
        let cos = (std::f64::consts::PI * t as f64 / self.t_max as f64).cos();
        let lr = self.lr_min + (self.lr_max - self.lr_min) * 0.5 * (1.0 + cos);
        lr.clamp(self.lr_min, self.lr_max)
    }
}
