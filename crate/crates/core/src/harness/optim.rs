//! Learning-rate schedule and a checkpointable AdamW.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::config::TrainConfig;
use crate::error::{Error, Result};

/// Learning rate for 1-based `iteration`: linear warmup from 0 to the peak,
/// then polynomial decay to 0 at `max_iterations`.
pub fn learning_rate(cfg: &TrainConfig, iteration: usize) -> f64 {
    let t = iteration as f64;
    let warm = cfg.warmup_iterations as f64;
    if iteration <= cfg.warmup_iterations && cfg.warmup_iterations > 0 {
        return cfg.peak_lr * t / warm;
    }
    let span = (cfg.max_iterations - cfg.warmup_iterations) as f64;
    let progress = ((t - warm) / span).clamp(0.0, 1.0);
    cfg.peak_lr * (1.0 - progress).powf(cfg.poly_power)
}

/// Adam moments with decoupled weight decay. Decay skips one-dimensional
/// parameters (biases and norm gains).
#[derive(Debug)]
pub struct AdamW {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, cfg: &TrainConfig) -> Result<Self> {
        let m = params
            .iter()
            .map(|(_, p)| p.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            params,
            m,
            v,
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let mut theta = p.as_tensor().detach();
            if self.weight_decay > 0.0 && theta.rank() > 1 {
                theta = (&theta * (1.0 - lr * self.weight_decay))?;
            }
            p.set(&(theta - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<param>` / `v.<param>`.
    pub fn state(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("m.{name}"), self.m[i].clone());
            out.insert(format!("v.{name}"), self.v[i].clone());
        }
        out
    }

    pub fn load_state(&mut self, state: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{prefix}.{name}");
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::Version(format!("optimizer state lacks {key}")))?;
                if t.dims() != p.as_tensor().dims() {
                    return Err(Error::Version(format!("optimizer state {key} has wrong shape")));
                }
                *slot = t.to_dtype(p.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}
