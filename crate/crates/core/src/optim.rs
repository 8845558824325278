//! AdamW with decoupled weight decay over a [`VarStore`].

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use crate::error::Result;
use crate::nn::scalar_f64;
use crate::params::{decays, Params, VarStore};

#[derive(Debug, Clone, Copy, PartialEq)]
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
            weight_decay: 0.04,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, vars: &VarStore) -> Result<Self> {
        let mut m = Params::new();
        let mut v = Params::new();
        for (k, var) in vars.iter() {
            m.insert(k.clone(), var.as_tensor().zeros_like()?);
            v.insert(k.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self { cfg, step: 0, m, v })
    }

    /// Gradients by parameter name; parameters without one get zeros.
    pub fn collect_grads(vars: &VarStore, grads: &GradStore) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, var) in vars.iter() {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => var.as_tensor().zeros_like()?,
            };
            out.insert(k.clone(), g);
        }
        Ok(out)
    }

    pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let mut acc = 0.0;
        for g in grads.values() {
            acc += scalar_f64(&g.to_dtype(DType::F64)?.sqr()?.sum_all()?)?;
        }
        Ok(acc.sqrt())
    }

    /// Scales gradients in place so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
        let norm = Self::global_norm(grads)?;
        if max_norm > 0.0 && norm > max_norm {
            let s = max_norm / (norm + 1e-6);
            for g in grads.values_mut() {
                *g = (&*g * s)?;
            }
        }
        Ok(norm)
    }

    pub fn update(&mut self, vars: &VarStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, var) in vars.iter() {
            let g = &grads[k];
            let m = ((self.m.get(k)? * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = ((self.v.get(k)? * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let theta = var.as_tensor();
            let mut next = theta.clone();
            if c.weight_decay > 0.0 && decays(k, theta) {
                next = (&next * (1.0 - lr * c.weight_decay))?;
            }
            let step = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            next = (next - (step * lr)?)?;
            // keep autograd history from chaining across steps
            var.set(&next.detach())?;
            self.m.insert(k.clone(), m.detach());
            self.v.insert(k.clone(), v.detach());
        }
        Ok(())
    }
}
