use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::params::ParamStore;
use crate::training::config::OptimConfig;

/// `lr · (1 − step/total)^power`; `power = 0` is a constant rate.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if power == 0.0 || total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    base * (1.0 - frac).powf(power)
}

/// Stochastic gradient descent with momentum:
///
/// ```text
/// g ← ∇ + λ·p
/// b ← μ·b + g          (b = g on the first step)
/// p ← p − lr · (g + μ·b)   with Nesterov
/// p ← p − lr · b           without
/// ```
#[derive(Debug)]
pub struct Sgd {
    pub config: OptimConfig,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            buffers: BTreeMap::new(),
        }
    }

    /// Names with momentum state, i.e. every parameter updated so far.
    pub fn state_names(&self) -> impl Iterator<Item = &String> {
        self.buffers.keys()
    }

    /// Update every parameter of `params` that received a gradient.
    pub fn step(&mut self, grads: &GradStore, params: &ParamStore, lr: f64) -> Result<()> {
        let mu = self.config.momentum;
        for (name, var) in params.iter() {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let mut g = grad.detach();
            if self.config.weight_decay != 0.0 {
                g = (g + (var.as_tensor().detach() * self.config.weight_decay)?)?;
            }
            let update = if mu == 0.0 {
                g
            } else {
                let buf = match self.buffers.get(name) {
                    Some(b) => ((b * mu)? + &g)?,
                    None => g.clone(),
                };
                self.buffers.insert(name.clone(), buf.clone());
                if self.config.nesterov {
                    (g + (buf * mu)?)?
                } else {
                    buf
                }
            };
            let next = (var.as_tensor().detach() - (update * lr)?)?;
            var.set(&next)?;
        }
        Ok(())
    }
}
