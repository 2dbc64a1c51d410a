use crate::error::{AutogradError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created on first sight of
/// a parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: ParamSet,
    second: ParamSet,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: ParamSet::new(),
            second: ParamSet::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Update every parameter named in `grads`; others are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(AutogradError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads.iter() {
            if !self.first.contains(name) {
                self.first.insert(name, Tensor::zeros(g.shape()));
                self.second.insert(name, Tensor::zeros(g.shape()));
            }
            let m = self.first.get_mut(name)?.data_mut();
            for (m, g) in m.iter_mut().zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
            }
            let v = self.second.get_mut(name)?.data_mut();
            for (v, g) in v.iter_mut().zip(g.data()) {
                *v = beta2 * *v + (1.0 - beta2) * g * g;
            }
            let m = self.first.get(name)?.data();
            let v = self.second.get(name)?.data();
            let p = params.get_mut(name)?.data_mut();
            for ((p, m), v) in p.iter_mut().zip(m).zip(v) {
                let mh = m / c1;
                let vh = v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
