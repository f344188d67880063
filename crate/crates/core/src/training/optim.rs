use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::{Grads, Params};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step decay: `initial * factor^floor(epoch / every)`, epochs counted from 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-4,
            factor: 0.8,
            every: 100,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial * self.factor.powi((epoch / self.every.max(1)) as i32)
    }
}

/// Per-parameter first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: IndexMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Moments)> {
        self.moments.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Rebuild from saved state.
    pub fn restore(config: AdamConfig, step: u64, moments: impl IntoIterator<Item = (String, Moments)>) -> Self {
        Self {
            config,
            step,
            moments: moments.into_iter().collect(),
        }
    }

    /// One bias-corrected update of every parameter, then zero `grads`.
    /// Each parameter's update depends only on its own gradient and moments.
    pub fn step(&mut self, params: &mut Params<f32>, grads: &mut Grads<f32>, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        for name in params.names() {
            match grads.get(name) {
                Some(g) if g.len() == params.get(name).map_or(0, Tensor::numel) => {}
                _ => return Err(Error::MissingGrad(name.to_string())),
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked above");
            let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut mo.m).zip(&mut mo.v) {
                let gi = gi as f64;
                let mi = beta1 * *m as f64 + (1.0 - beta1) * gi;
                let vi = beta2 * *v as f64 + (1.0 - beta2) * gi * gi;
                *m = mi as f32;
                *v = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        grads.zero();
        Ok(())
    }
}
