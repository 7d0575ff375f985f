//! Parameter containers, initialization and the AdamW optimizer.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};

/// Uniform `±1/√fan_in` initialization.
pub fn init_linear<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

/// He-normal style initialization for ReLU stacks.
pub fn init_relu<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f32> {
    let std = (2.0 / fan_in as f32).sqrt();
    let normal = rand_distr::Normal::new(0.0f32, std).expect("valid std");
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.sample(normal))
}

/// Named, ordered list of parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub values: Vec<Array2<f32>>,
}

impl Params {
    pub fn push(&mut self, name: impl Into<String>, value: Array2<f32>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Register every parameter as a tape leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    pub fn zeros_like(&self) -> Vec<Array2<f32>> {
        self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect()
    }

    /// Add the gradients of the registered leaves into `acc`.
    pub fn accumulate(acc: &mut [Array2<f32>], vars: &[Var], grads: &Grads) {
        for (a, v) in acc.iter_mut().zip(vars) {
            if let Some(g) = grads.get(*v) {
                *a += g;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over the first `warmup` fraction of steps, then cosine decay to zero.
    Cosine { warmup: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 1e-4, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8, schedule: LrSchedule::Constant }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine { warmup } => {
                let total = total.max(1) as f64;
                let s = step as f64;
                let w = (warmup * total).max(1.0);
                if s < w {
                    self.lr * (s + 1.0) / w
                } else {
                    let p = ((s - w) / (total - w).max(1.0)).min(1.0);
                    self.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
                }
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimizerConfig,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    t: i32,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, params: &Params) -> Self {
        Self { config, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Array2<f32>], lr: f64) {
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let lr = lr as f32;
        let decay = 1.0 - lr * c.weight_decay as f32;
        let eps = c.eps as f32;
        for ((p, g), (m, v)) in params.values.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p = *p * decay - lr * update;
            });
        }
    }
}

pub fn all_finite(grads: &[Array2<f32>]) -> bool {
    grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut params = Params::default();
        params.push("x", Array2::from_elem((1, 2), 3.0));
        let cfg = OptimizerConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &params);
        for _ in 0..500 {
            let g = params.values[0].mapv(|x| 2.0 * (x - 1.0));
            opt.step(&mut params, &[g], cfg.lr);
        }
        assert!(params.values[0].iter().all(|&x| (x - 1.0).abs() < 1e-2));
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut params = Params::default();
        params.push("x", Array2::from_elem((1, 1), 1.0));
        let cfg = OptimizerConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &params);
        opt.step(&mut params, &[Array2::zeros((1, 1))], cfg.lr);
        assert!((params.values[0][[0, 0]] - 0.95).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule_shape() {
        let cfg = OptimizerConfig { lr: 1.0, schedule: LrSchedule::Cosine { warmup: 0.1 }, ..Default::default() };
        assert!(cfg.lr_at(0, 100) < 0.2);
        assert!((cfg.lr_at(10, 100) - 1.0).abs() < 1e-9);
        assert!(cfg.lr_at(99, 100) < 0.01);
        assert_eq!(OptimizerConfig::default().lr_at(50, 100), 1e-4);
    }
}
