//! Optimizer with decoupled weight decay and a cosine learning-rate ramp.

use indexmap::IndexMap;

use super::registry::ParamRegistry;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct AdamWCfg {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWCfg {
    fn default() -> Self {
        AdamWCfg { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

pub struct AdamW {
    pub cfg: AdamWCfg,
    t: u64,
    m: IndexMap<String, Vec<f32>>,
    v: IndexMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamWCfg) -> Self {
        AdamW { cfg, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// One update over every parameter that accumulated a gradient. Weight
    /// decay is decoupled: applied to the parameter directly, not the moments.
    /// Parameters without gradients are untouched, moments included.
    pub fn step(&mut self, reg: &mut ParamRegistry) -> Result<()> {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, tensor) in reg.iter_mut() {
            let Some(grad) = tensor.grad() else { continue };
            let grad = grad.to_vec();
            let n = grad.len();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                data[i] -= self.cfg.lr * self.cfg.weight_decay * data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total` steps.
pub fn cosine_lr(step: usize, total: usize, lr_max: f32, lr_min: f32) -> f32 {
    if total == 0 {
        return lr_min;
    }
    let p = (step.min(total) as f64) / (total as f64);
    let c = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    lr_min + (lr_max - lr_min) * c as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tensor::Tensor;

    fn single_param(v: f32) -> ParamRegistry {
        let mut reg = ParamRegistry::new();
        reg.insert("w", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        reg
    }

    #[test]
    fn first_step_moves_by_lr_for_unit_gradient() {
        let mut reg = single_param(0.0);
        reg.accumulate_grads(&[("w".into(), vec![1.0])]).unwrap();
        let mut opt = AdamW::new(AdamWCfg { lr: 0.1, weight_decay: 0.0, ..Default::default() });
        opt.step(&mut reg).unwrap();
        let w = reg.get("w").unwrap().data()[0];
        assert!((w + 0.1).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn decay_only_shrinks_parameter_multiplicatively() {
        let mut reg = single_param(2.0);
        reg.accumulate_grads(&[("w".into(), vec![0.0])]).unwrap();
        let mut opt = AdamW::new(AdamWCfg { lr: 0.5, weight_decay: 0.1, ..Default::default() });
        opt.step(&mut reg).unwrap();
        let w = reg.get("w").unwrap().data()[0];
        assert!((w - 2.0 * (1.0 - 0.05)).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn parameters_without_gradients_stay_put() {
        let mut reg = single_param(1.5);
        let mut opt = AdamW::new(AdamWCfg::default());
        opt.step(&mut reg).unwrap();
        assert_eq!(reg.get("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn cosine_schedule_hits_endpoints_and_decreases() {
        let total = 100;
        assert!((cosine_lr(0, total, 1e-4, 1e-6) - 1e-4).abs() < 1e-12);
        assert!((cosine_lr(total, total, 1e-4, 1e-6) - 1e-6).abs() < 1e-12);
        let mut prev = f32::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(s, total, 1e-4, 1e-6);
            assert!(lr <= prev + 1e-12);
            prev = lr;
        }
    }
}
