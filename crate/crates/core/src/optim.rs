//! Adam optimizer over named tensors.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

/// Adam with bias correction. Moments are created lazily per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: IndexMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// Number of completed [`Adam::begin_step`] calls.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &IndexMap<String, (Tensor, Tensor)> {
        &self.moments
    }

    /// Starts a new optimisation step; call once before the per-tensor updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates `param` in place from `grad`.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("adam", format!("{:?}", param.shape()), format!("{:?}", grad.shape())));
        }
        if self.step == 0 {
            return Err(Error::invalid("Adam::update called before begin_step"));
        }
        let c = self.config;
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        let mut p = Tensor::from_vec(vec![1.0, -1.0, 0.5]);
        opt.begin_step();
        opt.update("p", &mut p, &Tensor::from_vec(vec![3.0, -0.2, 0.0])).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
        let mut p = Tensor::from_vec(vec![2.0, -3.0]);
        for _ in 0..2000 {
            opt.begin_step();
            let g = p.map(|x| 2.0 * (x - 1.0));
            opt.update("p", &mut p, &g).unwrap();
        }
        assert!(p.data().iter().all(|x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn rejects_misuse() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = Tensor::zeros(&[2]);
        assert!(opt.update("p", &mut p, &Tensor::zeros(&[2])).is_err());
        opt.begin_step();
        assert!(opt.update("p", &mut p, &Tensor::zeros(&[3])).is_err());
    }
}
