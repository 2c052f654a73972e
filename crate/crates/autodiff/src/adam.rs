use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
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
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }

    /// Apply one update. Every gradient must name an existing parameter of
    /// the same shape; parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
        for (name, g) in grads {
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(AutodiffError::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_a_no_op() {
        let mut p = single(0.5);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &[("w".into(), Tensor::scalar(0.0))]).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // m̂ = 0.1, v̂ = 0.01 after bias correction, so the update is
        // lr·0.1/(0.1 + 1e-8).
        let mut p = single(1.0);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.001,
            ..AdamConfig::default()
        });
        adam.step(&mut p, &[("w".into(), Tensor::scalar(0.1))]).unwrap();
        let moved = 1.0 - p.get("w").unwrap().data()[0];
        let expected = 0.001 * 0.1 / (0.1 + 1e-8);
        assert!((moved - expected).abs() < 1e-15, "{moved} vs {expected}");
        assert!(adam.second_moment("w").unwrap().data()[0] >= 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = single(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut p, &[("w".into(), Tensor::zeros(&[2]))]).unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { .. }));
        assert_eq!(adam.step_count(), 0);
    }
}
