//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;

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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::contract("adam", format!("lr must be > 0, got {}", cfg.lr)));
        }
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Ok(Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter and clears their gradients.
    ///
    /// Frozen parameters are skipped. A trainable parameter without a gradient
    /// is a contract violation and leaves every parameter untouched.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(id) = params
            .ids()
            .find(|&id| params.get(id).requires_grad && params.get(id).grad.is_none())
        {
            return Err(Error::contract(
                "adam",
                format!("parameter {} has no gradient", params.name(id)),
            ));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids().collect::<Vec<_>>() {
            let t = params.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            let g = t.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (k, w) in t.data_mut().iter_mut().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{Axis, Tape};
    use crate::tensor::Tensor;

    fn quad_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w));
        s
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap());
        s.get_mut(id).grad = Some(vec![3.0, -0.2, 1e-3]);
        let mut adam = Adam::new(AdamConfig { lr: 0.01, ..Default::default() }, &s).unwrap();
        adam.step(&mut s).unwrap();
        let w = s.get(id).data();
        assert!((w[0] + 0.01).abs() < 1e-9);
        assert!((w[1] - 0.01).abs() < 1e-9);
        assert!((w[2] + 0.01).abs() < 1e-7);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = quad_store(0.7);
        let id = s.id("w").unwrap();
        s.get_mut(id).grad = Some(vec![0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
        adam.step(&mut s).unwrap();
        assert_eq!(s.get(id).data(), &[0.7]);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut s = quad_store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
        assert!(matches!(adam.step(&mut s), Err(Error::Contract { .. })));
    }

    #[test]
    fn non_positive_lr_rejected() {
        let s = quad_store(1.0);
        assert!(Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &s).is_err());
    }

    #[test]
    fn hundred_steps_on_a_parabola() {
        let mut s = quad_store(1.0);
        let id = s.id("w").unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &s).unwrap();
        for _ in 0..100 {
            let mut t = Tape::new();
            let w = t.param(&s, id).unwrap();
            let sq = t.square(w).unwrap();
            let loss = t.reduce_sum(sq, Axis::All).unwrap();
            t.backward(loss, &mut s).unwrap();
            adam.step(&mut s).unwrap();
        }
        assert!(s.get(id).data()[0].abs() < 0.1);
        assert_eq!(adam.steps_taken(), 100);
    }
}
