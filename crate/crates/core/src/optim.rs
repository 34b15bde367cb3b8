//! Adam over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and step count; saved in checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::default(),
        }
    }

    pub fn with_state(config: AdamConfig, state: AdamState) -> Self {
        Self { config, state }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != grad.shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for `{name}`")));
            }
            if !self.state.m.contains(name) {
                self.state.m.insert(name.clone(), Tensor::zeros(grad.shape()));
                self.state.v.insert(name.clone(), Tensor::zeros(grad.shape()));
            }
            let m = self.state.m.get_mut(name).expect("inserted above");
            for (mi, &gi) in m.data_mut().iter_mut().zip(grad.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = self.state.v.get_mut(name).expect("inserted above");
            for (vi, &gi) in v.data_mut().iter_mut().zip(grad.data()) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let m = self.state.m.get(name).expect("inserted above").data();
            let v = self.state.v.get(name).expect("inserted above").data();
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = ParamStore::default();
        params.insert("w", Tensor::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec([1, 1, 1, 3], vec![3.0, -0.1, 0.0]).unwrap());
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        opt.step(&mut params, &grads).unwrap();
        let w = params.get("w").unwrap().data();
        // bias-corrected first step is lr * sign(g)
        assert!((w[0] - 0.9).abs() < 1e-8);
        assert!((w[1] - -1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamStore::default();
        params.insert("x", Tensor::full([1, 1, 1, 1], 5.0));
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let x = params.get("x").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::full([1, 1, 1, 1], 2.0 * (x - 1.0)));
            opt.step(&mut params, &grads).unwrap();
        }
        assert!((params.get("x").unwrap().data()[0] - 1.0).abs() < 1e-2);
        assert_eq!(opt.state.step, 500);
    }

    #[test]
    fn unknown_parameter_is_an_error() {
        let mut params = ParamStore::default();
        let mut grads = BTreeMap::new();
        grads.insert("ghost".to_string(), Tensor::zeros([1, 1, 1, 1]));
        assert!(Adam::new(AdamConfig::default()).step(&mut params, &grads).is_err());
    }
}
