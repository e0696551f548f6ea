use std::collections::BTreeMap;

use super::params::{GradMap, ParamSet};
use super::TensorError;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam state: first/second moment accumulators per parameter plus a step
/// counter. Moment slots are created lazily the first time a gradient for
/// a name arrives.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    slots: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step with bias correction. Frozen parameters are left
    /// untouched even when the gradient map carries an entry for them, so
    /// their bit patterns survive any number of calls.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap) -> Result<(), TensorError> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
            if !param.trainable() {
                continue;
            }
            if param.value().shape() != grad.shape() {
                return Err(TensorError::ParameterShape {
                    name: name.clone(),
                    actual: grad.shape().to_vec(),
                    expected: param.value().shape().to_vec(),
                });
            }
            let n = grad.numel();
            let (m, v) = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let AdamConfig {
                lr,
                beta1,
                beta2,
                epsilon,
            } = self.cfg;
            for ((p, &g), (mi, vi)) in param
                .value_mut()
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Convenience wrapper matching the rest of the training loop: applies one
/// Adam update to every trainable parameter present in `grads`.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradMap,
    state: &mut AdamState,
) -> Result<(), TensorError> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Parameter, Tensor};

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut params = ParamSet::new();
        params
            .insert(Parameter::new("p", Tensor::vector(vec![0.7, -0.3]), true))
            .unwrap();
        let mut grads = GradMap::new();
        grads.insert("p".into(), Tensor::vector(vec![0.0, 0.0]));
        let mut state = AdamState::new(AdamConfig::default());
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params.get("p").unwrap().value().data(), &[0.7, -0.3]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // lr = 0.1, g = 1 on scalar p = 0: bias-corrected first step is
        // lr * 1 / (1 + eps), i.e. about -0.1.
        let mut params = ParamSet::new();
        params
            .insert(Parameter::new("p", Tensor::scalar(0.0), true))
            .unwrap();
        let mut grads = GradMap::new();
        grads.insert("p".into(), Tensor::scalar(1.0));
        let mut state = AdamState::new(AdamConfig::with_lr(0.1));
        adam_step(&mut params, &grads, &mut state).unwrap();
        let p = params.get("p").unwrap().value().item();
        assert!((p + 0.1).abs() < 1e-6, "p = {p}");
    }

    #[test]
    fn frozen_parameter_is_bit_identical_after_steps() {
        let original = vec![0.25f32, -1.5, 3.0e-7];
        let mut params = ParamSet::new();
        params
            .insert(Parameter::new(
                "w",
                Tensor::vector(original.clone()),
                false,
            ))
            .unwrap();
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::vector(vec![5.0, -2.0, 1.0]));
        let mut state = AdamState::new(AdamConfig::default());
        for _ in 0..17 {
            adam_step(&mut params, &grads, &mut state).unwrap();
        }
        let after = params.get("w").unwrap().value().data();
        for (a, b) in after.iter().zip(&original) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = ParamSet::new();
        params
            .insert(Parameter::new("p", Tensor::vector(vec![0.0, 0.0]), true))
            .unwrap();
        let mut grads = GradMap::new();
        grads.insert("p".into(), Tensor::vector(vec![1.0]));
        let mut state = AdamState::new(AdamConfig::default());
        assert!(adam_step(&mut params, &grads, &mut state).is_err());
    }

    #[test]
    fn step_counter_increases() {
        let mut state = AdamState::new(AdamConfig::default());
        let mut params = ParamSet::new();
        let grads = GradMap::new();
        for expect in 1..=5 {
            state.step(&mut params, &grads).unwrap();
            assert_eq!(state.step_count(), expect);
        }
    }
}
