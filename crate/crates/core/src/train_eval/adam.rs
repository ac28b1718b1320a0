//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::model::ParameterRegistry;

/// Per-parameter first/second moment estimates, aligned with registry order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

/// One bias-corrected Adam update over every registered parameter, consuming
/// the gradients accumulated on the registry. Every parameter must carry a
/// finite gradient.
pub fn adam_step(registry: &mut ParameterRegistry, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.is_empty() {
        for (_, t) in registry.iter() {
            state.m.push(vec![0.0; t.numel()]);
            state.v.push(vec![0.0; t.numel()]);
        }
    }
    if state.m.len() != registry.len() {
        return Err(Error::Contract("adam state does not match registry".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (idx, (name, tensor)) in registry.iter_mut().enumerate() {
        let grad = tensor
            .grad
            .take()
            .ok_or_else(|| Error::Contract(format!("adam_step: parameter {name} has no gradient")))?;
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::numeric("adam_step", format!("non-finite gradient for parameter {name}")));
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let data = tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        tensor.grad = Some(grad); // clearing is the caller's call (zero_grads)
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn registry_with(name: &str, values: &[f64], grad: Option<Vec<f64>>) -> ParameterRegistry {
        let mut reg = ParameterRegistry::new();
        let mut t = Tensor::new(values.to_vec(), &[values.len()]).unwrap();
        t.grad = grad;
        reg.insert(name, t).unwrap();
        reg
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut reg = registry_with("w", &[1.0, -0.5], Some(vec![0.3, -2.0]));
        let mut state = AdamState::new();
        adam_step(&mut reg, &mut state, 0.01).unwrap();
        let w = reg.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 0.01)).abs() < 1e-6, "{}", w[0]);
        assert!((w[1] - (-0.5 + 0.01)).abs() < 1e-6, "{}", w[1]);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut reg = registry_with("w", &[0.7, -0.3], Some(vec![0.0, 0.0]));
        let mut state = AdamState::new();
        for _ in 0..5 {
            adam_step(&mut reg, &mut state, 0.1).unwrap();
        }
        assert_eq!(reg.get("w").unwrap().data(), &[0.7, -0.3]);
    }

    #[test]
    fn lr_zero_is_a_no_op() {
        let mut reg = registry_with("w", &[0.7], Some(vec![1.5]));
        let mut state = AdamState::new();
        adam_step(&mut reg, &mut state, 0.0).unwrap();
        assert_eq!(reg.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // minimize (w - 3)^2 from w = 0 with lr 0.1
        let mut reg = registry_with("w", &[0.0], None);
        let mut state = AdamState::new();
        for _ in 0..100 {
            let w = reg.get("w").unwrap().data()[0];
            reg.get_mut("w").unwrap().grad = Some(vec![2.0 * (w - 3.0)]);
            adam_step(&mut reg, &mut state, 0.1).unwrap();
        }
        let w = reg.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 0.1, "w = {w}");
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut reg = registry_with("fc1.weight", &[0.0], Some(vec![f64::NAN]));
        let mut state = AdamState::new();
        let err = adam_step(&mut reg, &mut state, 0.1).unwrap_err();
        assert!(err.to_string().contains("fc1.weight"), "{err}");
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut reg = registry_with("w", &[0.0], None);
        let mut state = AdamState::new();
        assert!(matches!(adam_step(&mut reg, &mut state, 0.1), Err(Error::Contract(_))));
    }
}
