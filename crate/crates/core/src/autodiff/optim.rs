//! Adam parameter updates with bias correction.

use super::Tensor;
use crate::error::{CoreError, Result};

/// Optimizer state: per-parameter moment buffers plus the shared step counter.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    /// (first moment, second moment) per registered parameter, in registration order.
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Adam {
        Adam {
            beta1,
            beta2,
            epsilon,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// The (0.9, 0.999, 1e-8) defaults.
    pub fn default_config() -> Adam {
        Adam::new(0.9, 0.999, 1e-8)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters; `params` must keep a stable order
    /// across calls. Gradients are read from each tensor's grad buffer.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if self.moments.is_empty() {
            for p in params.iter() {
                self.moments.push((vec![0.0; p.len()], vec![0.0; p.len()]));
            }
        }
        if self.moments.len() != params.len() {
            return Err(CoreError::invalid(
                "parameter count changed between optimizer steps",
            ));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);

        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            let grad = p
                .grad
                .as_ref()
                .ok_or_else(|| CoreError::invalid("parameter has no gradient buffer"))?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(CoreError::TrainingDiverged {
                    epoch: self.step as usize,
                    detail: "NaN or infinite gradient".into(),
                });
            }
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut p = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap().param();
        let before = p.data.clone();
        let mut adam = Adam::default_config();
        for _ in 0..5 {
            adam.step(&mut [&mut p], 0.1).unwrap();
        }
        assert_eq!(p.data, before);
    }

    #[test]
    fn single_step_bias_corrected() {
        // One step with lr=0.1, grad=1: mhat = vhat = 1, so the param moves by
        // lr / (1 + eps) which is 0.1 to within the epsilon.
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap().param();
        p.grad = Some(vec![1.0]);
        let mut adam = Adam::default_config();
        adam.step(&mut [&mut p], 0.1).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.data[0] - expected).abs() < 1e-15);
        assert!((p.data[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut a = Tensor::new(vec![1], vec![0.7]).unwrap().param();
        let mut b = Tensor::new(vec![1], vec![0.7]).unwrap().param();
        let mut adam = Adam::default_config();
        for k in 0..20 {
            let g = (k as f64 * 0.3).sin();
            a.grad = Some(vec![g]);
            b.grad = Some(vec![g]);
            adam.step(&mut [&mut a, &mut b], 0.05).unwrap();
            assert_eq!(a.data[0], b.data[0]);
        }
    }

    #[test]
    fn nan_grad_reports_divergence() {
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap().param();
        p.grad = Some(vec![f64::NAN]);
        let mut adam = Adam::default_config();
        let err = adam.step(&mut [&mut p], 0.1).unwrap_err();
        assert!(matches!(err, CoreError::TrainingDiverged { .. }));
    }
}
