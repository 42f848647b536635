//! AdamW with decoupled weight decay and bias correction.

use crate::graph::NumericsError;
use crate::real::Real;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
///
/// Moment tensors are created lazily on the first step so the state can be
/// constructed before the parameter list is known; once created their shapes
/// must keep matching the parameters.
pub struct OptimizerState<F: Real> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update over all parameters.
    ///
    /// `grads[i] = None` is treated as a zero gradient. Any NaN gradient
    /// aborts the step before touching parameters or state.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<F>],
        grads: &[Option<&Tensor<F>>],
    ) -> Result<(), NumericsError> {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer state size mismatch");
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                assert_eq!(
                    g.shape(),
                    params[i].shape(),
                    "gradient shape mismatch at parameter {i}"
                );
                if g.data().iter().any(|x| x.is_nan()) {
                    return Err(NumericsError::NanGradient(format!("#{i}")));
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let lr = F::from_f64(self.config.lr);
        let wd = F::from_f64(self.config.weight_decay);
        let b1 = F::from_f64(self.config.beta1);
        let b2 = F::from_f64(self.config.beta2);
        let eps = F::from_f64(self.config.epsilon);
        let bc1 = F::one() - b1.powi(t);
        let bc2 = F::one() - b2.powi(t);

        for (i, p) in params.iter_mut().enumerate() {
            let n = p.numel();
            let pd = p.data_mut();
            let md = self.m[i].data_mut();
            let vd = self.v[i].data_mut();
            for j in 0..n {
                let g = grads[i].map_or(F::zero(), |g| g.data()[j]);
                pd[j] *= F::one() - lr * wd;
                md[j] = b1 * md[j] + (F::one() - b1) * g;
                vd[j] = b2 * vd[j] + (F::one() - b2) * g * g;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                pd[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = Tensor::from_vec(&[2], vec![1.5f64, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut state = OptimizerState::new(AdamWConfig::default());
        state.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_grad_decay_scales_params() {
        let mut p = Tensor::from_vec(&[2], vec![1.0f64, -4.0]);
        let g = Tensor::zeros(&[2]);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut state = OptimizerState::new(cfg);
        state.step(&mut [&mut p], &[Some(&g)]).unwrap();
        // scaled by (1 - lr*wd) = 0.95
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        assert!((p.data()[1] + 3.8).abs() < 1e-15);
    }

    #[test]
    fn scalar_hand_trace_two_steps() {
        // Frozen from a hand-executed AdamW recurrence:
        // theta0=1, g=0.5, lr=0.1, b1=0.9, b2=0.999, eps=1e-8, wd=0.01.
        let mut p = Tensor::from_vec(&[1], vec![1.0f64]);
        let g = Tensor::from_vec(&[1], vec![0.5f64]);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut state = OptimizerState::new(cfg);
        state.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert!((p.data()[0] - 0.89900000199999996).abs() < 1e-12);
        state.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert!((p.data()[0] - 0.79810100399799992).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut p = Tensor::from_vec(&[2], vec![1.0f64, 2.0]);
        let g = Tensor::from_vec(&[2], vec![0.1, f64::NAN]);
        let mut state = OptimizerState::new(AdamWConfig::default());
        let err = state.step(&mut [&mut p], &[Some(&g)]);
        assert!(err.is_err());
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn deterministic_given_identical_inputs() {
        let run = || {
            let mut p = Tensor::from_vec(&[3], vec![0.3f64, -0.7, 1.1]);
            let g = Tensor::from_vec(&[3], vec![0.05, 0.2, -0.4]);
            let mut state = OptimizerState::new(AdamWConfig::default());
            for _ in 0..5 {
                state.step(&mut [&mut p], &[Some(&g)]).unwrap();
            }
            p.data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
