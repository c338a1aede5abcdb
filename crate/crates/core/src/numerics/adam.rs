use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators for an ordered list of parameter buffers.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    /// Zero-initialised state for parameters with the given lengths.
    pub fn new(config: AdamConfig, param_lens: &[usize]) -> Self {
        AdamState {
            config,
            first_moment: param_lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            second_moment: param_lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn for_tensors(config: AdamConfig, params: &[&mut Tensor<T>]) -> Self {
        let lens: Vec<usize> = params.iter().map(|t| t.len()).collect();
        Self::new(config, &lens)
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> (&[T], &[T]) {
        (&self.first_moment[index], &self.second_moment[index])
    }

    /// One bias-corrected Adam update using each tensor's gradient buffer.
    /// Tensors without a gradient are treated as having zero gradient.
    pub fn update_tensors(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        let mut pairs: Vec<(&mut [T], &mut [T])> =
            params.iter_mut().map(|t| t.data_and_grad_mut()).collect();
        let mut data: Vec<&mut [T]> = Vec::with_capacity(pairs.len());
        let mut grads: Vec<&[T]> = Vec::with_capacity(pairs.len());
        for (d, g) in pairs.iter_mut() {
            data.push(&mut **d);
            grads.push(&**g);
        }
        self.update(&mut data, &grads)
    }

    /// One bias-corrected Adam update on explicit buffers.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        let next_step = self.step + 1;
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::config(format!(
                "adam state tracks {} buffers, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first_moment[i].len() || g.len() != p.len() {
                return Err(Error::config(format!(
                    "adam buffer {i}: param/grad/state lengths disagree"
                )));
            }
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Training {
                    step: next_step,
                    reason: format!("non-finite gradient in buffer {i} at index {bad}"),
                });
            }
        }

        let c = &self.config;
        let t = next_step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(c.learning_rate / bias1);
        let inv_sqrt_bias2 = T::from_f64(1.0 / bias2.sqrt());
        let eps = T::from_f64(c.epsilon);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                p[j] -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_bias2 + eps);
            }
        }
        self.step = next_step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![0.5f64, -1.25, 3.0];
        let before = p.clone();
        let mut state = AdamState::new(AdamConfig::default(), &[3]);
        state.update(&mut [&mut p], &[&[0.0; 3]]).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m1 = 0.1, v1 = 0.001; m_hat = 1, v_hat = 1 -> delta = -lr * 1 / (1 + eps).
        let cfg = AdamConfig::default();
        let mut p = vec![2.0f64];
        let mut state = AdamState::new(cfg, &[1]);
        state.update(&mut [&mut p], &[&[1.0]]).unwrap();
        let want = 2.0 - cfg.learning_rate / (1.0 + cfg.epsilon);
        assert!((p[0] - want).abs() < 1e-15);
    }

    #[test]
    fn two_steps_follow_scalar_recurrence() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let g = 0.37f64;
        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            x -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
        let mut p = vec![1.0f64];
        let mut state = AdamState::new(cfg, &[1]);
        state.update(&mut [&mut p], &[&[g]]).unwrap();
        state.update(&mut [&mut p], &[&[g]]).unwrap();
        assert!((p[0] - x).abs() < 1e-10, "{} vs {}", p[0], x);
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let mut p = vec![0.0f32; 2];
        let mut state = AdamState::new(AdamConfig::default(), &[2]);
        state.update(&mut [&mut p], &[&[0.1, 0.2]]).unwrap();
        let err = state.update(&mut [&mut p], &[&[f32::NAN, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::Training { step: 2, .. }), "{err}");
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn tensor_update_uses_grad_buffers() {
        let mut w = Tensor::<f64>::zeros(&[2]);
        w.grad_mut().copy_from_slice(&[1.0, -1.0]);
        let mut b = Tensor::<f64>::zeros(&[1]);
        let mut state = AdamState::for_tensors(AdamConfig::default(), &[&mut w, &mut b]);
        state.update_tensors(&mut [&mut w, &mut b]).unwrap();
        assert!(w.data()[0] < 0.0 && w.data()[1] > 0.0);
        assert_eq!(b.data()[0], 0.0);
    }
}
