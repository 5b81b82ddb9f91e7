//! Adam optimizer with bias correction.

use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter list, in registration
/// order, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Zero-initialized state matching the given parameter shapes.
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        Self {
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update over a parameter list. `params[i]` and `grads[i]` must
/// share the shape `state` was built with.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    for i in 0..params.len() {
        if params[i].shape() != grads[i].shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: params[i].shape().to_vec(),
                rhs: grads[i].shape().to_vec(),
            });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].data();
        let p = params[i].data_mut();
        for j in 0..p.len() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            p[j] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut p = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(vec![1, 3]);
        let mut state = AdamState::new(&[vec![1, 3]]);
        adam_step(&mut [&mut p], &[g], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut p = Tensor::scalar(1.0);
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(&[vec![]]);
        adam_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut state, &cfg).unwrap();
        let m_after_one = state.m[0].item();
        adam_step(&mut [&mut p], &[Tensor::scalar(0.0)], &mut state, &cfg).unwrap();
        assert!((state.m[0].item() - cfg.beta1 * m_after_one).abs() < 1e-9);
    }

    #[test]
    fn first_step_is_minus_lr_bias_corrected() {
        // g = 1 on a fresh state: update = -lr * 1 / (1 + eps)
        let cfg = AdamConfig::default();
        let mut p = Tensor::scalar(0.0);
        let mut state = AdamState::new(&[vec![]]);
        adam_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut state, &cfg).unwrap();
        assert!((p.item() + cfg.lr).abs() < 1e-6, "{}", p.item());
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let cfg = AdamConfig::default();
            let mut p = Tensor::matrix(1, 2, vec![0.5, -0.25]).unwrap();
            let mut state = AdamState::new(&[vec![1, 2]]);
            for step in 0..100 {
                let g = Tensor::matrix(1, 2, vec![(step as f32 * 0.01).sin(), 0.3]).unwrap();
                adam_step(&mut [&mut p], &[g], &mut state, &cfg).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::zeros(vec![2, 2]);
        let g = Tensor::zeros(vec![2, 3]);
        let mut state = AdamState::new(&[vec![2, 2]]);
        assert!(adam_step(&mut [&mut p], &[g], &mut state, &AdamConfig::default()).is_err());
    }
}
