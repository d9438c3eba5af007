//! Bias-corrected Adam with a fixed learning rate.

use crate::error::{DcdcError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(DcdcError::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(DcdcError::config("Adam lr and eps must be positive"));
        }
        Ok(())
    }
}

/// First and second moment accumulators, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_tensors(params: &[&[f64]]) -> Self {
        AdamState::new(&params.iter().map(|p| p.len()).collect::<Vec<_>>())
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> impl Iterator<Item = &f64> {
        self.v.iter().flatten()
    }
}

/// One Adam update of `params` in place; increments the step counter.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(DcdcError::shape(format!(
            "{} parameter tensors, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[k].len() {
            return Err(DcdcError::shape(format!("tensor {k} length mismatch")));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn step(theta: &mut Vec<f64>, g: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
        adam_step(&mut [theta.as_mut_slice()], &[g], state, cfg).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut theta = vec![0.3, -1.2];
        let mut s = AdamState::new(&[2]);
        step(&mut theta, &[0.0, 0.0], &mut s, &AdamConfig::default());
        assert_eq!(theta, vec![0.3, -1.2]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_closed_form() {
        // After bias correction m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        let cfg = AdamConfig::default();
        for g in [1.0, -0.25, 3e-3] {
            let mut theta = vec![0.0];
            let mut s = AdamState::new(&[1]);
            step(&mut theta, &[g], &mut s, &cfg);
            let expect = -cfg.lr * g / (f64::abs(g) + cfg.eps);
            assert!((theta[0] - expect).abs() < 1e-15, "{} vs {expect}", theta[0]);
        }
        let mut theta = vec![0.0];
        let mut s = AdamState::new(&[1]);
        step(&mut theta, &[1.0], &mut s, &cfg);
        assert!((theta[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn constant_gradient_second_step_not_larger() {
        let cfg = AdamConfig::default();
        let mut theta = vec![0.0];
        let mut s = AdamState::new(&[1]);
        step(&mut theta, &[0.7], &mut s, &cfg);
        let first = theta[0].abs();
        let before = theta[0];
        step(&mut theta, &[0.7], &mut s, &cfg);
        // Closed form: both moments are exactly bias-corrected to g and g^2.
        let second = (theta[0] - before).abs();
        assert!(second <= first + 1e-12);
        assert!((second - cfg.lr * 0.7 / (0.7 + cfg.eps)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut theta = vec![0.0; 3];
        let mut s = AdamState::new(&[3]);
        let r = adam_step(&mut [theta.as_mut_slice()], &[&[1.0, 2.0]], &mut s, &AdamConfig::default());
        assert!(r.is_err());
        let mut s = AdamState::new(&[2]);
        let r = adam_step(&mut [theta.as_mut_slice()], &[&[1.0, 2.0, 3.0]], &mut s, &AdamConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn update_magnitude_guard_and_reproducibility() {
        let cfg = AdamConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grads: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..5).map(|_| rng.random_range(-1e3..1e3) * rng.random::<f64>().powi(6)).collect())
            .collect();
        let run = || {
            let mut theta = vec![0.0; 5];
            let mut s = AdamState::new(&[5]);
            for g in &grads {
                let before = theta.clone();
                step(&mut theta, g, &mut s, &cfg);
                for (a, b) in theta.iter().zip(&before) {
                    assert!((a - b).abs() <= cfg.lr * 10.0);
                }
                assert!(s.second_moments().all(|&v| v >= 0.0));
            }
            theta
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut theta = vec![0.0];
        let mut s = AdamState::new(&[1]);
        let cfg = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(adam_step(&mut [theta.as_mut_slice()], &[&[1.0]], &mut s, &cfg).is_err());
    }
}
