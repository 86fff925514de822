use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

/// Bias-corrected Adam moments for a list of parameter arrays.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        AdamState {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One descent step: `p ← p − lr · m̂ / (√v̂ + eps)`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!("state tracks {} arrays, got {} params / {} grads", self.m.len(), params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape(
                    "adam",
                    format!("array {i}: state {} / param {} / grad {}", self.m[i].len(), p.len(), g.len()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let lr = 0.01;
        let mut state = AdamState::new(AdamConfig::with_lr(lr), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        state.step(&mut [&mut p[..]], &[vec![1.0; 3]]).unwrap();
        for (after, before) in p.iter().zip([1.0, -2.0, 0.5]) {
            assert!((after - before + lr).abs() < 1e-6);
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut state = AdamState::new(AdamConfig::with_lr(0.1), &[2]);
        let mut p = vec![0.3, 0.7];
        state.step(&mut [&mut p[..]], &[vec![0.0; 2]]).unwrap();
        assert_eq!(p, vec![0.3, 0.7]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn deterministic_and_nonnegative_second_moment() {
        let run = || {
            let mut state = AdamState::new(AdamConfig::with_lr(0.05), &[2]);
            let mut p = vec![0.0, 0.0];
            for k in 0..50 {
                let g = vec![(k as f64).sin(), -(k as f64 * 0.3).cos()];
                state.step(&mut [&mut p[..]], &[g]).unwrap();
            }
            assert!(state.second_moments().iter().flatten().all(|&v| v >= 0.0));
            p
        };
        let a = run();
        let b = run();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut state = AdamState::new(AdamConfig::with_lr(0.1), &[2]);
        let mut p = vec![0.0; 3];
        assert!(state.step(&mut [&mut p[..]], &[vec![0.0; 3]]).is_err());
        assert_eq!(state.step_count(), 0);
    }
}
