use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
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

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. The effective gradient is `grad + l2 · params` on entries
    /// where `decay` is true (all entries when `decay` is `None`).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], l2: f64, decay: Option<&[bool]>) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grad.len() != n || decay.is_some_and(|d| d.len() != n) {
            return Err(Error::Shape(format!(
                "optimizer holds {n} parameters, got params={} grad={}",
                params.len(),
                grad.len()
            )));
        }
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at parameter {k}")));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for k in 0..n {
            let decayed = decay.map_or(true, |d| d[k]);
            let g = if decayed { grad[k] + l2 * params[k] } else { grad[k] };
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            params[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.02, 1e3] {
            let mut s = AdamState::new(1, AdamConfig::with_lr(0.01));
            let mut p = [1.0];
            s.step(&mut p, &[g], 0.0, None).unwrap();
            let moved = 1.0 - p[0];
            assert!((moved - 0.01 * g / (g.abs() + 1e-8)).abs() < 1e-15);
            assert!((moved.abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_fixed_point() {
        let mut s = AdamState::new(3, AdamConfig::default());
        let mut p = [1.0, -2.0, 0.5];
        for _ in 0..10 {
            s.step(&mut p, &[0.0; 3], 0.0, None).unwrap();
        }
        assert_eq!(p, [1.0, -2.0, 0.5]);
        assert_eq!(s.steps_taken(), 10);
    }

    #[test]
    fn weight_decay_shrinks_and_respects_mask() {
        let mut s = AdamState::new(3, AdamConfig::with_lr(0.01));
        let mut p = [1.0, -2.0, 0.5];
        let mask = [true, true, false];
        for _ in 0..20 {
            s.step(&mut p, &[0.0; 3], 0.1, Some(&mask)).unwrap();
        }
        assert!(p[0] < 1.0 && p[0] > 0.0);
        assert!(p[1] > -2.0 && p[1] < 0.0);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn rejects_bad_input() {
        let mut s = AdamState::new(2, AdamConfig::default());
        let mut p = [0.0, 0.0];
        assert!(matches!(s.step(&mut p, &[f64::NAN, 0.0], 0.0, None), Err(Error::Numeric(_))));
        assert!(matches!(s.step(&mut p, &[0.0], 0.0, None), Err(Error::Shape(_))));
    }
}
