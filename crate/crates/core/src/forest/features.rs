use serde::{Deserialize, Serialize};

use crate::moments::MomentKind;

/// Treatment features the local Riesz and regression models are linear in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// `(1 − t, t)`.
    BinaryIndicators,
    /// `(1, t, t², …, tᵖ)`.
    Polynomial { degree: usize },
}

impl FeatureMap {
    pub fn default_for(kind: MomentKind) -> Self {
        if kind.is_derivative() {
            FeatureMap::Polynomial { degree: 3 }
        } else {
            FeatureMap::BinaryIndicators
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureMap::BinaryIndicators => 2,
            FeatureMap::Polynomial { degree } => degree + 1,
        }
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        match self {
            FeatureMap::BinaryIndicators => {
                out[0] = 1.0 - t;
                out[1] = t;
            }
            FeatureMap::Polynomial { degree } => {
                let mut p = 1.0;
                for slot in out.iter_mut().take(degree + 1) {
                    *slot = p;
                    p *= t;
                }
            }
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out);
        out
    }

    /// `∂φ/∂t`.
    pub fn derivative(&self, t: f64) -> Vec<f64> {
        match self {
            FeatureMap::BinaryIndicators => vec![-1.0, 1.0],
            FeatureMap::Polynomial { degree } => {
                let mut out = vec![0.0; degree + 1];
                let mut p = 1.0;
                for (k, slot) in out.iter_mut().enumerate().skip(1) {
                    *slot = k as f64 * p;
                    p *= t;
                }
                out
            }
        }
    }
}
