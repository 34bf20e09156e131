//! Multitask network that learns the regression function and the Riesz
//! representer of a moment functional through a shared representation.
//!
//! The input `(t, x)` passes through shared ELU layers `f₁`; the Riesz head is
//! the linear map `α(z) = ⟨f₁(z), β⟩` and the regression head is a further
//! ELU stack ending in a linear unit. A bi-headed net (binary treatment) feeds
//! only `x` to the shared layers and keeps one regression stack and one Riesz
//! coefficient vector per arm: `g = t·g₁(f₁) + (1 − t)·g₀(f₁)` and
//! `α = t·⟨f₁, β₁⟩ + (1 − t)·⟨f₁, β₀⟩`. Training minimizes
//! `REG + λ₁·RR + λ₂·TMLE + l2·‖w‖²` where the fluctuation coefficient `ε`
//! of the TMLE term is not penalized.

mod model;
mod train;

pub use model::{Head, LossBreakdown, NetOracle, RieszNet, RieszNetFile, Standardizer, RIESZNET_FORMAT, RIESZNET_VERSION};
pub use train::{train, EpochRecord};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngSeed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Minimum decrease of the monitored test loss that counts as progress.
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RieszNetConfig {
    pub shared_layers: usize,
    pub shared_width: usize,
    pub reg_layers: usize,
    pub reg_width: usize,
    /// Separate regression stacks per treatment arm. `None` turns them on
    /// exactly when the treatment is binary.
    pub bi_headed: Option<bool>,
    pub lambda_riesz: f64,
    pub lambda_tmle: f64,
    pub l2: f64,
    pub fast: StageConfig,
    pub fine: StageConfig,
    pub batch_size: usize,
    pub test_fraction: f64,
    pub seed: RngSeed,
}

impl Default for RieszNetConfig {
    fn default() -> Self {
        RieszNetConfig {
            shared_layers: 3,
            shared_width: 200,
            reg_layers: 2,
            reg_width: 100,
            bi_headed: None,
            lambda_riesz: 0.1,
            lambda_tmle: 1.0,
            l2: 1e-3,
            fast: StageConfig {
                lr: 1e-4,
                max_epochs: 100,
                patience: 2,
                tol: 1e-4,
            },
            fine: StageConfig {
                lr: 1e-5,
                max_epochs: 600,
                patience: 40,
                tol: 1e-4,
            },
            batch_size: 64,
            test_fraction: 0.2,
            seed: RngSeed(0),
        }
    }
}

impl RieszNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Argument(format!("riesznet config: {msg}")));
        if self.shared_layers == 0 || self.reg_layers == 0 {
            return bad("shared_layers and reg_layers must be at least 1");
        }
        if self.shared_width == 0 || self.reg_width == 0 || self.batch_size == 0 {
            return bad("widths and batch_size must be positive");
        }
        for (name, v) in [
            ("lambda_riesz", self.lambda_riesz),
            ("lambda_tmle", self.lambda_tmle),
            ("l2", self.l2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        for (name, s) in [("fast", &self.fast), ("fine", &self.fine)] {
            if !(s.lr.is_finite() && s.lr > 0.0) || !(s.tol.is_finite() && s.tol >= 0.0) {
                return bad(&format!("{name} stage needs lr > 0 and tol >= 0"));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    /// Same config with both stage epoch caps replaced.
    pub fn with_max_epochs(mut self, fast: usize, fine: usize) -> Self {
        self.fast.max_epochs = fast;
        self.fine.max_epochs = fine;
        self
    }
}
