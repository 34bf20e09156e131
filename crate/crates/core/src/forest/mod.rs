//! Random forest learner of a locally linear Riesz representer
//! `α(t, x) = ⟨φ(t), β(x)⟩`, optionally paired with a locally linear
//! regression `g(t, x) = ⟨φ(t), γ(x)⟩`.
//!
//! Trees split on covariates only. Each node solves the local system
//! `β = (J + l2·I)⁻¹ M` with `J = mean φφᵀ` and `M = mean m(W; φ)`, and a
//! split is scored by `Σ_child n_c · βᵀ J β`, which is minus the minimized
//! empirical Riesz loss of the piecewise solution. Predictions average the
//! leaf statistics `(J, M)` over trees before solving.

mod features;
mod forest;
mod tree;

pub use features::FeatureMap;
pub use forest::{
    fit_forest, fit_local_regression_forest, fit_regression_forest, ForestHead, ForestOracle, RegressionForest, RieszForest, FOREST_FORMAT,
    FOREST_VERSION,
};
pub use tree::{best_split, leaf_solve, split_criterion, LeafStats, Node, NodeSums, Objective, SampleData, SplitCandidate, SplitContext, Tree};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngSeed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RieszForestConfig {
    pub n_trees: usize,
    /// Minimum samples per leaf, enforced on both honest halves.
    pub min_samples_leaf: usize,
    /// Fraction of rows subsampled (without replacement) for each tree.
    pub max_samples: f64,
    pub honest: bool,
    /// A split must improve the normalized criterion by more than this.
    pub min_impurity_decrease: f64,
    /// Ridge added to `J` in every Riesz solve.
    pub l2: f64,
    /// Ridge for the local regression solve at prediction time. Zero keeps
    /// the local least squares exact.
    pub regression_l2: f64,
    /// Also fit the local regression (and let it drive splits).
    pub multitask: bool,
    /// Weight of the normalized regression gain in multitask splitting.
    pub regression_weight: f64,
    /// `None` picks the default map for the moment.
    pub feature_map: Option<FeatureMap>,
    /// Candidate covariates per node; `None` means all of them.
    pub max_features: Option<usize>,
    pub max_depth: Option<usize>,
    pub seed: RngSeed,
}

impl Default for RieszForestConfig {
    fn default() -> Self {
        RieszForestConfig {
            n_trees: 100,
            min_samples_leaf: 50,
            max_samples: 0.65,
            honest: true,
            min_impurity_decrease: 1e-3,
            l2: 1e-3,
            regression_l2: 0.0,
            multitask: false,
            regression_weight: 1.0,
            feature_map: None,
            max_features: None,
            max_depth: None,
            seed: RngSeed(0),
        }
    }
}

impl RieszForestConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Argument(format!("forest config: {msg}")));
        if self.n_trees == 0 || self.min_samples_leaf == 0 {
            return bad("n_trees and min_samples_leaf must be at least 1");
        }
        if !(self.max_samples > 0.0 && self.max_samples <= 1.0) {
            return bad("max_samples must lie in (0, 1]");
        }
        for (name, v) in [
            ("l2", self.l2),
            ("regression_l2", self.regression_l2),
            ("min_impurity_decrease", self.min_impurity_decrease),
            ("regression_weight", self.regression_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        if self.max_features == Some(0) || self.max_depth == Some(0) {
            return bad("max_features and max_depth must be positive when set");
        }
        if let Some(FeatureMap::Polynomial { degree }) = self.feature_map {
            if degree > 8 {
                return bad("polynomial degree above 8 is not supported");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
