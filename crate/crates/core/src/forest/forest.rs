use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{Objective, SampleData, Tree};
use super::{FeatureMap, RieszForestConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, solve_ridge};
use crate::moments::{FunctionOracle, MomentFunctional};

pub const FOREST_FORMAT: &str = "riesz-forest";
pub const FOREST_VERSION: u32 = 1;

/// Fitted forest. Serializes as a versioned JSON document holding the
/// config, the feature map and every tree's node array and leaf statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RieszForest {
    pub format: String,
    pub version: u32,
    pub config: RieszForestConfig,
    pub feature_map: FeatureMap,
    pub objective: Objective,
    pub covariates: usize,
    pub trees: Vec<Tree>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForestHead {
    Riesz,
    Regression,
}

/// Fits the Riesz forest (plus the local regression when `multitask`).
pub fn fit_forest(data: &Dataset, moment: &MomentFunctional, config: &RieszForestConfig) -> Result<RieszForest> {
    config.validate()?;
    let map = config.feature_map.unwrap_or_else(|| FeatureMap::default_for(moment.kind()));
    let samples = SampleData::prepare(data, moment, map)?;
    let objective = if config.multitask {
        Objective::Multitask {
            regression_weight: config.regression_weight,
        }
    } else {
        Objective::Riesz
    };
    grow_forest(&samples, config, map, objective)
}

/// Regression of `y` on `(t, x)` that is locally linear in the moment's
/// feature map, splitting on the regression criterion alone.
pub fn fit_local_regression_forest(
    data: &Dataset,
    moment: &MomentFunctional,
    config: &RieszForestConfig,
) -> Result<RieszForest> {
    config.validate()?;
    let map = config.feature_map.unwrap_or_else(|| FeatureMap::default_for(moment.kind()));
    let samples = SampleData::prepare(data, moment, map)?;
    grow_forest(&samples, config, map, Objective::Regression)
}

/// Honest regression forest of `y` on covariates (constant local model).
pub fn fit_regression_forest(x: ArrayView2<'_, f64>, y: &[f64], config: &RieszForestConfig) -> Result<RegressionForest> {
    config.validate()?;
    let samples = SampleData::regression(x.to_owned(), y.to_vec())?;
    let cfg = RieszForestConfig {
        multitask: false,
        feature_map: Some(FeatureMap::Polynomial { degree: 0 }),
        ..config.clone()
    };
    Ok(RegressionForest(grow_forest(
        &samples,
        &cfg,
        FeatureMap::Polynomial { degree: 0 },
        Objective::Regression,
    )?))
}

fn grow_forest(s: &SampleData, config: &RieszForestConfig, map: FeatureMap, objective: Objective) -> Result<RieszForest> {
    let n = s.n();
    let size = ((config.max_samples * n as f64).round() as usize).clamp(1, n.max(1));
    let need = if config.honest { 2 * config.min_samples_leaf } else { config.min_samples_leaf };
    if n == 0 || size < need {
        return Err(Error::Validation(format!(
            "{n} rows subsample to {size} per tree, below the {need} needed for min_samples_leaf = {}",
            config.min_samples_leaf
        )));
    }
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|b| {
            let seed = config.seed.derive(b as u64);
            let mut rng = seed.derive(0).rng();
            let mut rows = rand::seq::index::sample(&mut rng, n, size).into_vec();
            rows.shuffle(&mut rng);
            let (split_idx, est_idx) = if config.honest {
                let est = rows.split_off(size / 2);
                (rows, est)
            } else {
                (rows.clone(), rows)
            };
            Tree::grow(s, split_idx, est_idx, config, objective, seed.derive(1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RieszForest {
        format: FOREST_FORMAT.into(),
        version: FOREST_VERSION,
        config: config.clone(),
        feature_map: map,
        objective,
        covariates: s.d(),
        trees,
    })
}

impl RieszForest {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn has_regression(&self) -> bool {
        self.objective.keeps_regression()
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.covariates {
            return Err(Error::Shape(format!("expected {} covariates, got {}", self.covariates, x.len())));
        }
        Ok(())
    }

    /// Tree-averaged leaf statistics `(J̄(x), M̄(x), R̄(x))`.
    pub fn aggregate(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)> {
        self.check_x(x)?;
        let k = self.feature_map.dim();
        let mut j = vec![0.0; k * k];
        let mut m = vec![0.0; k];
        let mut r = self.has_regression().then(|| vec![0.0; k]);
        let w = 1.0 / self.trees.len() as f64;
        for tree in &self.trees {
            let leaf = tree.leaf_for(x);
            for (a, b) in j.iter_mut().zip(&leaf.jacobian) {
                *a += w * b;
            }
            for (a, b) in m.iter_mut().zip(&leaf.moment) {
                *a += w * b;
            }
            if let (Some(r), Some(lr)) = (r.as_mut(), leaf.regression.as_ref()) {
                for (a, b) in r.iter_mut().zip(lr) {
                    *a += w * b;
                }
            }
        }
        Ok((j, m, r))
    }

    /// Local coefficients `β(x)` (Riesz) or `γ(x)` (regression).
    pub fn coefficients(&self, x: &[f64], head: ForestHead) -> Result<Vec<f64>> {
        let (j, m, r) = self.aggregate(x)?;
        let numeric = |e: Error| Error::Numeric(format!("aggregated local system: {e}"));
        match head {
            ForestHead::Riesz => solve_ridge(&j, &m, self.config.l2).map_err(numeric),
            ForestHead::Regression => {
                let r = r.ok_or_else(|| Error::Incompatible("forest was fit without a regression".into()))?;
                match solve_ridge(&j, &r, self.config.regression_l2) {
                    Ok(g) => Ok(g),
                    Err(Error::Degenerate(msg)) if self.config.regression_l2 < self.config.l2 => {
                        log::warn!("local regression is singular ({msg}); retrying with ridge {}", self.config.l2);
                        solve_ridge(&j, &r, self.config.l2).map_err(numeric)
                    }
                    Err(e) => Err(numeric(e)),
                }
            }
        }
    }

    pub fn predict_beta(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.coefficients(x, ForestHead::Riesz)
    }

    pub fn predict_alpha(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(dot(&self.feature_map.eval(t), &self.predict_beta(x)?))
    }

    pub fn predict_g(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(dot(&self.feature_map.eval(t), &self.coefficients(x, ForestHead::Regression)?))
    }

    /// Coefficients for every row; consecutive identical rows are solved once.
    pub fn coefficients_batch(&self, x: ArrayView2<'_, f64>, head: ForestHead) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        let starts: Vec<usize> = (0..rows.len()).filter(|&i| i == 0 || rows[i] != rows[i - 1]).collect();
        let solved = starts
            .par_iter()
            .map(|&i| self.coefficients(&rows[i], head))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(rows.len());
        let mut s = 0;
        for i in 0..rows.len() {
            if s + 1 < starts.len() && starts[s + 1] == i {
                s += 1;
            }
            out.push(solved[s].clone());
        }
        Ok(out)
    }

    pub fn oracle(&self, head: ForestHead) -> ForestOracle<'_> {
        ForestOracle { forest: self, head }
    }

    pub fn alpha_oracle(&self) -> ForestOracle<'_> {
        self.oracle(ForestHead::Riesz)
    }

    pub fn g_oracle(&self) -> Result<ForestOracle<'_>> {
        if !self.has_regression() {
            return Err(Error::Incompatible("forest was fit without a regression".into()));
        }
        Ok(self.oracle(ForestHead::Regression))
    }

    fn validate(&self) -> Result<()> {
        if self.format != FOREST_FORMAT || self.version != FOREST_VERSION {
            return Err(Error::Format(format!("unsupported forest file {} v{}", self.format, self.version)));
        }
        if self.trees.is_empty() {
            return Err(Error::Format("forest without trees".into()));
        }
        let k = self.feature_map.dim();
        for (i, t) in self.trees.iter().enumerate() {
            t.validate(self.covariates, k).map_err(|e| Error::Format(format!("tree {i}: {e}")))?;
            if self.has_regression() && t.leaves.iter().any(|l| l.regression.is_none()) {
                return Err(Error::Format(format!("tree {i}: leaf lacks regression statistics")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("forest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: RieszForest = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        f.validate()?;
        Ok(f)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// A forest head as a function of `(t, x)`. Failed solves surface as NaN.
#[derive(Debug, Clone, Copy)]
pub struct ForestOracle<'a> {
    forest: &'a RieszForest,
    head: ForestHead,
}

impl ForestOracle<'_> {
    fn combine(&self, t: &[f64], x: ArrayView2<'_, f64>, derivative: bool) -> Vec<f64> {
        match self.forest.coefficients_batch(x, self.head) {
            Ok(coefs) => t
                .iter()
                .zip(&coefs)
                .map(|(&ti, c)| {
                    let phi = if derivative {
                        self.forest.feature_map.derivative(ti)
                    } else {
                        self.forest.feature_map.eval(ti)
                    };
                    dot(&phi, c)
                })
                .collect(),
            Err(e) => {
                log::warn!("forest evaluation failed: {e}");
                vec![f64::NAN; t.len()]
            }
        }
    }
}

impl FunctionOracle for ForestOracle<'_> {
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match ArrayView2::from_shape((1, x.len()), x) {
            Ok(v) => self.combine(&[t], v, false)[0],
            Err(_) => f64::NAN,
        }
    }

    fn eval_batch(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Vec<f64> {
        self.combine(t, x, false)
    }

    fn dt(&self, t: f64, x: &[f64]) -> Option<f64> {
        let v = ArrayView2::from_shape((1, x.len()), x).ok()?;
        Some(self.combine(&[t], v, true)[0])
    }

    fn has_exact_dt(&self) -> bool {
        true
    }

    fn dt_batch(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Option<Vec<f64>> {
        Some(self.combine(t, x, true))
    }
}

/// Forest estimate of `E[y | x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegressionForest(pub RieszForest);

impl RegressionForest {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.0.predict_g(0.0, x)
    }

    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self
            .0
            .coefficients_batch(x, ForestHead::Regression)?
            .into_iter()
            .map(|c| c[0])
            .collect())
    }

    pub fn predict_matrix(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        self.predict_batch(x.view())
    }
}
