use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{Dgp, DgpSpec};
use crate::error::{Error, Result};
use crate::estimators::{crossfit_estimates, Estimate, Learner, Method, Nuisances};
use crate::folds::{make_folds, FoldScheme, DEFAULT_K};
use crate::learners::{LearnerSpec, OracleLearner};
use crate::rng::RngSeed;

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_scheme() -> FoldScheme {
    FoldScheme::Simple
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_reps() -> usize {
    100
}

fn default_level() -> f64 {
    crate::estimators::DEFAULT_LEVEL
}

/// Which nuisance learner an experiment uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExperimentLearner {
    /// True `g₀` and `α₀` of the DGP.
    Oracle(OracleTag),
    Fitted(LearnerSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleTag {
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dgp: DgpSpec,
    pub learner: ExperimentLearner,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_scheme")]
    pub scheme: FoldScheme,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_reps")]
    pub n_reps: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_level")]
    pub level: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.n_reps == 0 {
            return Err(Error::Argument("n_reps must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Argument("no estimation methods requested".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Argument(format!("confidence level {} outside (0, 1)", self.level)));
        }
        Ok(())
    }
}

/// One method's result in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepEstimate {
    pub method: Method,
    pub theta: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl RepEstimate {
    fn from_estimate(e: &Estimate, level: f64) -> Self {
        let (ci_lo, ci_hi) = e.ci_at(level);
        RepEstimate {
            method: e.method,
            theta: e.theta,
            se: e.se,
            ci_lo,
            ci_hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub rep: usize,
    pub seed: u64,
    pub theta_true: f64,
    pub estimates: Vec<RepEstimate>,
    /// Set when the replication failed; `estimates` is then empty.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mae: f64,
    pub n_reps: usize,
    pub mean_se: f64,
}

impl MetricsRow {
    /// Aggregates `(estimate, truth)` pairs in the order given.
    pub fn from_estimates<'a>(method: Method, items: impl IntoIterator<Item = (&'a RepEstimate, f64)>) -> Option<Self> {
        let mut n = 0usize;
        let (mut bias, mut sq, mut abs, mut covered, mut se) = (Kahan::default(), Kahan::default(), Kahan::default(), 0usize, Kahan::default());
        for (e, truth) in items {
            let err = e.theta - truth;
            bias.add(err);
            sq.add(err * err);
            abs.add(err.abs());
            se.add(e.se);
            if e.ci_lo <= truth && truth <= e.ci_hi {
                covered += 1;
            }
            n += 1;
        }
        if n == 0 {
            return None;
        }
        let k = n as f64;
        Some(MetricsRow {
            method,
            bias: bias.sum() / k,
            rmse: (sq.sum() / k).sqrt(),
            coverage: covered as f64 / k,
            mae: abs.sum() / k,
            n_reps: n,
            mean_se: se.sum() / k,
        })
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, v: f64) {
        let y = v - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    fn sum(&self) -> f64 {
        self.sum
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub theta_true: f64,
    pub rows: Vec<MetricsRow>,
    pub failures: usize,
    pub replications: Vec<Replication>,
}

impl ExperimentReport {
    pub fn row(&self, method: Method) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("experiment report: {e}")))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn write_metrics_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_metrics_csv(&self.rows, path)
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn run_one(config: &ExperimentConfig, dgp: &Dgp, learner: &dyn Learner, rep: usize) -> Result<Replication> {
    let seed = config.base_seed.wrapping_add(rep as u64);
    let generated = dgp.generate(RngSeed(seed))?;
    let folds = make_folds(generated.data.n(), config.scheme, config.k, RngSeed(seed).derive(1))?;
    let nuisances = if config.scheme == FoldScheme::Double {
        Nuisances::Separate {
            regression: learner,
            riesz: learner,
        }
    } else {
        Nuisances::Joint(learner)
    };
    let estimates = crossfit_estimates(
        &generated.data,
        nuisances,
        &dgp.moment(),
        &folds,
        &config.methods,
        RngSeed(seed).derive(2),
    )?;
    Ok(Replication {
        rep,
        seed,
        theta_true: generated.theta_true,
        estimates: estimates.iter().map(|e| RepEstimate::from_estimate(e, config.level)).collect(),
        error: None,
    })
}

/// Runs every replication (in parallel) and aggregates per-method metrics.
/// Failed replications are logged, counted and excluded from the metrics.
pub fn run_replications(config: &ExperimentConfig, dgp: &Dgp) -> Result<ExperimentReport> {
    config.validate()?;
    if dgp.spec() != &config.dgp {
        return Err(Error::Argument("DGP does not match the experiment config".into()));
    }
    let learner: Box<dyn Learner> = match &config.learner {
        ExperimentLearner::Oracle(_) => {
            let truth = dgp
                .truth()
                .ok_or_else(|| Error::Incompatible("this DGP has no closed-form nuisances for the oracle learner".into()))?;
            Box::new(OracleLearner {
                regression: truth.regression,
                riesz: truth.riesz,
            })
        }
        ExperimentLearner::Fitted(spec) => spec.build(),
    };
    if config.scheme == FoldScheme::Double && learner.multitask() {
        return Err(Error::Incompatible(format!(
            "{} is multitask and cannot be used with double cross-fitting",
            learner.name()
        )));
    }
    let theta_true = dgp.theta_true();
    let replications: Vec<Replication> = (0..config.n_reps)
        .into_par_iter()
        .map(|rep| {
            run_one(config, dgp, &*learner, rep).unwrap_or_else(|e| {
                log::warn!("replication {rep} failed: {e}");
                Replication {
                    rep,
                    seed: config.base_seed.wrapping_add(rep as u64),
                    theta_true,
                    estimates: Vec::new(),
                    error: Some(e.to_string()),
                }
            })
        })
        .collect();
    let failures = replications.iter().filter(|r| r.error.is_some()).count();
    if failures > 0 {
        log::warn!("{failures} of {} replications failed", config.n_reps);
    }
    let rows: Vec<MetricsRow> = config
        .methods
        .iter()
        .filter_map(|&m| {
            MetricsRow::from_estimates(
                m,
                replications
                    .iter()
                    .flat_map(|r| r.estimates.iter().filter(move |e| e.method == m).map(move |e| (e, r.theta_true))),
            )
        })
        .collect();
    if rows.is_empty() {
        let first = replications.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(Error::Training {
            stage: "replications",
            epoch: 0,
            message: format!("all {} replications failed; first error: {first}", config.n_reps),
        });
    }
    Ok(ExperimentReport {
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        theta_true,
        rows,
        failures,
        replications,
    })
}
