//! Run configuration: a TOML or JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use riesz_core::dataset::{load_csv, read_header};
use riesz_core::estimators::{Method, DEFAULT_LEVEL};
use riesz_core::experiments::ExperimentConfig;
use riesz_core::folds::{FoldScheme, DEFAULT_K};
use riesz_core::learners::LearnerSpec;
use riesz_core::moments::{DerivativeMode, MomentKind, Policy, DEFAULT_FD_STEP};
use riesz_core::{Dataset, MomentFunctional, Schema, TreatmentKind};
use serde::{Deserialize, Serialize};

use crate::CliError;

fn default_y() -> String {
    "y".into()
}

fn default_t() -> String {
    "t".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    #[serde(default = "default_y")]
    pub y: String,
    #[serde(default = "default_t")]
    pub t: String,
    /// Covariate columns; empty means every column other than `y` and `t`.
    #[serde(default)]
    pub x: Vec<String>,
    pub treatment: TreatmentKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyConfig {
    Constant { value: f64 },
    Threshold { column: usize, threshold: f64, above: f64, below: f64 },
}

impl PolicyConfig {
    fn policy(&self) -> Policy {
        match *self {
            PolicyConfig::Constant { value } => Policy::Constant(value),
            PolicyConfig::Threshold {
                column,
                threshold,
                above,
                below,
            } => Policy::Threshold {
                column,
                threshold,
                above,
                below,
            },
        }
    }
}

fn default_fd_step() -> f64 {
    DEFAULT_FD_STEP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentConfig {
    pub kind: MomentKind,
    #[serde(default)]
    pub policy: Option<PolicyConfig>,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub derivative_mode: DerivativeMode,
}

impl MomentConfig {
    pub fn build(&self) -> Result<MomentFunctional, CliError> {
        let m = MomentFunctional::new(self.kind, self.policy.as_ref().map(PolicyConfig::policy))?
            .with_fd_step(self.fd_step)?
            .with_derivative_mode(self.derivative_mode);
        Ok(m)
    }
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_scheme() -> FoldScheme {
    FoldScheme::Simple
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_level() -> f64 {
    DEFAULT_LEVEL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_scheme")]
    pub scheme: FoldScheme,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Model file written by `fit`; when set, nuisances are not refit.
    #[serde(default)]
    pub model: Option<PathBuf>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            methods: default_methods(),
            scheme: default_scheme(),
            k: default_k(),
            level: default_level(),
            model: None,
        }
    }
}

/// Covariates (and optionally an observed treatment) for BHP-style designs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BhpSourceConfig {
    pub path: PathBuf,
    /// Covariate columns; empty means every column except the treatment ones.
    #[serde(default)]
    pub x: Vec<String>,
    /// Observed treatment, used to fit μ̂ and σ̂² by regression forests.
    #[serde(default)]
    pub t: Option<String>,
    /// Columns with pre-fitted treatment mean and variance.
    #[serde(default)]
    pub mu: Option<String>,
    #[serde(default)]
    pub sigma2: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub moment: Option<MomentConfig>,
    #[serde(default)]
    pub learner: Option<LearnerSpec>,
    #[serde(default)]
    pub estimate: EstimateConfig,
    #[serde(default)]
    pub experiment: Option<ExperimentConfig>,
    #[serde(default)]
    pub bhp_source: Option<BhpSourceConfig>,
}

impl RunConfig {
    /// Parses TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
    }

    pub fn data_config(&self) -> Result<&DataConfig, CliError> {
        self.data
            .as_ref()
            .ok_or_else(|| CliError::Config("a [data] section is required".into()))
    }

    pub fn load_data(&self) -> Result<Dataset, CliError> {
        let dc = self.data_config()?;
        let path = dc
            .path
            .as_ref()
            .ok_or_else(|| CliError::Config("no data path: set data.path or pass --data".into()))?;
        let x = if dc.x.is_empty() {
            read_header(path)?
                .into_iter()
                .filter(|c| c != &dc.y && c != &dc.t)
                .collect()
        } else {
            dc.x.clone()
        };
        let schema = Schema {
            y: dc.y.clone(),
            t: dc.t.clone(),
            x,
        };
        Ok(load_csv(path, &schema, dc.treatment)?)
    }

    /// The configured moment, defaulting to ATE or average derivative by treatment kind.
    pub fn moment(&self) -> Result<MomentFunctional, CliError> {
        match &self.moment {
            Some(m) => m.build(),
            None => Ok(match self.data_config()?.treatment {
                TreatmentKind::Binary => MomentFunctional::ate(),
                TreatmentKind::Continuous => MomentFunctional::avg_derivative(),
            }),
        }
    }

    pub fn learner(&self) -> Result<&LearnerSpec, CliError> {
        self.learner
            .as_ref()
            .ok_or_else(|| CliError::Config("a [learner] section or --learner is required".into()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}
