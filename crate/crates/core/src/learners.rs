//! Nuisance learners usable by the cross-fitting driver.

use std::sync::Arc;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{Fitted, Learner, Need};
use crate::forest::{fit_forest, fit_local_regression_forest, fit_regression_forest, RegressionForest, RieszForest, RieszForestConfig};
use crate::moments::{plugin_rr_binary, plugin_rr_stein, FunctionOracle, MomentFunctional, VARIANCE_FLOOR};
use crate::riesznet::{train, RieszNet, RieszNetConfig, RieszNetFile};
use crate::rng::RngSeed;

/// Learner selection as it appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearnerSpec {
    Riesznet {
        #[serde(default)]
        config: RieszNetConfig,
    },
    Forestriesz {
        #[serde(default)]
        config: RieszForestConfig,
    },
    PluginBinary {
        #[serde(default)]
        config: RieszForestConfig,
    },
    PluginStein {
        #[serde(default)]
        config: RieszForestConfig,
    },
}

impl LearnerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerSpec::Riesznet { .. } => "riesznet",
            LearnerSpec::Forestriesz { .. } => "forestriesz",
            LearnerSpec::PluginBinary { .. } => "plugin_binary",
            LearnerSpec::PluginStein { .. } => "plugin_stein",
        }
    }

    /// Default-configured learner by name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "riesznet" => Ok(LearnerSpec::Riesznet { config: RieszNetConfig::default() }),
            "forestriesz" => Ok(LearnerSpec::Forestriesz { config: RieszForestConfig::default() }),
            "plugin_binary" => Ok(LearnerSpec::PluginBinary { config: RieszForestConfig::default() }),
            "plugin_stein" => Ok(LearnerSpec::PluginStein { config: RieszForestConfig::default() }),
            other => Err(Error::Argument(format!("unknown learner '{other}'"))),
        }
    }

    /// Fits the learner and keeps the concrete, serializable result.
    pub fn fit_model(&self, data: &Dataset, moment: &MomentFunctional, need: Need, seed: RngSeed) -> Result<FittedModel> {
        Ok(match self {
            LearnerSpec::Riesznet { config } => {
                FittedModel::Riesznet(RieszNetLearner { config: config.clone() }.fit_net(data, moment, seed)?)
            }
            LearnerSpec::Forestriesz { config } => {
                FittedModel::Forestriesz(ForestRieszLearner { config: config.clone() }.fit_forests(data, moment, need, seed)?)
            }
            LearnerSpec::PluginBinary { config } => FittedModel::Plugin(
                PluginLearner {
                    kind: PluginKind::Binary,
                    config: config.clone(),
                }
                .fit_plugin(data, moment, need, seed)?,
            ),
            LearnerSpec::PluginStein { config } => FittedModel::Plugin(
                PluginLearner {
                    kind: PluginKind::Stein,
                    config: config.clone(),
                }
                .fit_plugin(data, moment, need, seed)?,
            ),
        })
    }

    pub fn build(&self) -> Box<dyn Learner> {
        match self {
            LearnerSpec::Riesznet { config } => Box::new(RieszNetLearner { config: config.clone() }),
            LearnerSpec::Forestriesz { config } => Box::new(ForestRieszLearner { config: config.clone() }),
            LearnerSpec::PluginBinary { config } => Box::new(PluginLearner {
                kind: PluginKind::Binary,
                config: config.clone(),
            }),
            LearnerSpec::PluginStein { config } => Box::new(PluginLearner {
                kind: PluginKind::Stein,
                config: config.clone(),
            }),
        }
    }
}

pub struct RieszNetLearner {
    pub config: RieszNetConfig,
}

impl Learner for RieszNetLearner {
    fn name(&self) -> String {
        "riesznet".into()
    }

    fn multitask(&self) -> bool {
        true
    }

    fn fit(&self, data: &Dataset, moment: &MomentFunctional, _need: Need, seed: RngSeed) -> Result<Box<dyn Fitted>> {
        Ok(Box::new(self.fit_net(data, moment, seed)?))
    }
}

impl RieszNetLearner {
    pub fn fit_net(&self, data: &Dataset, moment: &MomentFunctional, seed: RngSeed) -> Result<RieszNet> {
        let config = RieszNetConfig {
            seed,
            ..self.config.clone()
        };
        train(data, moment, &config)
    }
}

impl Fitted for RieszNet {
    fn regression(&self) -> Option<Box<dyn FunctionOracle + '_>> {
        Some(Box::new(self.g_oracle()))
    }

    fn riesz(&self) -> Option<Box<dyn FunctionOracle + '_>> {
        Some(Box::new(self.alpha_oracle()))
    }
}

/// ForestRiesz. Without multitasking the regression is a separate forest,
/// locally linear in the same treatment features.
pub struct ForestRieszLearner {
    pub config: RieszForestConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestFit {
    pub riesz: Option<RieszForest>,
    pub regression: Option<RieszForest>,
}

impl Learner for ForestRieszLearner {
    fn name(&self) -> String {
        "forestriesz".into()
    }

    fn multitask(&self) -> bool {
        self.config.multitask
    }

    fn fit(&self, data: &Dataset, moment: &MomentFunctional, need: Need, seed: RngSeed) -> Result<Box<dyn Fitted>> {
        Ok(Box::new(self.fit_forests(data, moment, need, seed)?))
    }
}

impl ForestRieszLearner {
    pub fn fit_forests(&self, data: &Dataset, moment: &MomentFunctional, need: Need, seed: RngSeed) -> Result<ForestFit> {
        let with_seed = |s: RngSeed| RieszForestConfig {
            seed: s,
            ..self.config.clone()
        };
        if self.config.multitask {
            return Ok(ForestFit {
                riesz: Some(fit_forest(data, moment, &with_seed(seed.derive(0)))?),
                regression: None,
            });
        }
        let riesz = need
            .riesz()
            .then(|| fit_forest(data, moment, &with_seed(seed.derive(0))))
            .transpose()?;
        let regression = need
            .regression()
            .then(|| fit_local_regression_forest(data, moment, &with_seed(seed.derive(1))))
            .transpose()?;
        Ok(ForestFit { riesz, regression })
    }
}

impl Fitted for ForestFit {
    fn regression(&self) -> Option<Box<dyn FunctionOracle + '_>> {
        let f = self.regression.as_ref().or(self.riesz.as_ref())?;
        Some(Box::new(f.g_oracle().ok()?))
    }

    fn riesz(&self) -> Option<Box<dyn FunctionOracle + '_>> {
        Some(Box::new(self.riesz.as_ref()?.alpha_oracle()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PluginKind {
    /// Inverse propensity weights from a forest estimate of `P(T = 1 | X)`.
    Binary,
    /// `(t − μ̂(x)) / σ̂²(x)` from forests of `T` and `(T − μ̂)²` on `X`.
    Stein,
}

/// Analytic representer fed with forest-estimated treatment models.
pub struct PluginLearner {
    pub kind: PluginKind,
    pub config: RieszForestConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginFit {
    kind: PluginKind,
    regression: Option<RieszForest>,
    mean: Option<RegressionForest>,
    variance: Option<RegressionForest>,
}

impl Learner for PluginLearner {
    fn name(&self) -> String {
        match self.kind {
            PluginKind::Binary => "plugin_binary".into(),
            PluginKind::Stein => "plugin_stein".into(),
        }
    }

    fn fit(&self, data: &Dataset, moment: &MomentFunctional, need: Need, seed: RngSeed) -> Result<Box<dyn Fitted>> {
        Ok(Box::new(self.fit_plugin(data, moment, need, seed)?))
    }
}

impl PluginLearner {
    pub fn fit_plugin(&self, data: &Dataset, moment: &MomentFunctional, need: Need, seed: RngSeed) -> Result<PluginFit> {
        let with_seed = |s: RngSeed| RieszForestConfig {
            seed: s,
            multitask: false,
            ..self.config.clone()
        };
        moment.check_dataset(data)?;
        let regression = need
            .regression()
            .then(|| fit_local_regression_forest(data, moment, &with_seed(seed.derive(1))))
            .transpose()?;
        let (mut mean, mut variance) = (None, None);
        if need.riesz() {
            let m = fit_regression_forest(data.x().view(), data.t(), &with_seed(seed.derive(2)))?;
            if self.kind == PluginKind::Stein {
                let mu = m.predict_batch(data.x().view())?;
                let r2: Vec<f64> = data.t().iter().zip(&mu).map(|(t, m)| (t - m).powi(2)).collect();
                variance = Some(fit_regression_forest(data.x().view(), &r2, &with_seed(seed.derive(3)))?);
            }
            mean = Some(m);
        }
        Ok(PluginFit {
            kind: self.kind,
            regression,
            mean,
            variance,
        })
    }
}

impl Fitted for PluginFit {
    fn regression(&self) -> Option<Box<dyn FunctionOracle + '_>> {
        Some(Box::new(self.regression.as_ref()?.g_oracle().ok()?))
    }

    fn riesz(&self) -> Option<Box<dyn FunctionOracle + '_>> {
        self.mean.as_ref()?;
        if self.kind == PluginKind::Stein {
            self.variance.as_ref()?;
        }
        Some(Box::new(PluginOracle(self)))
    }
}

struct PluginOracle<'a>(&'a PluginFit);

impl FunctionOracle for PluginOracle<'_> {
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match ArrayView2::from_shape((1, x.len()), x) {
            Ok(v) => self.eval_batch(&[t], v)[0],
            Err(_) => f64::NAN,
        }
    }

    fn eval_batch(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Vec<f64> {
        let fit = self.0;
        let result = (|| -> Result<Vec<f64>> {
            let mean = fit.mean.as_ref().expect("checked by riesz()").predict_batch(x)?;
            match fit.kind {
                PluginKind::Binary => t.iter().zip(&mean).map(|(&t, &p)| plugin_rr_binary(p, t)).collect(),
                PluginKind::Stein => {
                    let var = fit.variance.as_ref().expect("checked by riesz()").predict_batch(x)?;
                    (0..t.len())
                        .map(|i| plugin_rr_stein(mean[i], var[i].max(2.0 * VARIANCE_FLOOR), t[i]))
                        .collect()
                }
            }
        })();
        result.unwrap_or_else(|e| {
            log::warn!("plug-in representer failed: {e}");
            vec![f64::NAN; t.len()]
        })
    }

    fn dt(&self, t: f64, x: &[f64]) -> Option<f64> {
        let v = ArrayView2::from_shape((1, x.len()), x).ok()?;
        self.dt_batch(&[t], v).map(|d| d[0])
    }

    fn has_exact_dt(&self) -> bool {
        self.0.kind == PluginKind::Stein
    }

    fn dt_batch(&self, _t: &[f64], x: ArrayView2<'_, f64>) -> Option<Vec<f64>> {
        if self.0.kind != PluginKind::Stein {
            return None;
        }
        let var = self.0.variance.as_ref()?.predict_batch(x).ok()?;
        Some(var.iter().map(|v| 1.0 / v.max(2.0 * VARIANCE_FLOOR)).collect())
    }
}

/// A fitted learner of any kind, with a JSON form.
#[derive(Debug, Clone)]
pub enum FittedModel {
    Riesznet(RieszNet),
    Forestriesz(ForestFit),
    Plugin(PluginFit),
}

pub const MODEL_FORMAT: &str = "riesz-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "learner", rename_all = "snake_case")]
enum ModelBody {
    Riesznet { net: RieszNetFile },
    Forestriesz { forests: ForestFit },
    Plugin { plugin: PluginFit },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    model: ModelBody,
}

impl FittedModel {
    pub fn as_fitted(&self) -> &dyn Fitted {
        match self {
            FittedModel::Riesznet(n) => n,
            FittedModel::Forestriesz(f) => f,
            FittedModel::Plugin(p) => p,
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        let model = match self {
            FittedModel::Riesznet(n) => ModelBody::Riesznet { net: n.to_file() },
            FittedModel::Forestriesz(f) => ModelBody::Forestriesz { forests: f.clone() },
            FittedModel::Plugin(p) => ModelBody::Plugin { plugin: p.clone() },
        };
        serde_json::to_value(ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model,
        })
        .expect("model serializes")
    }

    pub fn from_value(v: serde_json::Value) -> Result<Self> {
        let file: ModelFile = serde_json::from_value(v).map_err(|e| Error::Format(format!("model file: {e}")))?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model file {} v{}", file.format, file.version)));
        }
        Ok(match file.model {
            ModelBody::Riesznet { net } => FittedModel::Riesznet(RieszNet::from_file(&net)?),
            ModelBody::Forestriesz { forests } => {
                for f in forests.riesz.iter().chain(&forests.regression) {
                    RieszForest::from_json(&f.to_json())?;
                }
                FittedModel::Forestriesz(forests)
            }
            ModelBody::Plugin { plugin } => FittedModel::Plugin(plugin),
        })
    }
}

/// Returns fixed nuisances regardless of the training data.
#[derive(Clone)]
pub struct OracleLearner {
    pub regression: Arc<dyn FunctionOracle>,
    pub riesz: Arc<dyn FunctionOracle>,
}

struct OracleFit(OracleLearner);

impl Learner for OracleLearner {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn fit(&self, _: &Dataset, _: &MomentFunctional, _: Need, _: RngSeed) -> Result<Box<dyn Fitted>> {
        Ok(Box::new(OracleFit(self.clone())))
    }
}

impl Fitted for OracleFit {
    fn regression(&self) -> Option<Box<dyn FunctionOracle + '_>> {
        Some(Box::new(&*self.0.regression))
    }

    fn riesz(&self) -> Option<Box<dyn FunctionOracle + '_>> {
        Some(Box::new(&*self.0.riesz))
    }
}
