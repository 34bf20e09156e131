use std::sync::{Arc, OnceLock};

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TreatmentKind};
use crate::error::{Error, Result};
use crate::forest::{fit_regression_forest, RieszForestConfig};
use crate::moments::{DiffFnOracle, FnOracle, FunctionOracle, MomentFunctional, VARIANCE_FLOOR};
use crate::rng::{Rng, RngSeed};

pub fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn normal(rng: &mut Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn uniform_matrix(rng: &mut Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
}

/// Seed of the Monte Carlo truth computation; fixed so every replication
/// shares one ground truth.
pub const TRUTH_SEED: RngSeed = RngSeed(0x7275_7468);
pub const TRUTH_DRAWS: usize = 1_000_000;

pub const BINARY_COVARIATES: usize = 10;
pub const CONTINUOUS_COVARIATES: usize = 2;
pub const BHP_COVARIATES: usize = 21;
pub const BHP_CUBIC_TERMS: usize = 9;

fn default_noise() -> f64 {
    1.0
}

fn default_r2() -> f64 {
    0.15
}

fn default_linear() -> usize {
    BHP_COVARIATES
}

/// Data-generating process, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DgpSpec {
    /// `Y = T + expit(10 X₁) + ε`, `P(T = 1 | X) = 0.5 + 0.3 expit(10 X₁)`, `X ~ U(−1, 1)¹⁰`.
    BinarySynthetic {
        n: usize,
        #[serde(default = "default_noise")]
        noise_sd: f64,
    },
    /// `Y = (X₁²/2 + 0.5) T³/3 + expit(10 X₁) + ε`, `T = 1 + 2 expit(10 X₁) + η`, `X ~ U(−1, 1)²`.
    ContinuousSynthetic {
        n: usize,
        #[serde(default = "default_noise")]
        noise_sd: f64,
    },
    /// Gasoline-demand style designs 1 to 6 with `T | X ~ N(μ(X), σ²(X))`.
    BhpDesign {
        design: u8,
        n: usize,
        /// Seed of the design coefficients `b` and `c`.
        #[serde(default)]
        coef_seed: u64,
        /// Simulated regression R² that calibrates the noise variance.
        #[serde(default = "default_r2")]
        target_r2: f64,
        /// Fixed noise standard deviation, overriding `target_r2`.
        #[serde(default)]
        noise_sd: Option<f64>,
        /// Number of covariates entering linearly.
        #[serde(default = "default_linear")]
        linear_columns: usize,
    },
}

impl DgpSpec {
    pub fn n(&self) -> usize {
        match *self {
            DgpSpec::BinarySynthetic { n, .. } | DgpSpec::ContinuousSynthetic { n, .. } | DgpSpec::BhpDesign { n, .. } => n,
        }
    }

    pub fn treatment_kind(&self) -> TreatmentKind {
        match self {
            DgpSpec::BinarySynthetic { .. } => TreatmentKind::Binary,
            _ => TreatmentKind::Continuous,
        }
    }

    /// ATE for binary designs, average derivative otherwise.
    pub fn moment(&self) -> MomentFunctional {
        match self {
            DgpSpec::BinarySynthetic { .. } => MomentFunctional::ate(),
            _ => MomentFunctional::avg_derivative(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n() == 0 {
            return Err(Error::Argument("DGP sample size must be positive".into()));
        }
        let check_sd = |sd: f64| {
            if sd >= 0.0 && sd.is_finite() {
                Ok(())
            } else {
                Err(Error::Argument(format!("noise_sd must be finite and >= 0, got {sd}")))
            }
        };
        match *self {
            DgpSpec::BinarySynthetic { noise_sd, .. } | DgpSpec::ContinuousSynthetic { noise_sd, .. } => check_sd(noise_sd),
            DgpSpec::BhpDesign {
                design,
                target_r2,
                noise_sd,
                linear_columns,
                ..
            } => {
                if !(1..=6).contains(&design) {
                    return Err(Error::Argument(format!("BHP design must be 1..6, got {design}")));
                }
                if !(target_r2 > 0.0 && target_r2 <= 1.0) {
                    return Err(Error::Argument(format!("target_r2 must be in (0, 1], got {target_r2}")));
                }
                if linear_columns < 8 {
                    return Err(Error::Argument("linear_columns must cover X₁..X₈".into()));
                }
                noise_sd.map_or(Ok(()), check_sd)
            }
        }
    }
}

/// Covariates and fitted treatment moments standing in for real survey data.
#[derive(Debug, Clone, PartialEq)]
pub struct BhpSource {
    pub x: Array2<f64>,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl BhpSource {
    pub fn new(x: Array2<f64>, mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if mu.len() != x.nrows() || sigma2.len() != x.nrows() {
            return Err(Error::Shape("treatment model values must have one entry per covariate row".into()));
        }
        if let Some(i) = (0..mu.len()).find(|&i| !mu[i].is_finite() || !(sigma2[i] > 0.0) || !sigma2[i].is_finite()) {
            return Err(Error::Validation(format!("row {i}: treatment mean must be finite and variance positive")));
        }
        Ok(BhpSource { x, mu, sigma2 })
    }

    /// μ̂ and σ̂² from regression forests of `T` and `(T − μ̂)²` on `X`.
    pub fn fit(x: Array2<f64>, t: &[f64], config: &RieszForestConfig) -> Result<Self> {
        let mean = fit_regression_forest(x.view(), t, config)?;
        let mu = mean.predict_batch(x.view())?;
        let r2: Vec<f64> = t.iter().zip(&mu).map(|(t, m)| (t - m).powi(2)).collect();
        let var_cfg = RieszForestConfig {
            seed: config.seed.derive(1),
            ..config.clone()
        };
        let sigma2 = fit_regression_forest(x.view(), &r2, &var_cfg)?
            .predict_batch(x.view())?
            .into_iter()
            .map(|v| v.max(VARIANCE_FLOOR))
            .collect();
        BhpSource::new(x, mu, sigma2)
    }
}

/// Outcome function of one BHP design with its drawn coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct BhpDesign {
    pub id: u8,
    /// Linear confounding coefficients, `U[−0.5, 0.5]`.
    pub b: Vec<f64>,
    /// Heterogeneity coefficients on `X₁..X₉`, `U[−0.2, 0.2]`.
    pub c: Vec<f64>,
}

impl BhpDesign {
    pub fn new(id: u8, linear_columns: usize, coef_seed: RngSeed) -> Result<Self> {
        if !(1..=6).contains(&id) {
            return Err(Error::Argument(format!("BHP design must be 1..6, got {id}")));
        }
        let mut rng = coef_seed.rng();
        let b = (0..linear_columns).map(|_| rng.random_range(-0.5..=0.5)).collect();
        let c = (0..BHP_CUBIC_TERMS).map(|_| rng.random_range(-0.2..=0.2)).collect();
        Ok(BhpDesign { id, b, c })
    }

    pub fn required_columns(&self) -> usize {
        self.b.len().max(BHP_CUBIC_TERMS).max(8)
    }

    fn linear(&self, x: &[f64]) -> f64 {
        if matches!(self.id, 2 | 3 | 5 | 6) {
            self.b.iter().zip(x).map(|(b, x)| b * x).sum()
        } else {
            0.0
        }
    }

    fn nonlinear(&self, x: &[f64]) -> f64 {
        if matches!(self.id, 3 | 6) {
            1.5 * expit(10.0 * x[5]) + 1.5 * expit(10.0 * x[7])
        } else {
            0.0
        }
    }

    /// Coefficient `a(x)` in `f = −a(x) T³/6 + …` for the complex designs.
    fn cubic(&self, x: &[f64]) -> f64 {
        let het = if self.id >= 5 {
            self.c.iter().zip(x).map(|(c, x)| c * x).sum()
        } else {
            0.0
        };
        x[0] * x[0] / 10.0 + het + 0.5
    }

    pub fn f(&self, t: f64, x: &[f64]) -> f64 {
        let effect = if self.id <= 3 {
            -0.6 * t
        } else {
            -self.cubic(x) * t.powi(3) / 6.0
        };
        effect + self.linear(x) + self.nonlinear(x)
    }

    pub fn dfdt(&self, t: f64, x: &[f64]) -> f64 {
        if self.id <= 3 {
            -0.6
        } else {
            -0.5 * self.cubic(x) * t * t
        }
    }

    pub fn constant_effect(&self) -> Option<f64> {
        (self.id <= 3).then_some(-0.6)
    }
}

/// One draw from a DGP.
#[derive(Debug, Clone)]
pub struct Generated {
    pub data: Dataset,
    pub theta_true: f64,
    /// Noiseless `f(Tᵢ, Xᵢ)`.
    pub signal: Vec<f64>,
}

/// True regression and Riesz representer of a DGP.
#[derive(Clone)]
pub struct Truth {
    pub regression: Arc<dyn FunctionOracle>,
    pub riesz: Arc<dyn FunctionOracle>,
}

/// A [`DgpSpec`] bound to its covariate source and design coefficients.
#[derive(Debug, Clone)]
pub struct Dgp {
    spec: DgpSpec,
    design: Option<BhpDesign>,
    source: Option<Arc<BhpSource>>,
    truth: Arc<OnceLock<(f64, f64)>>,
}

fn binary_propensity(x: &[f64]) -> f64 {
    0.5 + 0.3 * expit(10.0 * x[0])
}

fn continuous_mean(x: &[f64]) -> f64 {
    1.0 + 2.0 * expit(10.0 * x[0])
}

fn continuous_f(t: f64, x: &[f64]) -> f64 {
    (x[0] * x[0] / 2.0 + 0.5) * t.powi(3) / 3.0 + expit(10.0 * x[0])
}

fn continuous_dfdt(t: f64, x: &[f64]) -> f64 {
    (x[0] * x[0] / 2.0 + 0.5) * t * t
}

/// Treatment moments used with synthetic BHP covariates.
pub fn bhp_synthetic_mu(x: &[f64]) -> f64 {
    1.0 + x[0]
}

pub fn bhp_synthetic_sigma2(x: &[f64]) -> f64 {
    0.5 + 0.25 * x[1] * x[1]
}

impl Dgp {
    /// Synthetic covariates throughout.
    pub fn new(spec: DgpSpec) -> Result<Self> {
        Self::with_source(spec, None)
    }

    /// BHP designs may take covariates and treatment moments from `source`.
    pub fn with_source(spec: DgpSpec, source: Option<Arc<BhpSource>>) -> Result<Self> {
        spec.validate()?;
        let design = match spec {
            DgpSpec::BhpDesign {
                design,
                coef_seed,
                linear_columns,
                ..
            } => Some(BhpDesign::new(design, linear_columns, RngSeed(coef_seed))?),
            _ => {
                if source.is_some() {
                    return Err(Error::Incompatible("only BHP designs take a covariate source".into()));
                }
                None
            }
        };
        if let (Some(d), Some(s)) = (&design, &source) {
            if s.x.ncols() < d.required_columns() {
                return Err(Error::Schema(format!(
                    "BHP design {} needs {} covariate columns, the source has {}",
                    d.id,
                    d.required_columns(),
                    s.x.ncols()
                )));
            }
            if spec.n() > s.x.nrows() {
                return Err(Error::Argument(format!(
                    "n = {} exceeds the {} covariate rows available",
                    spec.n(),
                    s.x.nrows()
                )));
            }
        }
        Ok(Dgp {
            spec,
            design,
            source,
            truth: Arc::new(OnceLock::new()),
        })
    }

    pub fn spec(&self) -> &DgpSpec {
        &self.spec
    }

    pub fn design(&self) -> Option<&BhpDesign> {
        self.design.as_ref()
    }

    pub fn moment(&self) -> MomentFunctional {
        self.spec.moment()
    }

    fn bhp_columns(&self) -> usize {
        self.design.as_ref().map_or(0, |d| d.required_columns().max(BHP_COVARIATES))
    }

    /// Covariates plus treatment mean and variance for `n` rows.
    fn bhp_covariates(&self, rng: &mut Rng, n: usize, with_replacement: bool) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
        match &self.source {
            None => {
                let x = uniform_matrix(rng, n, self.bhp_columns());
                let mu = (0..n).map(|i| bhp_synthetic_mu(x.row(i).as_slice().unwrap())).collect();
                let s2 = (0..n).map(|i| bhp_synthetic_sigma2(x.row(i).as_slice().unwrap())).collect();
                (x, mu, s2)
            }
            Some(src) => {
                let rows: Vec<usize> = if with_replacement {
                    (0..n).map(|_| rng.random_range(0..src.x.nrows())).collect()
                } else if n == src.x.nrows() {
                    (0..n).collect()
                } else {
                    let mut r = rand::seq::index::sample(rng, src.x.nrows(), n).into_vec();
                    r.sort_unstable();
                    r
                };
                let x = src.x.select(ndarray::Axis(0), &rows);
                let mu = rows.iter().map(|&r| src.mu[r]).collect();
                let s2 = rows.iter().map(|&r| src.sigma2[r]).collect();
                (x, mu, s2)
            }
        }
    }

    /// Draws a dataset. Covariates, treatment and noise are drawn in that
    /// order from one stream, so designs sharing a seed share `X` and `T`.
    pub fn generate(&self, seed: RngSeed) -> Result<Generated> {
        let mut rng = seed.rng();
        let n = self.spec.n();
        let (x, t, signal, noise_sd) = match self.spec {
            DgpSpec::BinarySynthetic { noise_sd, .. } => {
                let x = uniform_matrix(&mut rng, n, BINARY_COVARIATES);
                let t: Vec<f64> = (0..n)
                    .map(|i| {
                        let p = binary_propensity(x.row(i).as_slice().unwrap());
                        if rng.random::<f64>() < p {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let f = (0..n).map(|i| t[i] + expit(10.0 * x[[i, 0]])).collect();
                (x, t, f, noise_sd)
            }
            DgpSpec::ContinuousSynthetic { noise_sd, .. } => {
                let x = uniform_matrix(&mut rng, n, CONTINUOUS_COVARIATES);
                let t: Vec<f64> = (0..n)
                    .map(|i| continuous_mean(x.row(i).as_slice().unwrap()) + normal(&mut rng))
                    .collect();
                let f = (0..n).map(|i| continuous_f(t[i], x.row(i).as_slice().unwrap())).collect();
                (x, t, f, noise_sd)
            }
            DgpSpec::BhpDesign { target_r2, noise_sd, .. } => {
                let design = self.design.as_ref().expect("BHP spec has a design");
                let (x, mu, s2) = self.bhp_covariates(&mut rng, n, false);
                let t: Vec<f64> = (0..n).map(|i| mu[i] + s2[i].sqrt() * normal(&mut rng)).collect();
                let f: Vec<f64> = (0..n).map(|i| design.f(t[i], x.row(i).as_slice().unwrap())).collect();
                let sd = noise_sd.unwrap_or_else(|| calibrated_noise_sd(&f, target_r2));
                (x, t, f, sd)
            }
        };
        let y: Vec<f64> = signal.iter().map(|f| f + noise_sd * normal(&mut rng)).collect();
        let data = Dataset::from_parts(y, t, x, self.spec.treatment_kind())?;
        Ok(Generated {
            data,
            theta_true: self.theta_true(),
            signal,
        })
    }

    /// Exact for closed-form designs, otherwise a cached Monte Carlo value.
    pub fn theta_true(&self) -> f64 {
        self.truth.get_or_init(|| self.true_theta(TRUTH_DRAWS, TRUTH_SEED)).0
    }

    /// `(θ, Monte Carlo standard error)` from `n_mc` fresh draws.
    pub fn true_theta(&self, n_mc: usize, seed: RngSeed) -> (f64, f64) {
        match &self.spec {
            DgpSpec::BinarySynthetic { .. } => return (1.0, 0.0),
            DgpSpec::BhpDesign { .. } => {
                if let Some(c) = self.design.as_ref().and_then(|d| d.constant_effect()) {
                    return (c, 0.0);
                }
            }
            DgpSpec::ContinuousSynthetic { .. } => {}
        }
        let mut rng = seed.rng();
        let draws = n_mc.max(2);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        match &self.spec {
            DgpSpec::ContinuousSynthetic { .. } => {
                for _ in 0..draws {
                    let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                    let t = continuous_mean(&x) + normal(&mut rng);
                    let v = continuous_dfdt(t, &x);
                    sum += v;
                    sum_sq += v * v;
                }
            }
            _ => {
                let design = self.design.as_ref().expect("BHP spec has a design");
                const CHUNK: usize = 4096;
                let mut left = draws;
                while left > 0 {
                    let m = left.min(CHUNK);
                    let (x, mu, s2) = self.bhp_covariates(&mut rng, m, true);
                    for i in 0..m {
                        let t = mu[i] + s2[i].sqrt() * normal(&mut rng);
                        let v = design.dfdt(t, x.row(i).as_slice().unwrap());
                        sum += v;
                        sum_sq += v * v;
                    }
                    left -= m;
                }
            }
        }
        let n = draws as f64;
        let mean = sum / n;
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (mean, (var / n).sqrt())
    }

    /// True nuisances, when they are known in closed form.
    pub fn truth(&self) -> Option<Truth> {
        match &self.spec {
            DgpSpec::BinarySynthetic { .. } => Some(Truth {
                regression: Arc::new(FnOracle(|t: f64, x: &[f64]| t + expit(10.0 * x[0]))),
                riesz: Arc::new(FnOracle(|t: f64, x: &[f64]| {
                    let p = binary_propensity(x);
                    t / p - (1.0 - t) / (1.0 - p)
                })),
            }),
            DgpSpec::ContinuousSynthetic { .. } => Some(Truth {
                regression: Arc::new(DiffFnOracle {
                    value: continuous_f,
                    derivative: continuous_dfdt,
                }),
                riesz: Arc::new(DiffFnOracle {
                    value: |t: f64, x: &[f64]| t - continuous_mean(x),
                    derivative: |_: f64, _: &[f64]| 1.0,
                }),
            }),
            DgpSpec::BhpDesign { .. } => {
                if self.source.is_some() {
                    return None;
                }
                let d = self.design.clone().expect("BHP spec has a design");
                let d2 = d.clone();
                Some(Truth {
                    regression: Arc::new(DiffFnOracle {
                        value: move |t: f64, x: &[f64]| d.f(t, x),
                        derivative: move |t: f64, x: &[f64]| d2.dfdt(t, x),
                    }),
                    riesz: Arc::new(DiffFnOracle {
                        value: |t: f64, x: &[f64]| (t - bhp_synthetic_mu(x)) / bhp_synthetic_sigma2(x),
                        derivative: |_: f64, x: &[f64]| 1.0 / bhp_synthetic_sigma2(x),
                    }),
                })
            }
        }
    }
}

/// Noise standard deviation giving `Var(f) / (Var(f) + σ²) = r2`, using the
/// sample variance of the simulated signal.
pub fn calibrated_noise_sd(signal: &[f64], r2: f64) -> f64 {
    let n = signal.len() as f64;
    if signal.len() < 2 {
        return 0.0;
    }
    let mean = signal.iter().sum::<f64>() / n;
    let var = signal.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var * (1.0 - r2) / r2).sqrt()
}

/// Binary synthetic design with unit noise.
pub fn gen_binary_synthetic(n: usize, seed: RngSeed) -> Result<(Dataset, f64)> {
    let g = Dgp::new(DgpSpec::BinarySynthetic { n, noise_sd: 1.0 })?.generate(seed)?;
    Ok((g.data, g.theta_true))
}

/// Continuous synthetic design with unit noise.
pub fn gen_continuous_synthetic(n: usize, seed: RngSeed) -> Result<(Dataset, f64)> {
    let g = Dgp::new(DgpSpec::ContinuousSynthetic { n, noise_sd: 1.0 })?.generate(seed)?;
    Ok((g.data, g.theta_true))
}

/// BHP design over every row of `source`.
pub fn gen_bhp_design(design: u8, source: Arc<BhpSource>, coef_seed: u64, seed: RngSeed) -> Result<(Dataset, f64)> {
    let spec = DgpSpec::BhpDesign {
        design,
        n: source.x.nrows(),
        coef_seed,
        target_r2: default_r2(),
        noise_sd: None,
        linear_columns: BHP_COVARIATES,
    };
    let g = Dgp::with_source(spec, Some(source))?.generate(seed)?;
    Ok((g.data, g.theta_true))
}
