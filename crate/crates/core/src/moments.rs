//! Linear moment functionals `m(W; f)` evaluated through black-box function
//! oracles, and the analytic plug-in Riesz representers used as benchmarks.
//!
//! A functional is evaluated sample by sample. Every supported functional is a
//! finite linear combination of evaluations `f(t_j, x)` and, when exact
//! derivatives are requested, treatment derivatives `∂f/∂t (t_j, x)`. That
//! combination is exposed as a [`Stencil`] so that learners which need
//! gradients of `m(W; f_w)` with respect to their own parameters can
//! differentiate through it.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TreatmentKind};
use crate::error::{Error, Result};

/// A function of `(t, x)` that can be queried pointwise.
pub trait FunctionOracle: Send + Sync {
    fn eval(&self, t: f64, x: &[f64]) -> f64;

    /// Evaluates at aligned points `(t[i], x.row(i))`.
    fn eval_batch(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Vec<f64> {
        t.iter()
            .zip(x.rows())
            .map(|(&ti, row)| match row.as_slice() {
                Some(s) => self.eval(ti, s),
                None => self.eval(ti, &row.to_vec()),
            })
            .collect()
    }

    /// Exact `∂f/∂t`, if the oracle can provide it.
    fn dt(&self, _t: f64, _x: &[f64]) -> Option<f64> {
        None
    }

    fn has_exact_dt(&self) -> bool {
        false
    }

    fn dt_batch(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Option<Vec<f64>> {
        t.iter()
            .zip(x.rows())
            .map(|(&ti, row)| match row.as_slice() {
                Some(s) => self.dt(ti, s),
                None => self.dt(ti, &row.to_vec()),
            })
            .collect()
    }
}

impl<O: FunctionOracle + ?Sized> FunctionOracle for &O {
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        (**self).eval(t, x)
    }
    fn eval_batch(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Vec<f64> {
        (**self).eval_batch(t, x)
    }
    fn dt(&self, t: f64, x: &[f64]) -> Option<f64> {
        (**self).dt(t, x)
    }
    fn has_exact_dt(&self) -> bool {
        (**self).has_exact_dt()
    }
    fn dt_batch(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Option<Vec<f64>> {
        (**self).dt_batch(t, x)
    }
}

impl<O: FunctionOracle + ?Sized> FunctionOracle for Box<O> {
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        (**self).eval(t, x)
    }
    fn eval_batch(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Vec<f64> {
        (**self).eval_batch(t, x)
    }
    fn dt(&self, t: f64, x: &[f64]) -> Option<f64> {
        (**self).dt(t, x)
    }
    fn has_exact_dt(&self) -> bool {
        (**self).has_exact_dt()
    }
    fn dt_batch(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Option<Vec<f64>> {
        (**self).dt_batch(t, x)
    }
}

impl<O: FunctionOracle + ?Sized> FunctionOracle for Arc<O> {
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        (**self).eval(t, x)
    }
    fn eval_batch(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Vec<f64> {
        (**self).eval_batch(t, x)
    }
    fn dt(&self, t: f64, x: &[f64]) -> Option<f64> {
        (**self).dt(t, x)
    }
    fn has_exact_dt(&self) -> bool {
        (**self).has_exact_dt()
    }
    fn dt_batch(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Option<Vec<f64>> {
        (**self).dt_batch(t, x)
    }
}

/// Closure-backed oracle without a derivative channel.
#[derive(Clone)]
pub struct FnOracle<F>(pub F);

impl<F> FunctionOracle for FnOracle<F>
where
    F: Fn(f64, &[f64]) -> f64 + Send + Sync,
{
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        (self.0)(t, x)
    }
}

/// Closure-backed oracle with an exact treatment derivative.
#[derive(Clone)]
pub struct DiffFnOracle<F, D> {
    pub value: F,
    pub derivative: D,
}

impl<F, D> FunctionOracle for DiffFnOracle<F, D>
where
    F: Fn(f64, &[f64]) -> f64 + Send + Sync,
    D: Fn(f64, &[f64]) -> f64 + Send + Sync,
{
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        (self.value)(t, x)
    }
    fn dt(&self, t: f64, x: &[f64]) -> Option<f64> {
        Some((self.derivative)(t, x))
    }
    fn has_exact_dt(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentKind {
    Ate,
    Policy,
    AvgDerivative,
    IncrementalPolicy,
}

impl MomentKind {
    pub fn treatment_kind(self) -> TreatmentKind {
        match self {
            MomentKind::Ate | MomentKind::Policy => TreatmentKind::Binary,
            MomentKind::AvgDerivative | MomentKind::IncrementalPolicy => TreatmentKind::Continuous,
        }
    }

    pub fn needs_policy(self) -> bool {
        matches!(self, MomentKind::Policy | MomentKind::IncrementalPolicy)
    }

    pub fn is_derivative(self) -> bool {
        matches!(self, MomentKind::AvgDerivative | MomentKind::IncrementalPolicy)
    }
}

impl std::str::FromStr for MomentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ate" => Ok(MomentKind::Ate),
            "policy" => Ok(MomentKind::Policy),
            "avg_derivative" => Ok(MomentKind::AvgDerivative),
            "incremental_policy" => Ok(MomentKind::IncrementalPolicy),
            other => Err(Error::Argument(format!("unknown moment kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    #[default]
    FiniteDifference,
    /// Use the oracle's exact derivative when it has one, else fall back to FD.
    ExactIfAvailable,
}

/// Treatment assignment rule `π(x)`.
#[derive(Clone)]
pub enum Policy {
    Constant(f64),
    /// `above` when `x[column] > threshold`, otherwise `below`.
    Threshold {
        column: usize,
        threshold: f64,
        above: f64,
        below: f64,
    },
    Custom(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl Policy {
    pub fn apply(&self, x: &[f64]) -> f64 {
        match self {
            Policy::Constant(v) => *v,
            Policy::Threshold {
                column,
                threshold,
                above,
                below,
            } => {
                if x[*column] > *threshold {
                    *above
                } else {
                    *below
                }
            }
            Policy::Custom(f) => f(x),
        }
    }
}

impl fmt::Debug for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Constant(v) => write!(f, "Constant({v})"),
            Policy::Threshold {
                column,
                threshold,
                above,
                below,
            } => write!(f, "Threshold(x[{column}] > {threshold} ? {above} : {below})"),
            Policy::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Default central finite-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Plug-in propensities are clipped to `[PROPENSITY_CLIP, 1 - PROPENSITY_CLIP]`.
pub const PROPENSITY_CLIP: f64 = 0.01;

/// Smallest conditional variance accepted by the Stein plug-in.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// One term of `m(W; f) = Σ weight · f(t, x)` (or `· ∂f/∂t (t, x)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilTerm {
    pub t: f64,
    pub weight: f64,
    pub derivative: bool,
}

pub type Stencil = Vec<StencilTerm>;

#[derive(Debug, Clone)]
pub struct MomentFunctional {
    kind: MomentKind,
    policy: Option<Policy>,
    fd_step: f64,
    derivative_mode: DerivativeMode,
}

impl MomentFunctional {
    pub fn new(kind: MomentKind, policy: Option<Policy>) -> Result<Self> {
        if kind.needs_policy() && policy.is_none() {
            return Err(Error::Validation(format!("{kind:?} moment requires a policy")));
        }
        Ok(MomentFunctional {
            kind,
            policy: if kind.needs_policy() { policy } else { None },
            fd_step: DEFAULT_FD_STEP,
            derivative_mode: DerivativeMode::default(),
        })
    }

    pub fn ate() -> Self {
        MomentFunctional::new(MomentKind::Ate, None).expect("ate takes no policy")
    }

    pub fn policy(policy: Policy) -> Self {
        MomentFunctional::new(MomentKind::Policy, Some(policy)).expect("policy given")
    }

    pub fn avg_derivative() -> Self {
        MomentFunctional::new(MomentKind::AvgDerivative, None).expect("no policy needed")
    }

    pub fn incremental_policy(policy: Policy) -> Self {
        MomentFunctional::new(MomentKind::IncrementalPolicy, Some(policy)).expect("policy given")
    }

    pub fn with_fd_step(mut self, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Argument(format!("finite-difference step must be positive, got {h}")));
        }
        self.fd_step = h;
        Ok(self)
    }

    pub fn with_derivative_mode(mut self, mode: DerivativeMode) -> Self {
        self.derivative_mode = mode;
        self
    }

    pub fn kind(&self) -> MomentKind {
        self.kind
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    pub fn derivative_mode(&self) -> DerivativeMode {
        self.derivative_mode
    }

    pub fn policy_rule(&self) -> Option<&Policy> {
        self.policy.as_ref()
    }

    /// Rejects datasets whose treatment type does not suit this functional.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let want = self.kind.treatment_kind();
        if data.treatment_kind() != want {
            return Err(Error::Validation(format!(
                "{:?} moment needs a {:?} treatment, dataset has {:?}",
                self.kind,
                want,
                data.treatment_kind()
            )));
        }
        Ok(())
    }

    fn policy_value(&self, x: &[f64]) -> Result<f64> {
        let p = self.policy.as_ref().expect("policy present by construction").apply(x);
        let ok = match self.kind {
            MomentKind::Policy => p == 0.0 || p == 1.0,
            _ => (-1.0..=1.0).contains(&p),
        };
        if !ok {
            return Err(Error::Validation(format!("policy value {p} out of range for {:?}", self.kind)));
        }
        Ok(p)
    }

    /// Linear combination defining `m(W; ·)` at sample `(t, x)`.
    ///
    /// With `exact = true` derivative moments are returned as a single
    /// derivative term; otherwise as a central difference of two evaluations.
    pub fn stencil(&self, t: f64, x: &[f64], exact: bool) -> Result<Stencil> {
        let h = self.fd_step;
        let derivative = |scale: f64| -> Stencil {
            if exact {
                vec![StencilTerm {
                    t,
                    weight: scale,
                    derivative: true,
                }]
            } else {
                vec![
                    StencilTerm {
                        t: t + h,
                        weight: scale / (2.0 * h),
                        derivative: false,
                    },
                    StencilTerm {
                        t: t - h,
                        weight: -scale / (2.0 * h),
                        derivative: false,
                    },
                ]
            }
        };
        let value = |t: f64, weight: f64| StencilTerm {
            t,
            weight,
            derivative: false,
        };
        Ok(match self.kind {
            MomentKind::Ate => vec![value(1.0, 1.0), value(0.0, -1.0)],
            MomentKind::Policy => {
                let p = self.policy_value(x)?;
                vec![value(1.0, p), value(0.0, 1.0 - p)]
            }
            MomentKind::AvgDerivative => derivative(1.0),
            MomentKind::IncrementalPolicy => derivative(self.policy_value(x)?),
        })
    }

    fn use_exact(&self, oracle: &dyn FunctionOracle) -> bool {
        self.kind.is_derivative()
            && self.derivative_mode == DerivativeMode::ExactIfAvailable
            && oracle.has_exact_dt()
    }

    /// `m(W; oracle)` at one sample. The outcome `y` never enters.
    pub fn evaluate(&self, oracle: &dyn FunctionOracle, t: f64, x: &[f64]) -> Result<f64> {
        let exact = self.use_exact(oracle);
        let mut acc = 0.0;
        for term in self.stencil(t, x, exact)? {
            let v = if term.derivative {
                oracle
                    .dt(term.t, x)
                    .ok_or_else(|| Error::Numeric("oracle lost its derivative channel".into()))?
            } else {
                oracle.eval(term.t, x)
            };
            acc += term.weight * v;
        }
        finite(acc, "moment value")
    }

    /// `m(W_i; oracle)` for every row, querying the oracle in batches.
    pub fn evaluate_batch(&self, oracle: &dyn FunctionOracle, t: &[f64], x: &Array2<f64>) -> Result<Vec<f64>> {
        let n = t.len();
        if x.nrows() != n {
            return Err(Error::Shape(format!("{} treatments vs {} covariate rows", n, x.nrows())));
        }
        let exact = self.use_exact(oracle);
        let d = x.ncols();
        let mut val_t = Vec::new();
        let mut val_x = Vec::new();
        let mut val_owner = Vec::new();
        let mut der_t = Vec::new();
        let mut der_x = Vec::new();
        let mut der_owner = Vec::new();
        for i in 0..n {
            let row = x.row(i);
            let row = row.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| row.to_vec());
            for term in self.stencil(t[i], &row, exact)? {
                if term.derivative {
                    der_t.push(term.t);
                    der_x.extend_from_slice(&row);
                    der_owner.push((i, term.weight));
                } else {
                    val_t.push(term.t);
                    val_x.extend_from_slice(&row);
                    val_owner.push((i, term.weight));
                }
            }
        }
        let mut out = vec![0.0; n];
        if !val_t.is_empty() {
            let xs = Array2::from_shape_vec((val_t.len(), d), val_x).expect("consistent shape");
            let vals = oracle.eval_batch(&val_t, xs.view());
            for ((i, w), v) in val_owner.into_iter().zip(vals) {
                out[i] += w * v;
            }
        }
        if !der_t.is_empty() {
            let xs = Array2::from_shape_vec((der_t.len(), d), der_x).expect("consistent shape");
            let vals = oracle
                .dt_batch(&der_t, xs.view())
                .ok_or_else(|| Error::Numeric("oracle lost its derivative channel".into()))?;
            for ((i, w), v) in der_owner.into_iter().zip(vals) {
                out[i] += w * v;
            }
        }
        for v in &out {
            finite(*v, "moment value")?;
        }
        Ok(out)
    }

    /// `m(W_i; oracle)` over a whole dataset.
    pub fn evaluate_dataset(&self, oracle: &dyn FunctionOracle, data: &Dataset) -> Result<Vec<f64>> {
        self.evaluate_batch(oracle, data.t(), data.x())
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

/// `g(1, x) - g(0, x)`.
pub fn ate_moment(oracle: &dyn FunctionOracle, x: &[f64]) -> Result<f64> {
    finite(oracle.eval(1.0, x) - oracle.eval(0.0, x), "ATE moment")
}

/// `π(x) (g(1, x) - g(0, x)) + g(0, x)` for a deterministic binary policy.
pub fn policy_moment(oracle: &dyn FunctionOracle, policy: &Policy, x: &[f64]) -> Result<f64> {
    let p = policy.apply(x);
    if p != 0.0 && p != 1.0 {
        return Err(Error::Validation(format!("binary policy returned {p}")));
    }
    let g0 = oracle.eval(0.0, x);
    finite(p * (oracle.eval(1.0, x) - g0) + g0, "policy moment")
}

/// `∂g/∂t (t, x)`, by central difference with step `h` or from the oracle's
/// exact derivative channel.
pub fn avg_derivative_moment(oracle: &dyn FunctionOracle, t: f64, x: &[f64], h: f64, mode: DerivativeMode) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {h}")));
    }
    if mode == DerivativeMode::ExactIfAvailable {
        if let Some(d) = oracle.dt(t, x) {
            return finite(d, "derivative moment");
        }
    }
    finite((oracle.eval(t + h, x) - oracle.eval(t - h, x)) / (2.0 * h), "derivative moment")
}

/// `π(x) ∂g/∂t (t, x)` with `π(x) ∈ [-1, 1]`.
pub fn incremental_policy_moment(
    oracle: &dyn FunctionOracle,
    policy: &Policy,
    t: f64,
    x: &[f64],
    h: f64,
    mode: DerivativeMode,
) -> Result<f64> {
    let p = policy.apply(x);
    if !(-1.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!("incremental policy returned {p}")));
    }
    Ok(p * avg_derivative_moment(oracle, t, x, h, mode)?)
}

/// `E_n[α(Z)² - 2 m(W; α)]`.
pub fn empirical_riesz_loss(alpha: &dyn FunctionOracle, moment: &MomentFunctional, data: &Dataset) -> Result<f64> {
    let m = moment.evaluate_dataset(alpha, data)?;
    let a = alpha.eval_batch(data.t(), data.x().view());
    let n = data.n() as f64;
    let total: f64 = a.iter().zip(&m).map(|(a, m)| a * a - 2.0 * m).sum();
    finite(total / n, "Riesz loss")
}

/// Inverse-propensity representer `t/p - (1-t)/(1-p)` with `p` clipped to
/// `[0.01, 0.99]`.
pub fn plugin_rr_binary(p_hat: f64, t: f64) -> Result<f64> {
    if !p_hat.is_finite() {
        return Err(Error::Numeric(format!("propensity {p_hat} is not finite")));
    }
    let p = p_hat.clamp(PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP);
    Ok(t / p - (1.0 - t) / (1.0 - p))
}

/// Stein-identity representer `(t - μ) / σ²` for Gaussian treatment noise.
pub fn plugin_rr_stein(mu_hat: f64, sigma2_hat: f64, t: f64) -> Result<f64> {
    if !(sigma2_hat > VARIANCE_FLOOR) {
        return Err(Error::Numeric(format!(
            "conditional variance {sigma2_hat} is below the floor {VARIANCE_FLOOR}"
        )));
    }
    finite((t - mu_hat) / sigma2_hat, "Stein representer")
}
