//! Direct, IPS, doubly robust and post-TMLE estimates of `θ = E[m(W; g)]`,
//! with cross-fitting and normal-theory confidence intervals.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::folds::{FoldAssignment, FoldScheme};
use crate::moments::{FunctionOracle, MomentFunctional};
use crate::rng::RngSeed;

pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Direct,
    Ips,
    Dr,
    DrPostTmle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Direct, Method::Ips, Method::Dr, Method::DrPostTmle];

    pub fn needs_regression(self) -> bool {
        self != Method::Ips
    }

    pub fn needs_riesz(self) -> bool {
        self != Method::Direct
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Method::Direct),
            "ips" => Ok(Method::Ips),
            "dr" => Ok(Method::Dr),
            "dr_post_tmle" | "tmle" => Ok(Method::DrPostTmle),
            other => Err(Error::Argument(format!("unknown method '{other}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Direct => "direct",
            Method::Ips => "ips",
            Method::Dr => "dr",
            Method::DrPostTmle => "dr_post_tmle",
        })
    }
}

/// Point estimate with its per-sample identifying moments `ψ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub method: Method,
    pub theta: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub level: f64,
    pub n: usize,
    pub psi: Vec<f64>,
}

impl Estimate {
    /// `θ̂ = mean(ψ)`, `se = sd(ψ)/√n` (n − 1 denominator), `θ̂ ∓ z·se`.
    pub fn from_psi(method: Method, psi: Vec<f64>, level: f64) -> Result<Self> {
        if psi.is_empty() {
            return Err(Error::Validation("no samples to estimate from".into()));
        }
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::Argument(format!("confidence level {level} outside (0, 1)")));
        }
        if let Some(i) = psi.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{method} moment is not finite at row {i}")));
        }
        let n = psi.len();
        let theta = psi.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = psi.iter().map(|v| (v - theta).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        let z = normal_quantile(0.5 + level / 2.0);
        Ok(Estimate {
            method,
            theta,
            se,
            ci_lo: theta - z * se,
            ci_hi: theta + z * se,
            level,
            n,
            psi,
        })
    }

    pub fn ci_at(&self, level: f64) -> (f64, f64) {
        let z = normal_quantile(0.5 + level / 2.0);
        (self.theta - z * self.se, self.theta + z * self.se)
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lo <= truth && truth <= self.ci_hi
    }

    pub fn record(&self, scheme: FoldScheme, seed: RngSeed) -> EstimateRecord {
        EstimateRecord {
            method: self.method,
            theta: self.theta,
            se: self.se,
            ci: [self.ci_lo, self.ci_hi],
            n: self.n,
            scheme,
            seed,
        }
    }
}

/// Serialized summary of an [`Estimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateRecord {
    pub method: Method,
    pub theta: f64,
    pub se: f64,
    pub ci: [f64; 2],
    pub n: usize,
    pub scheme: FoldScheme,
    pub seed: RngSeed,
}

/// Standard normal quantile (Wichura's AS 241, about 1e−16 relative accuracy).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_5,
        1.331_416_678_917_843_8e2,
        1.971_590_950_306_551_3e3,
        1.373_169_376_550_946e4,
        4.592_195_393_154_987e4,
        6.726_577_092_700_87e4,
        3.343_057_558_358_813e4,
        2.509_080_928_730_122_7e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.231_333_070_160_091e1,
        6.871_870_074_920_579e2,
        5.394_196_021_424_751e3,
        2.121_379_430_158_659_7e4,
        3.930_789_580_009_271e4,
        2.872_908_573_572_194_3e4,
        5.226_495_278_852_854_5e3,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_5,
        4.630_337_846_156_545,
        5.769_497_221_460_691,
        3.647_848_324_763_204_5,
        1.270_458_252_452_368_4,
        2.417_807_251_774_506e-1,
        2.272_384_498_926_918_4e-2,
        7.745_450_142_783_414e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_8,
        1.676_384_830_183_803_8,
        6.897_673_349_851e-1,
        1.481_039_764_274_800_8e-1,
        1.519_866_656_361_645_7e-2,
        5.475_938_084_995_345e-4,
        1.050_750_071_644_416_9e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103,
        5.463_784_911_164_114,
        1.784_826_539_917_291_3,
        2.965_605_718_285_048_7e-1,
        2.653_218_952_657_612_4e-2,
        1.242_660_947_388_078_4e-3,
        2.711_555_568_743_487_6e-5,
        2.010_334_399_292_288_1e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.998_322_065_558_879e-1,
        1.369_298_809_227_358e-1,
        1.487_536_129_085_061_5e-2,
        7.868_691_311_456_133e-4,
        1.846_318_317_510_054_8e-5,
        1.421_511_758_316_446e-7,
        2.044_263_103_389_939_7e-15,
    ];
    fn poly(c: &[f64; 8], r: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &ci| acc * r + ci)
    }
    if p.is_nan() || p <= 0.0 || p >= 1.0 {
        return match p {
            0.0 => f64::NEG_INFINITY,
            1.0 => f64::INFINITY,
            _ => f64::NAN,
        };
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// `ψᵢ = m(Wᵢ; ĝ)`.
pub fn direct_estimate(g: &dyn FunctionOracle, moment: &MomentFunctional, data: &Dataset) -> Result<Estimate> {
    Estimate::from_psi(Method::Direct, moment.evaluate_dataset(g, data)?, DEFAULT_LEVEL)
}

/// `ψᵢ = α̂(Zᵢ)·Yᵢ`.
pub fn ips_estimate(alpha: &dyn FunctionOracle, data: &Dataset) -> Result<Estimate> {
    let a = alpha.eval_batch(data.t(), data.x().view());
    let psi = a.iter().zip(data.y()).map(|(a, y)| a * y).collect();
    Estimate::from_psi(Method::Ips, psi, DEFAULT_LEVEL)
}

/// `ψᵢ = m(Wᵢ; ĝ) + α̂(Zᵢ)(Yᵢ − ĝ(Zᵢ))`.
pub fn dr_estimate(
    g: &dyn FunctionOracle,
    alpha: &dyn FunctionOracle,
    moment: &MomentFunctional,
    data: &Dataset,
) -> Result<Estimate> {
    Estimate::from_psi(Method::Dr, dr_psi(g, alpha, moment, data)?, DEFAULT_LEVEL)
}

fn dr_psi(g: &dyn FunctionOracle, alpha: &dyn FunctionOracle, moment: &MomentFunctional, data: &Dataset) -> Result<Vec<f64>> {
    let m = moment.evaluate_dataset(g, data)?;
    let gv = g.eval_batch(data.t(), data.x().view());
    let a = alpha.eval_batch(data.t(), data.x().view());
    Ok((0..data.n()).map(|i| m[i] + a[i] * (data.y()[i] - gv[i])).collect())
}

/// Least-squares coefficient of the residual `y − g` on `α`.
pub fn tmle_epsilon(y: &[f64], g: &[f64], alpha: &[f64]) -> Result<f64> {
    if y.len() != g.len() || y.len() != alpha.len() {
        return Err(Error::Shape("y, g and alpha lengths differ".into()));
    }
    let den: f64 = alpha.iter().map(|a| a * a).sum();
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::Degenerate("Riesz values are all zero; TMLE step undefined".into()));
    }
    let num: f64 = (0..y.len()).map(|i| alpha[i] * (y[i] - g[i])).sum();
    Ok(num / den)
}

/// `g̃ = ĝ + ε·α̂` as an oracle of its own.
pub struct TmleCorrected<'a> {
    pub g: &'a dyn FunctionOracle,
    pub alpha: &'a dyn FunctionOracle,
    pub epsilon: f64,
}

impl FunctionOracle for TmleCorrected<'_> {
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        self.g.eval(t, x) + self.epsilon * self.alpha.eval(t, x)
    }

    fn eval_batch(&self, t: &[f64], x: ndarray::ArrayView2<'_, f64>) -> Vec<f64> {
        let g = self.g.eval_batch(t, x);
        let a = self.alpha.eval_batch(t, x);
        g.iter().zip(&a).map(|(g, a)| g + self.epsilon * a).collect()
    }

    fn dt(&self, t: f64, x: &[f64]) -> Option<f64> {
        Some(self.g.dt(t, x)? + self.epsilon * self.alpha.dt(t, x)?)
    }

    fn has_exact_dt(&self) -> bool {
        self.g.has_exact_dt() && self.alpha.has_exact_dt()
    }

    fn dt_batch(&self, t: &[f64], x: ndarray::ArrayView2<'_, f64>) -> Option<Vec<f64>> {
        let g = self.g.dt_batch(t, x)?;
        let a = self.alpha.dt_batch(t, x)?;
        Some(g.iter().zip(&a).map(|(g, a)| g + self.epsilon * a).collect())
    }
}

/// DR estimate with the regression replaced by `ĝ + ε̂·α̂`, `ε̂` fit on `data`.
pub fn post_tmle_estimate(
    g: &dyn FunctionOracle,
    alpha: &dyn FunctionOracle,
    moment: &MomentFunctional,
    data: &Dataset,
) -> Result<Estimate> {
    Estimate::from_psi(Method::DrPostTmle, post_tmle_psi(g, alpha, moment, data)?, DEFAULT_LEVEL)
}

fn post_tmle_psi(g: &dyn FunctionOracle, alpha: &dyn FunctionOracle, moment: &MomentFunctional, data: &Dataset) -> Result<Vec<f64>> {
    let gv = g.eval_batch(data.t(), data.x().view());
    let a = alpha.eval_batch(data.t(), data.x().view());
    let epsilon = tmle_epsilon(data.y(), &gv, &a)?;
    dr_psi(&TmleCorrected { g, alpha, epsilon }, alpha, moment, data)
}

/// Per-sample identifying moments of `method` on `data`.
pub fn psi_values(
    method: Method,
    g: Option<&dyn FunctionOracle>,
    alpha: Option<&dyn FunctionOracle>,
    moment: &MomentFunctional,
    data: &Dataset,
) -> Result<Vec<f64>> {
    fn need<'o>(o: Option<&'o dyn FunctionOracle>, method: Method, what: &str) -> Result<&'o dyn FunctionOracle> {
        o.ok_or_else(|| Error::Incompatible(format!("{method} needs a {what} estimate")))
    }
    let g = || need(g, method, "regression");
    let alpha = || need(alpha, method, "Riesz representer");
    match method {
        Method::Direct => moment.evaluate_dataset(g()?, data),
        Method::Ips => {
            let a = alpha()?.eval_batch(data.t(), data.x().view());
            Ok(a.iter().zip(data.y()).map(|(a, y)| a * y).collect())
        }
        Method::Dr => dr_psi(g()?, alpha()?, moment, data),
        Method::DrPostTmle => post_tmle_psi(g()?, alpha()?, moment, data),
    }
}

/// Nuisance estimates produced by one learner fit.
pub trait Fitted: Send + Sync {
    fn regression(&self) -> Option<Box<dyn FunctionOracle + '_>>;
    fn riesz(&self) -> Option<Box<dyn FunctionOracle + '_>>;
}

/// Something that fits nuisances on a training sample.
pub trait Learner: Send + Sync {
    fn name(&self) -> String;

    /// A multitask learner yields both nuisances from a single fit.
    fn multitask(&self) -> bool {
        false
    }

    /// `need` says which nuisances the caller will query; a learner may skip the rest.
    fn fit(&self, data: &Dataset, moment: &MomentFunctional, need: Need, seed: RngSeed) -> Result<Box<dyn Fitted>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Need {
    Both,
    Regression,
    Riesz,
}

impl Need {
    pub fn regression(self) -> bool {
        self != Need::Riesz
    }

    pub fn riesz(self) -> bool {
        self != Need::Regression
    }
}

/// How the two nuisances are obtained.
#[derive(Clone, Copy)]
pub enum Nuisances<'a> {
    /// One learner provides both `ĝ` and `α̂`.
    Joint(&'a dyn Learner),
    Separate {
        regression: &'a dyn Learner,
        riesz: &'a dyn Learner,
    },
}

impl Nuisances<'_> {
    fn any_multitask(&self) -> bool {
        match self {
            Nuisances::Joint(l) => l.multitask(),
            Nuisances::Separate { regression, riesz } => regression.multitask() || riesz.multitask(),
        }
    }
}

/// One evaluation block: rows to score, and which rows train each nuisance.
struct Task {
    eval: Vec<usize>,
    train_g: Vec<usize>,
    train_alpha: Vec<usize>,
    stream: u64,
}

fn tasks(folds: &FoldAssignment) -> Vec<Task> {
    let everything: Vec<usize> = (0..folds.n()).collect();
    match folds.scheme {
        FoldScheme::None => vec![Task {
            eval: everything.clone(),
            train_g: everything.clone(),
            train_alpha: everything,
            stream: 0,
        }],
        FoldScheme::Simple => (0..folds.k)
            .map(|k| Task {
                eval: folds.members(k),
                train_g: folds.complement(k),
                train_alpha: folds.complement(k),
                stream: k as u64,
            })
            .collect(),
        FoldScheme::Double => folds
            .roles
            .iter()
            .map(|r| Task {
                eval: folds.members(r.evaluation),
                train_g: folds.members(r.regression),
                train_alpha: folds.members(r.riesz),
                stream: r.evaluation as u64,
            })
            .collect(),
    }
}

/// Cross-fitted estimates for every method in `methods`, sharing nuisance fits.
///
/// `ψ` values are placed back in original row order; under simple
/// cross-fitting the TMLE fluctuation is fit per evaluation fold.
pub fn crossfit_estimates(
    data: &Dataset,
    nuisances: Nuisances<'_>,
    moment: &MomentFunctional,
    folds: &FoldAssignment,
    methods: &[Method],
    seed: RngSeed,
) -> Result<Vec<Estimate>> {
    if folds.n() != data.n() {
        return Err(Error::Shape(format!("fold assignment covers {} rows, data has {}", folds.n(), data.n())));
    }
    if folds.scheme == FoldScheme::Double && nuisances.any_multitask() {
        return Err(Error::Incompatible("multitask learners cannot be used with double cross-fitting".into()));
    }
    moment.check_dataset(data)?;
    let need_g = methods.iter().any(|m| m.needs_regression());
    let need_alpha = methods.iter().any(|m| m.needs_riesz());
    let blocks = tasks(folds);
    let per_block = blocks
        .par_iter()
        .map(|task| -> Result<Vec<Vec<f64>>> {
            let fit = |learner: &dyn Learner, rows: &[usize], need: Need, role: u64| -> Result<Box<dyn Fitted>> {
                learner.fit(&data.subset(rows)?, moment, need, seed.derive(task.stream * 4 + role))
            };
            let (fit_g, fit_alpha) = match nuisances {
                Nuisances::Joint(l) => {
                    let need = match (need_g, need_alpha) {
                        (true, false) => Need::Regression,
                        (false, true) => Need::Riesz,
                        _ => Need::Both,
                    };
                    (Some(fit(l, &task.train_g, need, 0)?), None)
                }
                Nuisances::Separate { regression, riesz } => (
                    need_g.then(|| fit(regression, &task.train_g, Need::Regression, 1)).transpose()?,
                    need_alpha.then(|| fit(riesz, &task.train_alpha, Need::Riesz, 2)).transpose()?,
                ),
            };
            let alpha_source = fit_alpha.as_ref().or(fit_g.as_ref());
            let g = match (need_g, &fit_g) {
                (true, Some(f)) => Some(
                    f.regression()
                        .ok_or_else(|| Error::Incompatible("learner did not produce a regression".into()))?,
                ),
                _ => None,
            };
            let alpha = match (need_alpha, alpha_source) {
                (true, Some(f)) => Some(
                    f.riesz()
                        .ok_or_else(|| Error::Incompatible("learner did not produce a Riesz representer".into()))?,
                ),
                _ => None,
            };
            let eval = data.subset(&task.eval)?;
            methods
                .iter()
                .map(|&m| psi_values(m, g.as_deref(), alpha.as_deref(), moment, &eval))
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    methods
        .iter()
        .enumerate()
        .map(|(mi, &method)| {
            let mut psi = vec![f64::NAN; data.n()];
            for (task, values) in blocks.iter().zip(&per_block) {
                for (&row, &v) in task.eval.iter().zip(&values[mi]) {
                    psi[row] = v;
                }
            }
            Estimate::from_psi(method, psi, DEFAULT_LEVEL)
        })
        .collect()
}

/// Single-method form of [`crossfit_estimates`].
pub fn crossfit_estimate(
    data: &Dataset,
    nuisances: Nuisances<'_>,
    moment: &MomentFunctional,
    folds: &FoldAssignment,
    method: Method,
    seed: RngSeed,
) -> Result<Estimate> {
    Ok(crossfit_estimates(data, nuisances, moment, folds, &[method], seed)?.remove(0))
}
