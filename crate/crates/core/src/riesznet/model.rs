use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{EpochRecord, RieszNetConfig};
use crate::dataset::{Dataset, TreatmentKind};
use crate::error::{Error, Result};
use crate::moments::{empirical_riesz_loss, DerivativeMode, FunctionOracle, MomentFunctional};
use crate::neural::{Activation, Mlp, MlpFile};

pub const RIESZNET_FORMAT: &str = "riesznet";
pub const RIESZNET_VERSION: u32 = 1;

/// Affine input scaling learned from the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub t_mean: f64,
    pub t_scale: f64,
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
}

fn mean_scale(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Standardizer {
            t_mean: 0.0,
            t_scale: 1.0,
            x_mean: vec![0.0; d],
            x_scale: vec![1.0; d],
        }
    }

    /// Covariates are always centred and scaled; the treatment only when continuous.
    pub fn fit(data: &Dataset) -> Self {
        let x = data.x();
        let (x_mean, x_scale) = (0..data.d()).map(|j| mean_scale(x.column(j).iter().copied())).unzip();
        let (t_mean, t_scale) = match data.treatment_kind() {
            TreatmentKind::Binary => (0.0, 1.0),
            TreatmentKind::Continuous => mean_scale(data.t().iter().copied()),
        };
        Standardizer {
            t_mean,
            t_scale,
            x_mean,
            x_scale,
        }
    }

    pub(crate) fn write_row(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = (t - self.t_mean) / self.t_scale;
        for (j, v) in x.iter().enumerate() {
            out[j + 1] = (v - self.x_mean[j]) / self.x_scale[j];
        }
    }

    pub(crate) fn inputs(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Array2<f64> {
        let d = x.ncols();
        let mut out = Array2::zeros((t.len(), d + 1));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let xr = x.row(i);
            row[0] = (t[i] - self.t_mean) / self.t_scale;
            for j in 0..d {
                row[j + 1] = (xr[j] - self.x_mean[j]) / self.x_scale[j];
            }
        }
        out
    }

    pub(crate) fn x_inputs(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.x_mean[j]) / self.x_scale[j]);
        }
        out
    }

    /// Tangent matrix for `∂/∂t` in original treatment units.
    pub(crate) fn t_direction(&self, rows: usize, width: usize) -> Array2<f64> {
        let mut dir = Array2::zeros((rows, width));
        dir.column_mut(0).fill(1.0 / self.t_scale);
        dir
    }
}

/// Loss terms on a sample, each a sample mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reg: f64,
    pub rr: f64,
    pub tmle: f64,
    pub penalty: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Regression,
    Riesz,
}

/// A (possibly untrained) RieszNet. Training returns one of these with its
/// epoch history filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RieszNet {
    pub shared: Mlp,
    pub beta: Array1<f64>,
    /// One regression stack, or `[g₀, g₁]` when bi-headed.
    pub heads: Vec<Mlp>,
    pub epsilon: f64,
    pub standardizer: Standardizer,
    pub history: Vec<EpochRecord>,
}

pub(crate) struct Evaluated {
    pub g: Vec<f64>,
    pub g_dt: Option<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub alpha_dt: Option<Vec<f64>>,
}

impl RieszNet {
    /// Freshly initialized network for `d` covariates.
    pub fn init(d: usize, bi_headed: bool, standardizer: Standardizer, config: &RieszNetConfig) -> Result<Self> {
        if standardizer.x_mean.len() != d {
            return Err(Error::Shape("standardizer width does not match covariates".into()));
        }
        let seed = config.seed;
        let mut widths = vec![if bi_headed { d } else { d + 1 }];
        widths.extend(std::iter::repeat_n(config.shared_width, config.shared_layers));
        let shared = Mlp::new(&widths, &vec![Activation::Elu; config.shared_layers], seed.derive(1))?;
        let mut head_widths = vec![config.shared_width];
        head_widths.extend(std::iter::repeat_n(config.reg_width, config.reg_layers));
        head_widths.push(1);
        let mut acts = vec![Activation::Elu; config.reg_layers];
        acts.push(Activation::Identity);
        let n_heads = if bi_headed { 2 } else { 1 };
        let heads = (0..n_heads)
            .map(|k| Mlp::new(&head_widths, &acts, seed.derive(2 + k as u64)))
            .collect::<Result<Vec<_>>>()?;
        let bound = (3.0 / config.shared_width as f64).sqrt();
        let mut rng = seed.derive(4).rng();
        let beta_len = if bi_headed { 2 * config.shared_width } else { config.shared_width };
        let beta = Array1::from_shape_simple_fn(beta_len, || rng.random_range(-bound..bound));
        Ok(RieszNet {
            shared,
            beta,
            heads,
            epsilon: 0.0,
            standardizer,
            history: Vec::new(),
        })
    }

    pub fn bi_headed(&self) -> bool {
        self.heads.len() == 2
    }

    pub fn covariates(&self) -> usize {
        if self.bi_headed() {
            self.shared.input_width()
        } else {
            self.shared.input_width() - 1
        }
    }

    /// Riesz coefficients `(β₀, β₁)` of a bi-headed net.
    pub(crate) fn beta_arms(&self) -> (ndarray::ArrayView1<'_, f64>, ndarray::ArrayView1<'_, f64>) {
        let h = self.shared.output_width();
        (self.beta.slice(ndarray::s![..h]), self.beta.slice(ndarray::s![h..]))
    }

    pub fn num_params(&self) -> usize {
        self.shared.num_params() + self.beta.len() + self.heads.iter().map(Mlp::num_params).sum::<usize>() + 1
    }

    /// All parameters in a fixed order: shared, β, heads, ε (last).
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        self.shared.write_flat(out);
        out.extend(self.beta.iter());
        for h in &self.heads {
            h.write_flat(out);
        }
        out.push(self.epsilon);
    }

    pub fn read_flat(&mut self, flat: &[f64]) {
        let mut pos = self.shared.read_flat(flat);
        for b in self.beta.iter_mut() {
            *b = flat[pos];
            pos += 1;
        }
        for h in &mut self.heads {
            pos += h.read_flat(&flat[pos..]);
        }
        self.epsilon = flat[pos];
    }

    /// Which flat entries carry the L2 penalty (everything except ε).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.num_params()];
        *mask.last_mut().expect("non-empty") = false;
        mask
    }

    /// `‖w‖²` over every parameter except ε.
    pub fn sum_sq_weights(&self) -> f64 {
        self.shared.sum_sq_weights()
            + self.beta.iter().map(|b| b * b).sum::<f64>()
            + self.heads.iter().map(Mlp::sum_sq_weights).sum::<f64>()
    }

    /// `(ĝ, α̂)` at one point.
    pub fn predict(&self, t: f64, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.covariates() {
            return Err(Error::Shape(format!("expected {} covariates, got {}", self.covariates(), x.len())));
        }
        let xs = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        let ev = self.evaluate(&[t], xs, false)?;
        Ok((ev.g[0], ev.alpha[0]))
    }

    pub fn predict_batch(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let ev = self.evaluate(t, x, false)?;
        Ok((ev.g, ev.alpha))
    }

    /// Features the Riesz head is linear in, one row per sample: `f₁(t, x)`,
    /// or `((1 − t)·f₁(x), t·f₁(x))` for a bi-headed net.
    pub fn features(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_batch(t, x)?;
        if !self.bi_headed() {
            return self.shared.forward_batch(self.standardizer.inputs(t, x).view());
        }
        let f = self.shared.forward_batch(self.standardizer.x_inputs(x).view())?;
        Ok(arm_features(&f, t))
    }

    fn check_batch(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Result<()> {
        if x.nrows() != t.len() || x.ncols() != self.covariates() {
            return Err(Error::Shape(format!(
                "batch of {} treatments and {:?} covariates, net expects {} covariates",
                t.len(),
                x.dim(),
                self.covariates()
            )));
        }
        Ok(())
    }

    pub(crate) fn evaluate(&self, t: &[f64], x: ArrayView2<'_, f64>, with_dt: bool) -> Result<Evaluated> {
        self.check_batch(t, x)?;
        if self.bi_headed() {
            return self.evaluate_arms(t, x, with_dt);
        }
        let input = self.standardizer.inputs(t, x);
        let dir = with_dt.then(|| self.standardizer.t_direction(input.nrows(), input.ncols()));
        let cache = self.shared.forward_cached(input.view(), dir.as_ref().map(|d| d.view()))?;
        let f = cache.output();
        let head = self.heads[0].forward_cached(f.view(), cache.output_tangent().map(|d| d.view()))?;
        Ok(Evaluated {
            g: head.output().column(0).to_vec(),
            g_dt: head.output_tangent().map(|d| d.column(0).to_vec()),
            alpha: f.dot(&self.beta).to_vec(),
            alpha_dt: cache.output_tangent().map(|df| df.dot(&self.beta).to_vec()),
        })
    }

    /// Bi-headed evaluation: both arms share `f₁(x)` and are mixed linearly in `t`.
    fn evaluate_arms(&self, t: &[f64], x: ArrayView2<'_, f64>, with_dt: bool) -> Result<Evaluated> {
        let f = self.shared.forward_batch(self.standardizer.x_inputs(x).view())?;
        let (b0, b1) = self.beta_arms();
        let (a0, a1) = (f.dot(&b0), f.dot(&b1));
        let alpha = arm_features(&f, t).dot(&self.beta).to_vec();
        let h0 = self.heads[0].forward_batch(f.view())?;
        let h1 = self.heads[1].forward_batch(f.view())?;
        let mix = |v0: f64, v1: f64, ti: f64| ti * v1 + (1.0 - ti) * v0;
        let n = t.len();
        Ok(Evaluated {
            g: (0..n).map(|i| mix(h0[[i, 0]], h1[[i, 0]], t[i])).collect(),
            g_dt: with_dt.then(|| (0..n).map(|i| h1[[i, 0]] - h0[[i, 0]]).collect()),
            alpha,
            alpha_dt: with_dt.then(|| (0..n).map(|i| a1[i] - a0[i]).collect()),
        })
    }

    pub fn oracle(&self, head: Head) -> NetOracle<'_> {
        NetOracle { net: self, head }
    }

    pub fn g_oracle(&self) -> NetOracle<'_> {
        self.oracle(Head::Regression)
    }

    pub fn alpha_oracle(&self) -> NetOracle<'_> {
        self.oracle(Head::Riesz)
    }

    /// `Eₙ[α(Z)² − 2·m(W; α)]`.
    pub fn rr_loss(&self, data: &Dataset, moment: &MomentFunctional) -> Result<f64> {
        empirical_riesz_loss(&self.alpha_oracle(), moment, data)
    }

    /// `Eₙ[(Y − g(Z))²]`.
    pub fn reg_loss(&self, data: &Dataset) -> Result<f64> {
        let g = self.g_oracle().eval_batch(data.t(), data.x().view());
        finite_mean(data.y().iter().zip(&g).map(|(y, g)| (y - g).powi(2)), "regression loss")
    }

    /// `Eₙ[(Y − g(Z) − ε·α(Z))²]`.
    pub fn tmle_loss(&self, data: &Dataset) -> Result<f64> {
        let (g, a) = self.predict_batch(data.t(), data.x().view())?;
        let eps = self.epsilon;
        finite_mean(
            (0..data.n()).map(|i| (data.y()[i] - g[i] - eps * a[i]).powi(2)),
            "TMLE loss",
        )
    }

    /// The training objective and its parts on `data`.
    pub fn losses(&self, data: &Dataset, moment: &MomentFunctional, config: &RieszNetConfig) -> Result<LossBreakdown> {
        let reg = self.reg_loss(data)?;
        let rr = self.rr_loss(data, moment)?;
        let tmle = self.tmle_loss(data)?;
        let penalty = config.l2 * self.sum_sq_weights();
        Ok(LossBreakdown {
            reg,
            rr,
            tmle,
            penalty,
            combined: reg + config.lambda_riesz * rr + config.lambda_tmle * tmle + penalty,
        })
    }

    pub fn to_file(&self) -> RieszNetFile {
        RieszNetFile {
            format: RIESZNET_FORMAT.into(),
            version: RIESZNET_VERSION,
            shared: self.shared.to_file(),
            beta: self.beta.to_vec(),
            heads: self.heads.iter().map(Mlp::to_file).collect(),
            epsilon: self.epsilon,
            standardizer: self.standardizer.clone(),
            history: self.history.clone(),
        }
    }

    pub fn from_file(file: &RieszNetFile) -> Result<Self> {
        if file.format != RIESZNET_FORMAT || file.version != RIESZNET_VERSION {
            return Err(Error::Format(format!("unsupported file {} v{}", file.format, file.version)));
        }
        let shared = Mlp::from_file(&file.shared)?;
        let heads = file.heads.iter().map(Mlp::from_file).collect::<Result<Vec<_>>>()?;
        if heads.is_empty() || heads.len() > 2 {
            return Err(Error::Format("a RieszNet has one or two regression heads".into()));
        }
        let h = shared.output_width();
        let beta_len = if heads.len() == 2 { 2 * h } else { h };
        if file.beta.len() != beta_len || heads.iter().any(|m| m.input_width() != h || m.output_width() != 1) {
            return Err(Error::Format("head widths do not match the shared representation".into()));
        }
        let d = if heads.len() == 2 { shared.input_width() } else { shared.input_width() - 1 };
        let s = &file.standardizer;
        if s.x_mean.len() != d || s.x_scale.len() != d {
            return Err(Error::Format("standardizer width does not match covariates".into()));
        }
        if !file.epsilon.is_finite() || file.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Format("non-finite Riesz head or epsilon".into()));
        }
        Ok(RieszNet {
            shared,
            beta: Array1::from(file.beta.clone()),
            heads,
            epsilon: file.epsilon,
            standardizer: file.standardizer.clone(),
            history: file.history.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: RieszNetFile = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_file(&file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

fn arm_features(f: &Array2<f64>, t: &[f64]) -> Array2<f64> {
    let h = f.ncols();
    let mut out = Array2::zeros((t.len(), 2 * h));
    for (i, &ti) in t.iter().enumerate() {
        for j in 0..h {
            out[[i, j]] = (1.0 - ti) * f[[i, j]];
            out[[i, h + j]] = ti * f[[i, j]];
        }
    }
    out
}

fn finite_mean(values: impl Iterator<Item = f64>, what: &str) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Validation(format!("{what} on an empty sample")));
    }
    let m = sum / n as f64;
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::Numeric(format!("{what} is not finite")))
    }
}

/// Serialized network: the neural weights plus ε, scaling constants and history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RieszNetFile {
    pub format: String,
    pub version: u32,
    pub shared: MlpFile,
    pub beta: Vec<f64>,
    pub heads: Vec<MlpFile>,
    pub epsilon: f64,
    pub standardizer: Standardizer,
    pub history: Vec<EpochRecord>,
}

/// One head of a network viewed as a function of `(t, x)` in original units.
/// Non-finite evaluations surface as NaN, which moment evaluation rejects.
#[derive(Debug, Clone, Copy)]
pub struct NetOracle<'a> {
    net: &'a RieszNet,
    head: Head,
}

impl NetOracle<'_> {
    fn pick(&self, ev: Evaluated, dt: bool) -> Vec<f64> {
        match (self.head, dt) {
            (Head::Regression, false) => ev.g,
            (Head::Riesz, false) => ev.alpha,
            (Head::Regression, true) => ev.g_dt.expect("tangent requested"),
            (Head::Riesz, true) => ev.alpha_dt.expect("tangent requested"),
        }
    }

    fn run(&self, t: &[f64], x: ArrayView2<'_, f64>, dt: bool) -> Vec<f64> {
        match self.net.evaluate(t, x, dt) {
            Ok(ev) => self.pick(ev, dt),
            Err(e) => {
                log::warn!("network evaluation failed: {e}");
                vec![f64::NAN; t.len()]
            }
        }
    }
}

impl FunctionOracle for NetOracle<'_> {
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match ArrayView2::from_shape((1, x.len()), x) {
            Ok(xs) => self.run(&[t], xs, false)[0],
            Err(_) => f64::NAN,
        }
    }

    fn eval_batch(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Vec<f64> {
        self.run(t, x, false)
    }

    fn dt(&self, t: f64, x: &[f64]) -> Option<f64> {
        let xs = ArrayView2::from_shape((1, x.len()), x).ok()?;
        Some(self.run(&[t], xs, true)[0])
    }

    fn has_exact_dt(&self) -> bool {
        true
    }

    fn dt_batch(&self, t: &[f64], x: ArrayView2<'_, f64>) -> Option<Vec<f64>> {
        Some(self.run(t, x, true))
    }
}

pub(crate) fn use_exact(moment: &MomentFunctional) -> bool {
    moment.derivative_mode() == DerivativeMode::ExactIfAvailable
}
