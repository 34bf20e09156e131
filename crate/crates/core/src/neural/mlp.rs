use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngSeed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x` for `x >= 0`, `exp(x) - 1` otherwise.
    Elu,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn value(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z >= 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z >= 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    #[inline]
    fn curvature(self, z: f64) -> f64 {
        match self {
            Activation::Elu if z < 0.0 => z.exp(),
            _ => 0.0,
        }
    }

    fn init_gain(self) -> f64 {
        match self {
            Activation::Elu | Activation::Relu => std::f64::consts::SQRT_2,
            Activation::Identity => 1.0,
        }
    }
}

/// Affine map followed by an elementwise activation. `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<DenseGrad>,
}

impl MlpGrads {
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for g in &self.layers {
            out.extend(g.weight.iter());
            out.extend(g.bias.iter());
        }
    }
}

/// Adjoints with respect to the network input (and its tangent).
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub input: Array2<f64>,
    pub tangent: Option<Array2<f64>>,
}

/// Multilayer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Intermediate values kept by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    tangent_inputs: Option<Vec<Array2<f64>>>,
    tangent_pre: Option<Vec<Array2<f64>>>,
    output: Array2<f64>,
    output_tangent: Option<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn output_tangent(&self) -> Option<&Array2<f64>> {
        self.output_tangent.as_ref()
    }
}

impl Mlp {
    /// Random network with layer widths `widths[0] -> widths[1] -> ...`.
    ///
    /// Weights are uniform on `±gain·sqrt(3 / fan_in)` (gain `√2` for
    /// rectifier-type activations, 1 otherwise); biases start at zero.
    pub fn new(widths: &[usize], activations: &[Activation], seed: RngSeed) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 {
            return Err(Error::Shape(format!(
                "{} widths need {} activations, got {}",
                widths.len(),
                widths.len().saturating_sub(1),
                activations.len()
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Shape("layer widths must be positive".into()));
        }
        let mut rng = seed.rng();
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = act.init_gain() * (3.0 / fan_in as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..bound));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation: act,
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::Shape(format!("layer {i}: bias length {} != {}", l.bias.len(), l.outputs())));
            }
            if i > 0 && layers[i - 1].outputs() != l.inputs() {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.inputs(),
                    i - 1,
                    layers[i - 1].outputs()
                )));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(Dense::outputs));
        w
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Appends all parameters, layer by layer, weights row-major then biases.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }

    /// Inverse of [`Mlp::write_flat`]; returns the number of values consumed.
    pub fn read_flat(&mut self, flat: &[f64]) -> usize {
        let mut pos = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = flat[pos];
                pos += 1;
            }
            for b in l.bias.iter_mut() {
                *b = flat[pos];
                pos += 1;
            }
        }
        pos
    }

    pub fn sum_sq_weights(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().chain(l.bias.iter()).map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Output for a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let batch = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward_batch(batch)?.into_raw_vec_and_offset().0)
    }

    /// Outputs for a batch of inputs (one per row).
    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut a = input.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.weight.t());
            z += &l.bias;
            check_finite(&z, i)?;
            z.mapv_inplace(|v| l.activation.value(v));
            a = z;
        }
        Ok(a)
    }

    /// Output and its directional derivative along `direction` (Jacobian-vector product).
    pub fn tangent_forward(&self, input: &[f64], direction: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if direction.len() != input.len() {
            return Err(Error::Shape(format!(
                "direction width {} != input width {}",
                direction.len(),
                input.len()
            )));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::Shape(e.to_string()))?;
        let dx = ArrayView2::from_shape((1, direction.len()), direction).map_err(|e| Error::Shape(e.to_string()))?;
        let cache = self.forward_cached(x, Some(dx))?;
        let out = cache.output.row(0).to_vec();
        let tan = cache.output_tangent.as_ref().expect("tangent requested").row(0).to_vec();
        Ok((out, tan))
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_width() {
            return Err(Error::Shape(format!(
                "input width {width} does not match first layer ({})",
                self.input_width()
            )));
        }
        Ok(())
    }

    /// Forward pass that records what the backward pass needs. When `tangent`
    /// is given, also propagates input tangents row by row.
    pub fn forward_cached(&self, input: ArrayView2<'_, f64>, tangent: Option<ArrayView2<'_, f64>>) -> Result<ForwardCache> {
        self.check_input(input.ncols())?;
        if let Some(t) = &tangent {
            if t.dim() != input.dim() {
                return Err(Error::Shape(format!("tangent shape {:?} != input shape {:?}", t.dim(), input.dim())));
            }
        }
        let nl = self.layers.len();
        let mut inputs = Vec::with_capacity(nl);
        let mut pre = Vec::with_capacity(nl);
        let mut t_inputs = tangent.as_ref().map(|_| Vec::with_capacity(nl));
        let mut t_pre = tangent.as_ref().map(|_| Vec::with_capacity(nl));
        let mut a = input.to_owned();
        let mut ta = tangent.map(|t| t.to_owned());
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.weight.t());
            z += &l.bias;
            check_finite(&z, i)?;
            let next = z.mapv(|v| l.activation.value(v));
            if let Some(ta_cur) = ta.take() {
                let tz = ta_cur.dot(&l.weight.t());
                let mut tnext = tz.clone();
                ndarray::Zip::from(&mut tnext).and(&z).for_each(|t, &zv| *t *= l.activation.slope(zv));
                t_inputs.as_mut().expect("tangent mode").push(ta_cur);
                t_pre.as_mut().expect("tangent mode").push(tz);
                ta = Some(tnext);
            }
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Ok(ForwardCache {
            inputs,
            pre,
            tangent_inputs: t_inputs,
            tangent_pre: t_pre,
            output: a,
            output_tangent: ta,
        })
    }

    /// Reverse pass: given adjoints of the output (and of the output tangent,
    /// when the cache carries tangents) returns parameter and input adjoints.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_output: ArrayView2<'_, f64>,
        d_output_tangent: Option<ArrayView2<'_, f64>>,
    ) -> Result<(MlpGrads, InputGrads)> {
        if d_output.dim() != cache.output.dim() {
            return Err(Error::Shape(format!(
                "output adjoint shape {:?} != output shape {:?}",
                d_output.dim(),
                cache.output.dim()
            )));
        }
        let has_tangent = cache.tangent_pre.is_some();
        if d_output_tangent.is_some() && !has_tangent {
            return Err(Error::Shape("tangent adjoint given but forward pass had no tangent".into()));
        }
        let mut da = d_output.to_owned();
        let mut dta = if has_tangent {
            Some(match d_output_tangent {
                Some(t) => t.to_owned(),
                None => Array2::zeros(cache.output.dim()),
            })
        } else {
            None
        };
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre[i];
            let act = l.activation;
            // dz = da ⊙ σ'(z) [+ dta ⊙ σ''(z) ⊙ ż]
            let mut dz = da;
            ndarray::Zip::from(&mut dz).and(z).for_each(|g, &zv| *g *= act.slope(zv));
            let mut dtz = None;
            if let Some(dta_cur) = dta.take() {
                let tz = &cache.tangent_pre.as_ref().expect("tangent mode")[i];
                if act == Activation::Elu {
                    ndarray::Zip::from(&mut dz)
                        .and(&dta_cur)
                        .and(z)
                        .and(tz)
                        .for_each(|g, &dt, &zv, &tzv| *g += dt * act.curvature(zv) * tzv);
                }
                let mut d = dta_cur;
                ndarray::Zip::from(&mut d).and(z).for_each(|g, &zv| *g *= act.slope(zv));
                dtz = Some(d);
            }
            let mut gw = dz.t().dot(&cache.inputs[i]);
            if let Some(dtz) = &dtz {
                let tin = &cache.tangent_inputs.as_ref().expect("tangent mode")[i];
                gw += &dtz.t().dot(tin);
            }
            let gb = dz.sum_axis(Axis(0));
            grads.push(DenseGrad { weight: gw, bias: gb });
            da = dz.dot(&l.weight);
            dta = dtz.map(|d| d.dot(&l.weight));
        }
        grads.reverse();
        Ok((
            MlpGrads { layers: grads },
            InputGrads {
                input: da,
                tangent: dta,
            },
        ))
    }

    /// Value and parameter gradient of a scalar objective of the batch output.
    ///
    /// `objective` maps the `batch × out` output matrix to `(value, ∂value/∂output)`.
    pub fn value_and_grad<F>(&self, input: ArrayView2<'_, f64>, objective: F) -> Result<(f64, MlpGrads)>
    where
        F: FnOnce(&Array2<f64>) -> (f64, Array2<f64>),
    {
        let cache = self.forward_cached(input, None)?;
        let (value, d_out) = objective(&cache.output);
        if !value.is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        let (grads, _) = self.backward(&cache, d_out.view(), None)?;
        Ok((value, grads))
    }

    pub fn to_file(&self) -> MlpFile {
        MlpFile {
            format: MLP_FORMAT.into(),
            version: MLP_VERSION,
            widths: self.widths(),
            activations: self.layers.iter().map(|l| l.activation).collect(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    rows: l.outputs(),
                    cols: l.inputs(),
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_file(file: &MlpFile) -> Result<Self> {
        if file.format != MLP_FORMAT || file.version != MLP_VERSION {
            return Err(Error::Format(format!(
                "unsupported network file {} v{}",
                file.format, file.version
            )));
        }
        if file.layers.len() != file.activations.len() || file.widths.len() != file.layers.len() + 1 {
            return Err(Error::Format("layer, width and activation counts disagree".into()));
        }
        let layers = file
            .layers
            .iter()
            .zip(&file.activations)
            .enumerate()
            .map(|(i, (rec, &activation))| {
                if rec.rows != file.widths[i + 1] || rec.cols != file.widths[i] {
                    return Err(Error::Format(format!("layer {i} shape disagrees with the width header")));
                }
                let weight = Array2::from_shape_vec((rec.rows, rec.cols), rec.weight.clone())
                    .map_err(|e| Error::Format(format!("layer {i}: {e}")))?;
                Ok(Dense {
                    weight,
                    bias: Array1::from(rec.bias.clone()),
                    activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(layers)
    }
}

pub const MLP_FORMAT: &str = "riesz-mlp";
pub const MLP_VERSION: u32 = 1;

/// On-disk network: architecture header plus row-major `out × in` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpFile {
    pub format: String,
    pub version: u32,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

fn check_finite(z: &Array2<f64>, layer: usize) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite pre-activation in layer {layer}")))
    }
}
