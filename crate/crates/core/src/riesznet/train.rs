use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{use_exact, RieszNet, Standardizer};
use super::{LossBreakdown, RieszNetConfig, StageConfig};
use crate::dataset::{Dataset, TreatmentKind};
use crate::error::{Error, Result};
use crate::folds::train_test_split;
use crate::moments::MomentFunctional;
use crate::neural::AdamState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    /// Mean combined loss over the epoch's minibatches.
    pub train_loss: f64,
    pub test_loss: f64,
    /// Best test loss seen so far in this stage (the checkpoint value).
    pub best_test_loss: f64,
}

/// Evaluation points needed for one sample: `ts[0]` is the observed
/// treatment and each term is `(point, weight, uses_derivative)`.
#[derive(Debug, Clone)]
pub(crate) struct SampleStencil {
    ts: Vec<f64>,
    terms: Vec<(usize, f64, bool)>,
}

pub(crate) fn build_stencils(data: &Dataset, moment: &MomentFunctional, exact: bool) -> Result<Vec<SampleStencil>> {
    (0..data.n())
        .map(|i| {
            let t_obs = data.t()[i];
            let mut ts = vec![t_obs];
            let mut terms = Vec::new();
            for term in moment.stencil(t_obs, data.x_row(i), exact)? {
                let point = match ts.iter().position(|&t| t == term.t) {
                    Some(p) => p,
                    None => {
                        ts.push(term.t);
                        ts.len() - 1
                    }
                };
                terms.push((point, term.weight, term.derivative));
            }
            Ok(SampleStencil { ts, terms })
        })
        .collect()
}

pub(crate) struct Weights {
    pub lambda_riesz: f64,
    pub lambda_tmle: f64,
    pub l2: f64,
}

impl From<&RieszNetConfig> for Weights {
    fn from(c: &RieszNetConfig) -> Self {
        Weights {
            lambda_riesz: c.lambda_riesz,
            lambda_tmle: c.lambda_tmle,
            l2: c.l2,
        }
    }
}

impl RieszNet {
    /// Loss terms over `rows` of `data` and, if asked, the gradient of the
    /// data terms (penalty excluded) in [`RieszNet::write_flat`] order.
    pub(crate) fn objective(
        &self,
        data: &Dataset,
        stencils: &[SampleStencil],
        rows: &[usize],
        w: &Weights,
        want_grad: bool,
    ) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
        let b = rows.len();
        if b == 0 {
            return Err(Error::Validation("empty batch".into()));
        }
        if self.bi_headed() {
            return self.objective_arms(data, stencils, rows, w, want_grad);
        }
        let d = data.d();
        let width = d + 1;
        let std: &Standardizer = &self.standardizer;
        let mut offsets = Vec::with_capacity(b);
        let mut points = 0;
        let mut need_tangent = false;
        for &i in rows {
            offsets.push(points);
            points += stencils[i].ts.len();
            need_tangent |= stencils[i].terms.iter().any(|t| t.2);
        }
        let mut input = Array2::zeros((points, width));
        {
            let buf = input.as_slice_mut().expect("standard layout");
            for (k, &i) in rows.iter().enumerate() {
                for (p, &t) in stencils[i].ts.iter().enumerate() {
                    let r = offsets[k] + p;
                    std.write_row(t, data.x_row(i), &mut buf[r * width..(r + 1) * width]);
                }
            }
        }
        let dir = need_tangent.then(|| std.t_direction(points, width));
        let cache = self.shared.forward_cached(input.view(), dir.as_ref().map(|d| d.view()))?;
        let f = cache.output();
        let alpha = f.dot(&self.beta);
        let alpha_dot = cache.output_tangent().map(|df| df.dot(&self.beta));
        let f_obs = f.select(Axis(0), &offsets);
        let head_caches = self
            .heads
            .iter()
            .map(|h| h.forward_cached(f_obs.view(), None))
            .collect::<Result<Vec<_>>>()?;

        let bf = b as f64;
        let eps = self.epsilon;
        let mut g = vec![0.0; b];
        let (mut reg, mut rr, mut tmle) = (0.0, 0.0, 0.0);
        let mut resid = vec![0.0; b];
        let mut resid_t = vec![0.0; b];
        for (k, &i) in rows.iter().enumerate() {
            g[k] = head_caches[0].output()[[k, 0]];
            let a = alpha[offsets[k]];
            let m: f64 = stencils[i]
                .terms
                .iter()
                .map(|&(p, wt, der)| {
                    let r = offsets[k] + p;
                    wt * if der {
                        alpha_dot.as_ref().expect("tangent")[r]
                    } else {
                        alpha[r]
                    }
                })
                .sum();
            let y = data.y()[i];
            resid[k] = y - g[k];
            resid_t[k] = y - g[k] - eps * a;
            reg += resid[k] * resid[k];
            tmle += resid_t[k] * resid_t[k];
            rr += a * a - 2.0 * m;
        }
        let (reg, rr, tmle) = (reg / bf, rr / bf, tmle / bf);
        let penalty = w.l2 * self.sum_sq_weights();
        let combined = reg + w.lambda_riesz * rr + w.lambda_tmle * tmle + penalty;
        let losses = LossBreakdown {
            reg,
            rr,
            tmle,
            penalty,
            combined,
        };
        if !combined.is_finite() {
            return Err(Error::Numeric("combined loss is not finite".into()));
        }
        if !want_grad {
            return Ok((losses, None));
        }

        let (l1, l2t) = (w.lambda_riesz, w.lambda_tmle);
        let mut d_alpha = Array1::<f64>::zeros(points);
        let mut d_alpha_dot = need_tangent.then(|| Array1::<f64>::zeros(points));
        let mut d_g = vec![0.0; b];
        let mut d_eps = 0.0;
        for (k, &i) in rows.iter().enumerate() {
            let a = alpha[offsets[k]];
            d_g[k] = (-2.0 * resid[k] - 2.0 * l2t * resid_t[k]) / bf;
            d_alpha[offsets[k]] += (2.0 * l1 * a - 2.0 * l2t * eps * resid_t[k]) / bf;
            d_eps += -2.0 * l2t * a * resid_t[k] / bf;
            for &(p, wt, der) in &stencils[i].terms {
                let r = offsets[k] + p;
                let v = -2.0 * l1 * wt / bf;
                if der {
                    d_alpha_dot.as_mut().expect("tangent")[r] += v;
                } else {
                    d_alpha[r] += v;
                }
            }
        }

        let h = self.beta.len();
        let mut d_f = outer(&d_alpha, &self.beta);
        let d_f_dot = d_alpha_dot.as_ref().map(|da| outer(da, &self.beta));
        let mut d_beta = f.t().dot(&d_alpha);
        if let (Some(df), Some(da)) = (cache.output_tangent(), &d_alpha_dot) {
            d_beta += &df.t().dot(da);
        }
        let mut head_grads = Vec::with_capacity(self.heads.len());
        for (hk, head) in self.heads.iter().enumerate() {
            let d_out = Array2::from_shape_vec((b, 1), d_g.clone()).expect("column");
            let (grads, d_in) = head.backward(&head_caches[hk], d_out.view(), None)?;
            for k in 0..b {
                let mut row = d_f.row_mut(offsets[k]);
                row += &d_in.input.row(k);
            }
            head_grads.push(grads);
        }
        debug_assert_eq!(d_f.ncols(), h);
        let (shared_grads, _) = self
            .shared
            .backward(&cache, d_f.view(), d_f_dot.as_ref().map(|d| d.view()))?;

        let mut flat = Vec::with_capacity(self.num_params());
        shared_grads.write_flat(&mut flat);
        flat.extend(d_beta.iter());
        for gr in &head_grads {
            gr.write_flat(&mut flat);
        }
        flat.push(d_eps);
        Ok((losses, Some(flat)))
    }

    /// [`RieszNet::objective`] for bi-headed nets. Each sample needs one
    /// trunk pass; every stencil point is a mix of the two arms, with
    /// coefficients `(1 − t, t)` for values and `(−1, 1)` for `∂/∂t`.
    fn objective_arms(
        &self,
        data: &Dataset,
        stencils: &[SampleStencil],
        rows: &[usize],
        w: &Weights,
        want_grad: bool,
    ) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
        let b = rows.len();
        let xs = data.x().select(Axis(0), rows);
        let input = self.standardizer.x_inputs(xs.view());
        let cache = self.shared.forward_cached(input.view(), None)?;
        let f = cache.output();
        let (b0, b1) = self.beta_arms();
        let (a0, a1) = (f.dot(&b0), f.dot(&b1));
        let hc0 = self.heads[0].forward_cached(f.view(), None)?;
        let hc1 = self.heads[1].forward_cached(f.view(), None)?;
        let coeffs = |i: usize| {
            stencils[i].terms.iter().map(move |&(p, wt, der)| {
                if der {
                    (-wt, wt)
                } else {
                    let tp = stencils[i].ts[p];
                    (wt * (1.0 - tp), wt * tp)
                }
            })
        };

        let bf = b as f64;
        let eps = self.epsilon;
        let (mut reg, mut rr, mut tmle) = (0.0, 0.0, 0.0);
        let mut resid = vec![0.0; b];
        let mut resid_t = vec![0.0; b];
        let mut alpha = vec![0.0; b];
        for (k, &i) in rows.iter().enumerate() {
            let t = data.t()[i];
            let g = t * hc1.output()[[k, 0]] + (1.0 - t) * hc0.output()[[k, 0]];
            alpha[k] = t * a1[k] + (1.0 - t) * a0[k];
            let m: f64 = coeffs(i).map(|(c0, c1)| c0 * a0[k] + c1 * a1[k]).sum();
            let y = data.y()[i];
            resid[k] = y - g;
            resid_t[k] = y - g - eps * alpha[k];
            reg += resid[k] * resid[k];
            tmle += resid_t[k] * resid_t[k];
            rr += alpha[k] * alpha[k] - 2.0 * m;
        }
        let (reg, rr, tmle) = (reg / bf, rr / bf, tmle / bf);
        let penalty = w.l2 * self.sum_sq_weights();
        let combined = reg + w.lambda_riesz * rr + w.lambda_tmle * tmle + penalty;
        if !combined.is_finite() {
            return Err(Error::Numeric("combined loss is not finite".into()));
        }
        let losses = LossBreakdown {
            reg,
            rr,
            tmle,
            penalty,
            combined,
        };
        if !want_grad {
            return Ok((losses, None));
        }

        let (l1, l2t) = (w.lambda_riesz, w.lambda_tmle);
        let mut da0 = Array1::<f64>::zeros(b);
        let mut da1 = Array1::<f64>::zeros(b);
        let mut dh0 = Array2::<f64>::zeros((b, 1));
        let mut dh1 = Array2::<f64>::zeros((b, 1));
        let mut d_eps = 0.0;
        for (k, &i) in rows.iter().enumerate() {
            let t = data.t()[i];
            let dg = (-2.0 * resid[k] - 2.0 * l2t * resid_t[k]) / bf;
            dh0[[k, 0]] = (1.0 - t) * dg;
            dh1[[k, 0]] = t * dg;
            let da = (2.0 * l1 * alpha[k] - 2.0 * l2t * eps * resid_t[k]) / bf;
            da0[k] += (1.0 - t) * da;
            da1[k] += t * da;
            d_eps += -2.0 * l2t * alpha[k] * resid_t[k] / bf;
            for (c0, c1) in coeffs(i) {
                da0[k] += -2.0 * l1 * c0 / bf;
                da1[k] += -2.0 * l1 * c1 / bf;
            }
        }
        let (g0, in0) = self.heads[0].backward(&hc0, dh0.view(), None)?;
        let (g1, in1) = self.heads[1].backward(&hc1, dh1.view(), None)?;
        let mut d_f = outer(&da0, &b0.to_owned()) + outer(&da1, &b1.to_owned());
        d_f += &in0.input;
        d_f += &in1.input;
        let (shared_grads, _) = self.shared.backward(&cache, d_f.view(), None)?;

        let mut flat = Vec::with_capacity(self.num_params());
        shared_grads.write_flat(&mut flat);
        flat.extend(f.t().dot(&da0).iter());
        flat.extend(f.t().dot(&da1).iter());
        g0.write_flat(&mut flat);
        g1.write_flat(&mut flat);
        flat.push(d_eps);
        Ok((losses, Some(flat)))
    }

    /// Combined training loss on `data` and its full gradient (penalty
    /// included, ε unpenalized) in [`RieszNet::write_flat`] order.
    pub fn combined_loss_and_grad(
        &self,
        data: &Dataset,
        moment: &MomentFunctional,
        config: &RieszNetConfig,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        moment.check_dataset(data)?;
        let stencils = build_stencils(data, moment, use_exact(moment))?;
        let rows: Vec<usize> = (0..data.n()).collect();
        let (losses, grad) = self.objective(data, &stencils, &rows, &Weights::from(config), true)?;
        let mut grad = grad.expect("gradient requested");
        let mut params = Vec::with_capacity(grad.len());
        self.write_flat(&mut params);
        for ((g, p), decays) in grad.iter_mut().zip(&params).zip(self.decay_mask()) {
            if decays {
                *g += 2.0 * config.l2 * p;
            }
        }
        Ok((losses, grad))
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        if a[i] != 0.0 {
            row.scaled_add(a[i], b);
        }
    }
    out
}

/// Fits a RieszNet with the two-stage schedule: each stage runs Adam from a
/// fresh state, checks the combined loss on a held-out split after every
/// epoch, stops after `patience` epochs without `tol` improvement and rolls
/// back to the best checkpoint.
pub fn train(data: &Dataset, moment: &MomentFunctional, config: &RieszNetConfig) -> Result<RieszNet> {
    config.validate()?;
    moment.check_dataset(data)?;
    let binary = data.treatment_kind() == TreatmentKind::Binary;
    let bi_headed = config.bi_headed.unwrap_or(binary);
    if bi_headed && !binary {
        return Err(Error::Incompatible("bi-headed regression needs a binary treatment".into()));
    }
    let (train_rows, test_rows) = train_test_split(data.n(), config.test_fraction, config.seed.derive(10))?;
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(Error::Validation(format!(
            "{} rows are too few for a train/test split at fraction {}",
            data.n(),
            config.test_fraction
        )));
    }
    let mut net = RieszNet::init(data.d(), bi_headed, Standardizer::fit(data), config)?;
    let stencils = build_stencils(data, moment, use_exact(moment))?;
    let weights = Weights::from(config);
    let mask = net.decay_mask();
    let mut rng = config.seed.derive(11).rng();
    let mut order = train_rows.clone();

    for (stage_name, stage) in [("fast", &config.fast), ("fine", &config.fine)] {
        run_stage(
            &mut net,
            stage_name,
            stage,
            StageInputs {
                data,
                stencils: &stencils,
                test_rows: &test_rows,
                weights: &weights,
                mask: &mask,
                batch_size: config.batch_size,
                l2: config.l2,
            },
            &mut order,
            &mut rng,
        )?;
    }
    Ok(net)
}

struct StageInputs<'a> {
    data: &'a Dataset,
    stencils: &'a [SampleStencil],
    test_rows: &'a [usize],
    weights: &'a Weights,
    mask: &'a [bool],
    batch_size: usize,
    l2: f64,
}

fn run_stage(
    net: &mut RieszNet,
    name: &'static str,
    stage: &StageConfig,
    inp: StageInputs<'_>,
    order: &mut [usize],
    rng: &mut crate::rng::Rng,
) -> Result<()> {
    let diverged = |epoch: usize, e: Error| match e {
        Error::Numeric(message) => Error::Training {
            stage: name,
            epoch,
            message,
        },
        other => other,
    };
    let test_loss = |net: &RieszNet, epoch: usize| -> Result<f64> {
        net.objective(inp.data, inp.stencils, inp.test_rows, inp.weights, false)
            .map(|(l, _)| l.combined)
            .map_err(|e| diverged(epoch, e))
    };
    let mut params = Vec::with_capacity(net.num_params());
    net.write_flat(&mut params);
    let mut best_params = params.clone();
    let mut best = test_loss(net, 0)?;
    let mut adam = AdamState::new(params.len(), crate::neural::AdamConfig::with_lr(stage.lr));
    let mut stale = 0;
    for epoch in 1..=stage.max_epochs {
        order.shuffle(rng);
        let mut train_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(inp.batch_size) {
            let (losses, grad) = net
                .objective(inp.data, inp.stencils, chunk, inp.weights, true)
                .map_err(|e| diverged(epoch, e))?;
            // The penalty is l2·‖w‖², whose gradient is 2·l2·w.
            adam.step(&mut params, &grad.expect("gradient requested"), 2.0 * inp.l2, Some(inp.mask))
                .map_err(|e| diverged(epoch, e))?;
            net.read_flat(&params);
            train_sum += losses.combined;
            batches += 1;
        }
        let current = test_loss(net, epoch)?;
        if best - current > stage.tol {
            best = current;
            best_params.copy_from_slice(&params);
            stale = 0;
        } else {
            stale += 1;
        }
        net.history.push(EpochRecord {
            stage: name.to_string(),
            epoch,
            train_loss: train_sum / batches as f64,
            test_loss: current,
            best_test_loss: best,
        });
        log::debug!("{name} epoch {epoch}: train {:.5} test {current:.5} best {best:.5}", train_sum / batches as f64);
        if stale >= stage.patience {
            break;
        }
    }
    net.read_flat(&best_params);
    Ok(())
}
