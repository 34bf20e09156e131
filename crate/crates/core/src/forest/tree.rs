use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{FeatureMap, RieszForestConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, quad_form, solve_ridge};
use crate::moments::{DiffFnOracle, MomentFunctional};
use crate::rng::RngSeed;

/// What a tree's splits try to improve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Riesz,
    Multitask { regression_weight: f64 },
    Regression,
}

impl Objective {
    pub fn keeps_regression(self) -> bool {
        !matches!(self, Objective::Riesz)
    }
}

/// Per-sample quantities the forest works with: `φ(tᵢ)`, `m(Wᵢ; φ)`, `yᵢ`, `xᵢ`.
#[derive(Debug, Clone)]
pub struct SampleData {
    k: usize,
    phi: Vec<f64>,
    m: Vec<f64>,
    y: Vec<f64>,
    x: Array2<f64>,
}

impl SampleData {
    pub fn prepare(data: &Dataset, moment: &MomentFunctional, map: FeatureMap) -> Result<Self> {
        moment.check_dataset(data)?;
        let k = map.dim();
        let n = data.n();
        let mut phi = vec![0.0; n * k];
        for i in 0..n {
            map.eval_into(data.t()[i], &mut phi[i * k..(i + 1) * k]);
        }
        let mut m = vec![0.0; n * k];
        for j in 0..k {
            let oracle = DiffFnOracle {
                value: move |t: f64, _: &[f64]| map.eval(t)[j],
                derivative: move |t: f64, _: &[f64]| map.derivative(t)[j],
            };
            let col = moment.evaluate_dataset(&oracle, data)?;
            for (i, v) in col.into_iter().enumerate() {
                m[i * k + j] = v;
            }
        }
        Ok(SampleData {
            k,
            phi,
            m,
            y: data.y().to_vec(),
            x: data.x().clone(),
        })
    }

    /// Constant feature, zero moment: only the regression block is informative.
    pub fn regression(x: Array2<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!("{} rows vs {} targets", x.nrows(), y.len())));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("regression inputs must be finite".into()));
        }
        let n = y.len();
        Ok(SampleData {
            k: 1,
            phi: vec![1.0; n],
            m: vec![0.0; n],
            y,
            x: x.as_standard_layout().into_owned(),
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn phi(&self, i: usize) -> &[f64] {
        &self.phi[i * self.k..(i + 1) * self.k]
    }

    pub fn moment(&self, i: usize) -> &[f64] {
        &self.m[i * self.k..(i + 1) * self.k]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::Shape("outcome length changed".into()));
        }
        Ok(SampleData { y, ..self.clone() })
    }
}

/// Sufficient statistics of a set of samples (sums, not means).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSums {
    pub n: usize,
    pub phiphi: Vec<f64>,
    pub m: Vec<f64>,
    pub phiy: Vec<f64>,
    pub yy: f64,
}

impl NodeSums {
    pub fn zeros(k: usize) -> Self {
        NodeSums {
            n: 0,
            phiphi: vec![0.0; k * k],
            m: vec![0.0; k],
            phiy: vec![0.0; k],
            yy: 0.0,
        }
    }

    pub fn from_indices(s: &SampleData, idx: &[usize]) -> Self {
        let mut out = NodeSums::zeros(s.k);
        for &i in idx {
            out.add(s, i);
        }
        out
    }

    pub fn add(&mut self, s: &SampleData, i: usize) {
        self.update(s, i, 1.0);
        self.n += 1;
    }

    pub fn remove(&mut self, s: &SampleData, i: usize) {
        self.update(s, i, -1.0);
        self.n -= 1;
    }

    fn update(&mut self, s: &SampleData, i: usize, sign: f64) {
        let k = s.k;
        let phi = s.phi(i);
        let y = s.y[i];
        for a in 0..k {
            for b in 0..k {
                self.phiphi[a * k + b] += sign * phi[a] * phi[b];
            }
            self.m[a] += sign * s.moment(i)[a];
            self.phiy[a] += sign * phi[a] * y;
        }
        self.yy += sign * y * y;
    }

    fn means(v: &[f64], n: usize) -> Vec<f64> {
        v.iter().map(|x| x / n as f64).collect()
    }

    pub fn jacobian(&self) -> Vec<f64> {
        Self::means(&self.phiphi, self.n)
    }

    pub fn moment(&self) -> Vec<f64> {
        Self::means(&self.m, self.n)
    }

    pub fn regression_rhs(&self) -> Vec<f64> {
        Self::means(&self.phiy, self.n)
    }

    /// `n · βᵀJβ` at the ridge solution, or `None` for a degenerate node.
    pub fn riesz_criterion(&self, l2: f64) -> Option<f64> {
        if self.n == 0 {
            return None;
        }
        let j = self.jacobian();
        let beta = solve_ridge(&j, &self.moment(), l2).ok()?;
        Some(self.n as f64 * quad_form(&j, &beta))
    }

    /// Residual sum of squares of the local ridge regression of `y` on `φ`.
    pub fn sse(&self, l2: f64) -> Option<f64> {
        if self.n == 0 {
            return None;
        }
        let gamma = solve_ridge(&self.jacobian(), &self.regression_rhs(), l2).ok()?;
        Some(self.yy - 2.0 * dot(&gamma, &self.phiy) + quad_form(&self.phiphi, &gamma))
    }

    fn to_leaf(&self, keep_regression: bool, n_split: usize) -> LeafStats {
        LeafStats {
            n_split,
            n_est: self.n,
            jacobian: self.jacobian(),
            moment: self.moment(),
            regression: keep_regression.then(|| self.regression_rhs()),
        }
    }
}

/// `(J + l2·I)⁻¹ M` for a node.
pub fn leaf_solve(sums: &NodeSums, l2: f64) -> Result<Vec<f64>> {
    if sums.n == 0 {
        return Err(Error::Degenerate("empty leaf".into()));
    }
    solve_ridge(&sums.jacobian(), &sums.moment(), l2)
}

/// `Σ_child n_c · β_cᵀ J_c β_c`; `None` if either child is degenerate.
pub fn split_criterion(left: &NodeSums, right: &NodeSums, l2: f64) -> Option<f64> {
    Some(left.riesz_criterion(l2)? + right.riesz_criterion(l2)?)
}

/// Constants shared by every split search in one tree.
#[derive(Debug, Clone, Copy)]
pub struct SplitContext {
    pub objective: Objective,
    pub l2: f64,
    pub min_samples_leaf: usize,
    pub min_impurity_decrease: f64,
    /// Root-node criterion values used to normalize gains.
    pub root_riesz: f64,
    pub root_sse: f64,
}

impl SplitContext {
    pub fn new(objective: Objective, cfg: &RieszForestConfig, root: &NodeSums) -> Self {
        let norm = |v: Option<f64>| match v {
            Some(v) if v.is_finite() && v > 1e-300 => v,
            _ => 1.0,
        };
        SplitContext {
            objective,
            l2: cfg.l2,
            min_samples_leaf: cfg.min_samples_leaf,
            min_impurity_decrease: cfg.min_impurity_decrease,
            root_riesz: norm(root.riesz_criterion(cfg.l2)),
            root_sse: norm(root.sse(cfg.l2)),
        }
    }

    /// Normalized improvement of splitting `parent` into `left` and `right`.
    pub fn gain(&self, parent: &NodeSums, left: &NodeSums, right: &NodeSums) -> Option<f64> {
        let riesz = || -> Option<f64> {
            Some((split_criterion(left, right, self.l2)? - parent.riesz_criterion(self.l2)?) / self.root_riesz)
        };
        let reg = || -> Option<f64> {
            Some((parent.sse(self.l2)? - left.sse(self.l2)? - right.sse(self.l2)?) / self.root_sse)
        };
        match self.objective {
            Objective::Riesz => riesz(),
            Objective::Regression => reg(),
            Objective::Multitask { regression_weight } => Some(riesz()? + regression_weight * reg()?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Best admissible split of a node over `features` (ascending order gives
/// ties to the lowest feature index, then the lowest threshold). Both
/// children need `min_samples_leaf` samples from `split_idx` and from
/// `est_idx`; only gains above `min_impurity_decrease` qualify.
pub fn best_split(
    s: &SampleData,
    split_idx: &[usize],
    est_idx: &[usize],
    features: &[usize],
    ctx: &SplitContext,
) -> Option<SplitCandidate> {
    let msl = ctx.min_samples_leaf;
    let n = split_idx.len();
    if n < 2 * msl || est_idx.len() < 2 * msl {
        return None;
    }
    let parent = NodeSums::from_indices(s, split_idx);
    let mut best: Option<SplitCandidate> = None;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut est_vals: Vec<f64> = Vec::with_capacity(est_idx.len());
    for &f in features {
        order.clear();
        order.extend(split_idx.iter().map(|&i| (s.x[[i, f]], i)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        est_vals.clear();
        est_vals.extend(est_idx.iter().map(|&i| s.x[[i, f]]));
        est_vals.sort_by(f64::total_cmp);
        let mut left = NodeSums::zeros(s.k);
        let mut right = parent.clone();
        for p in 1..n {
            let i = order[p - 1].1;
            left.add(s, i);
            right.remove(s, i);
            if p < msl || n - p < msl {
                continue;
            }
            let (lo, hi) = (order[p - 1].0, order[p].0);
            if lo == hi {
                continue;
            }
            let mut threshold = lo + (hi - lo) / 2.0;
            if threshold >= hi {
                threshold = lo;
            }
            let est_left = est_vals.partition_point(|&v| v <= threshold);
            if est_left < msl || est_vals.len() - est_left < msl {
                continue;
            }
            let Some(gain) = ctx.gain(&parent, &left, &right) else {
                continue;
            };
            if gain > ctx.min_impurity_decrease && best.is_none_or(|b| gain > b.gain) {
                best = Some(SplitCandidate {
                    feature: f,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeafStats {
    pub n_split: usize,
    pub n_est: usize,
    /// Mean `φφᵀ` over the estimation samples, row-major.
    pub jacobian: Vec<f64>,
    /// Mean `m(W; φ)`.
    pub moment: Vec<f64>,
    /// Mean `φ·y`, kept when the tree carries a regression.
    pub regression: Option<Vec<f64>>,
}

/// Tree node; `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tree {
    pub nodes: Vec<Node>,
    pub leaves: Vec<LeafStats>,
}

struct Grower<'a> {
    s: &'a SampleData,
    cfg: &'a RieszForestConfig,
    ctx: SplitContext,
    mtry: usize,
    rng: crate::rng::Rng,
    tree: Tree,
}

impl Grower<'_> {
    fn grow(&mut self, split_idx: Vec<usize>, est_idx: Vec<usize>, depth: usize) -> usize {
        let id = self.tree.nodes.len();
        self.tree.nodes.push(Node::Leaf { leaf: usize::MAX });
        let can_split = self.cfg.max_depth.is_none_or(|m| depth < m);
        let candidate = if can_split {
            let mut feats = rand::seq::index::sample(&mut self.rng, self.s.d(), self.mtry).into_vec();
            feats.sort_unstable();
            best_split(self.s, &split_idx, &est_idx, &feats, &self.ctx)
        } else {
            None
        };
        match candidate {
            Some(c) => {
                let s = self.s;
                let goes_left = |i: &usize| s.x[[*i, c.feature]] <= c.threshold;
                let (sl, sr): (Vec<usize>, Vec<usize>) = split_idx.into_iter().partition(goes_left);
                let (el, er): (Vec<usize>, Vec<usize>) = est_idx.into_iter().partition(goes_left);
                let left = self.grow(sl, el, depth + 1);
                let right = self.grow(sr, er, depth + 1);
                self.tree.nodes[id] = Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left,
                    right,
                };
            }
            None => {
                let sums = NodeSums::from_indices(self.s, &est_idx);
                let leaf = self.tree.leaves.len();
                self.tree.leaves.push(sums.to_leaf(self.ctx.objective.keeps_regression(), split_idx.len()));
                self.tree.nodes[id] = Node::Leaf { leaf };
            }
        }
        id
    }
}

impl Tree {
    /// Grows a tree whose structure is chosen on `split_idx` and whose leaf
    /// statistics come from `est_idx` (the same rows for a non-honest tree).
    pub fn grow(
        s: &SampleData,
        split_idx: Vec<usize>,
        est_idx: Vec<usize>,
        cfg: &RieszForestConfig,
        objective: Objective,
        seed: RngSeed,
    ) -> Result<Tree> {
        if split_idx.len() < cfg.min_samples_leaf || est_idx.len() < cfg.min_samples_leaf {
            return Err(Error::Validation(format!(
                "tree needs at least {} rows per half, got {} and {}",
                cfg.min_samples_leaf,
                split_idx.len(),
                est_idx.len()
            )));
        }
        let root = NodeSums::from_indices(s, &split_idx);
        let d = s.d();
        let mtry = cfg
            .max_features
            .unwrap_or(d)
            .clamp(1, d.max(1));
        let mut g = Grower {
            s,
            cfg,
            ctx: SplitContext::new(objective, cfg, &root),
            mtry,
            rng: seed.rng(),
            tree: Tree {
                nodes: Vec::new(),
                leaves: Vec::new(),
            },
        };
        if d == 0 {
            let sums = NodeSums::from_indices(s, &est_idx);
            g.tree.nodes.push(Node::Leaf { leaf: 0 });
            g.tree.leaves.push(sums.to_leaf(objective.keeps_regression(), split_idx.len()));
            return Ok(g.tree);
        }
        g.grow(split_idx, est_idx, 0);
        Ok(g.tree)
    }

    pub fn leaf_for(&self, x: &[f64]) -> &LeafStats {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { leaf } => return &self.leaves[*leaf],
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => id = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, id: usize) -> usize {
            match &t.nodes[id] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }

    /// `(feature, threshold)` of every split in node order.
    pub fn splits(&self) -> Vec<(usize, f64)> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, threshold, .. } => Some((*feature, *threshold)),
                Node::Leaf { .. } => None,
            })
            .collect()
    }

    pub(crate) fn validate(&self, d: usize, k: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Format(m));
        if self.nodes.is_empty() {
            return bad("tree without nodes".into());
        }
        for (id, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if *feature >= d || !threshold.is_finite() {
                        return bad(format!("node {id}: bad split"));
                    }
                    if *left <= id || *right <= id || *left >= self.nodes.len() || *right >= self.nodes.len() {
                        return bad(format!("node {id}: child offsets out of order"));
                    }
                }
                Node::Leaf { leaf } => {
                    let Some(l) = self.leaves.get(*leaf) else {
                        return bad(format!("node {id}: missing leaf {leaf}"));
                    };
                    if l.jacobian.len() != k * k || l.moment.len() != k || l.regression.as_ref().is_some_and(|r| r.len() != k) {
                        return bad(format!("leaf {leaf}: statistics have the wrong size"));
                    }
                }
            }
        }
        Ok(())
    }
}
