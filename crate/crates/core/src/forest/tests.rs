use ndarray::{array, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::dataset::{Dataset, TreatmentKind};
use crate::moments::{FunctionOracle, MomentFunctional};

fn binary_data(n: usize, d: usize, seed: u64, propensity: impl Fn(&[f64]) -> f64) -> Dataset {
    let mut rng = RngSeed(seed).rng();
    let x = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i).to_vec();
        let ti = if rng.random::<f64>() < propensity(&row) { 1.0 } else { 0.0 };
        let e: f64 = StandardNormal.sample(&mut rng);
        t.push(ti);
        y.push(ti + row[0] + e);
    }
    Dataset::from_parts(y, t, x, TreatmentKind::Binary).unwrap()
}

fn continuous_data(n: usize, seed: u64) -> Dataset {
    let mut rng = RngSeed(seed).rng();
    let x = Array2::from_shape_simple_fn((n, 2), || rng.random_range(-1.0..1.0));
    let t: Vec<f64> = (0..n)
        .map(|i| x[[i, 0]] + 0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let y: Vec<f64> = (0..n).map(|i| t[i] * t[i] + x[[i, 1]]).collect();
    Dataset::from_parts(y, t, x, TreatmentKind::Continuous).unwrap()
}

fn small_config(seed: u64) -> RieszForestConfig {
    RieszForestConfig {
        n_trees: 10,
        min_samples_leaf: 10,
        seed: RngSeed(seed),
        ..RieszForestConfig::default()
    }
}

fn prepared(data: &Dataset) -> SampleData {
    SampleData::prepare(data, &MomentFunctional::ate(), FeatureMap::BinaryIndicators).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

#[test]
fn leaf_solve_is_within_leaf_ips() {
    let data = Dataset::from_parts(
        vec![0.0; 4],
        vec![0.0, 1.0, 1.0, 1.0],
        array![[0.1], [0.2], [0.3], [0.4]],
        TreatmentKind::Binary,
    )
    .unwrap();
    let s = prepared(&data);
    let sums = NodeSums::from_indices(&s, &[0, 1, 2, 3]);
    assert_eq!(sums.jacobian(), vec![0.25, 0.0, 0.0, 0.75]);
    assert_eq!(sums.moment(), vec![-1.0, 1.0]);
    let beta = leaf_solve(&sums, 0.0).unwrap();
    assert!((beta[0] + 4.0).abs() < 1e-12 && (beta[1] - 4.0 / 3.0).abs() < 1e-12);
    // Gradient descent on the empirical Riesz loss lands on the same point.
    let mut b = [0.0, 0.0];
    for _ in 0..20_000 {
        let mut grad = [0.0, 0.0];
        for i in 0..4 {
            let phi = s.phi(i);
            let a = phi[0] * b[0] + phi[1] * b[1];
            for j in 0..2 {
                grad[j] += (2.0 * a * phi[j] - 2.0 * s.moment(i)[j]) / 4.0;
            }
        }
        b[0] -= 0.5 * grad[0];
        b[1] -= 0.5 * grad[1];
    }
    assert!((b[0] - beta[0]).abs() < 1e-9 && (b[1] - beta[1]).abs() < 1e-9);
}

#[test]
fn zero_moment_gives_zero_beta() {
    let data = continuous_data(30, 1);
    let s = SampleData::prepare(&data, &MomentFunctional::avg_derivative(), FeatureMap::Polynomial { degree: 0 }).unwrap();
    let sums = NodeSums::from_indices(&s, &(0..30).collect::<Vec<_>>());
    assert_eq!(leaf_solve(&sums, 0.0).unwrap(), vec![0.0]);
}

#[test]
fn ridge_limit_shrinks_to_zero() {
    let data = binary_data(40, 2, 2, |_| 0.5);
    let s = prepared(&data);
    let sums = NodeSums::from_indices(&s, &(0..40).collect::<Vec<_>>());
    let beta = leaf_solve(&sums, 1e12).unwrap();
    assert!(beta.iter().all(|b| b.abs() < 1e-9));
}

fn arm_sums(n0: usize, n1: usize) -> NodeSums {
    let n = n0 + n1;
    let t: Vec<f64> = (0..n).map(|i| if i < n1 { 1.0 } else { 0.0 }).collect();
    let data = Dataset::from_parts(vec![0.0; n], t, Array2::zeros((n, 1)), TreatmentKind::Binary).unwrap();
    NodeSums::from_indices(&prepared(&data), &(0..n).collect::<Vec<_>>())
}

#[test]
fn criterion_of_arm_counts() {
    for (n0, n1) in [(1, 3), (5, 5), (7, 2), (10, 30)] {
        let n = (n0 + n1) as f64;
        let want = n * n * (1.0 / n0 as f64 + 1.0 / n1 as f64);
        let got = arm_sums(n0, n1).riesz_criterion(0.0).unwrap();
        assert!(close(got, want, 1e-12), "{got} vs {want}");
        let both = split_criterion(&arm_sums(n0, n1), &arm_sums(n1, n0), 0.0).unwrap();
        assert!(close(both, 2.0 * want, 1e-12));
    }
    assert!(arm_sums(4, 0).riesz_criterion(0.0).is_none());
    assert!(split_criterion(&arm_sums(4, 0), &arm_sums(2, 2), 0.0).is_none());
}

#[test]
fn single_arm_child_is_discarded() {
    // x separates the arms perfectly, so the only split leaves each child one arm.
    let n = 20;
    let t: Vec<f64> = (0..n).map(|i| if i < 10 { 0.0 } else { 1.0 }).collect();
    let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
    let data = Dataset::from_parts(vec![0.0; n], t, x, TreatmentKind::Binary).unwrap();
    let s = prepared(&data);
    let cfg = RieszForestConfig {
        l2: 0.0,
        min_samples_leaf: 10,
        min_impurity_decrease: 0.0,
        ..RieszForestConfig::default()
    };
    let rows: Vec<usize> = (0..n).collect();
    let ctx = SplitContext::new(Objective::Riesz, &cfg, &NodeSums::from_indices(&s, &rows));
    assert!(best_split(&s, &rows, &rows, &[0], &ctx).is_none());
}

#[test]
fn identical_children_have_no_gain() {
    // Two copies of the same four rows on either side of x = 0.5.
    let t = vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let x = array![[0.0], [0.0], [0.0], [0.0], [1.0], [1.0], [1.0], [1.0]];
    let data = Dataset::from_parts(vec![1.0; 8], t, x, TreatmentKind::Binary).unwrap();
    let s = prepared(&data);
    let rows: Vec<usize> = (0..8).collect();
    let parent = NodeSums::from_indices(&s, &rows);
    let left = NodeSums::from_indices(&s, &rows[..4]);
    let right = NodeSums::from_indices(&s, &rows[4..]);
    let cfg = RieszForestConfig {
        min_samples_leaf: 2,
        ..RieszForestConfig::default()
    };
    let ctx = SplitContext::new(Objective::Riesz, &cfg, &parent);
    assert!(ctx.gain(&parent, &left, &right).unwrap().abs() < 1e-12);
    assert!(
        (split_criterion(&left, &right, cfg.l2).unwrap() - parent.riesz_criterion(cfg.l2).unwrap()).abs() < 1e-9
    );
    assert!(best_split(&s, &rows, &rows, &[0], &ctx).is_none());
}

/// Minimized empirical Riesz loss (summed) of a child, by explicit 2×2 inversion.
fn brute_child_loss(s: &SampleData, rows: &[usize]) -> Option<f64> {
    let n = rows.len() as f64;
    let (mut j, mut m) = ([0.0; 4], [0.0; 2]);
    for &i in rows {
        let p = s.phi(i);
        j[0] += p[0] * p[0] / n;
        j[1] += p[0] * p[1] / n;
        j[2] += p[1] * p[0] / n;
        j[3] += p[1] * p[1] / n;
        m[0] += s.moment(i)[0] / n;
        m[1] += s.moment(i)[1] / n;
    }
    let det = j[0] * j[3] - j[1] * j[2];
    if det.abs() < 1e-12 {
        return None;
    }
    let b = [(j[3] * m[0] - j[1] * m[1]) / det, (j[0] * m[1] - j[2] * m[0]) / det];
    Some(
        rows.iter()
            .map(|&i| {
                let a = s.phi(i)[0] * b[0] + s.phi(i)[1] * b[1];
                a * a - 2.0 * (s.moment(i)[0] * b[0] + s.moment(i)[1] * b[1])
            })
            .sum(),
    )
}

#[test]
fn criterion_matches_brute_force_riesz_loss() {
    for seed in 0..10 {
        let n = 60 + 4 * seed as usize;
        let data = binary_data(n, 2, 100 + seed, |x| if x[0] > 0.2 { 0.75 } else { 0.35 });
        let s = prepared(&data);
        let rows: Vec<usize> = (0..n).collect();
        let msl = 5;
        let mut brute_best: Option<(f64, usize, f64)> = None;
        for f in 0..2 {
            let mut vals: Vec<f64> = rows.iter().map(|&i| s.x()[[i, f]]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let thr = w[0] + (w[1] - w[0]) / 2.0;
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| s.x()[[i, f]] <= thr);
                if l.len() < msl || r.len() < msl {
                    continue;
                }
                let (Some(ll), Some(lr)) = (brute_child_loss(&s, &l), brute_child_loss(&s, &r)) else {
                    continue;
                };
                let crit = split_criterion(&NodeSums::from_indices(&s, &l), &NodeSums::from_indices(&s, &r), 0.0).unwrap();
                assert!(close(-crit, ll + lr, 1e-9), "criterion {crit} vs loss {}", ll + lr);
                if brute_best.is_none_or(|b| ll + lr < b.0 - 1e-12) {
                    brute_best = Some((ll + lr, f, thr));
                }
            }
        }
        let cfg = RieszForestConfig {
            l2: 0.0,
            min_samples_leaf: msl,
            min_impurity_decrease: -1.0,
            ..RieszForestConfig::default()
        };
        let ctx = SplitContext::new(Objective::Riesz, &cfg, &NodeSums::from_indices(&s, &rows));
        let found = best_split(&s, &rows, &rows, &[0, 1], &ctx).unwrap();
        let (_, f, thr) = brute_best.unwrap();
        assert_eq!((found.feature, found.threshold), (f, thr), "seed {seed}");
    }
}

#[test]
fn noise_with_huge_threshold_is_root_only() {
    let data = binary_data(200, 3, 3, |_| 0.5);
    let cfg = RieszForestConfig {
        n_trees: 1,
        min_impurity_decrease: 1e6,
        honest: false,
        max_samples: 1.0,
        ..small_config(3)
    };
    let forest = fit_forest(&data, &MomentFunctional::ate(), &cfg).unwrap();
    assert_eq!(forest.trees[0].n_leaves(), 1);
    let s = prepared(&data);
    let global = leaf_solve(&NodeSums::from_indices(&s, &(0..200).collect::<Vec<_>>()), cfg.l2).unwrap();
    for i in [0, 17, 99] {
        assert_eq!(forest.predict_beta(data.x_row(i)).unwrap(), global);
    }
    // Root-only trees give the same β everywhere.
    let b0 = forest.predict_beta(&[0.9, -0.9, 0.0]).unwrap();
    assert_eq!(b0, forest.predict_beta(&[-0.3, 0.2, 0.7]).unwrap());
}

#[test]
fn ips_recovery_on_root_only_tree() {
    let data = binary_data(150, 2, 4, |x| 0.3 + 0.4 * (x[0] > 0.0) as u8 as f64);
    let cfg = RieszForestConfig {
        n_trees: 1,
        min_impurity_decrease: f64::MAX,
        honest: false,
        max_samples: 1.0,
        l2: 0.0,
        ..small_config(4)
    };
    let forest = fit_forest(&data, &MomentFunctional::ate(), &cfg).unwrap();
    let alpha = forest.alpha_oracle().eval_batch(data.t(), data.x().view());
    let ips = (0..data.n()).map(|i| alpha[i] * data.y()[i]).sum::<f64>() / data.n() as f64;
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..data.n() {
        if data.t()[i] == 1.0 {
            s1 += data.y()[i];
            n1 += 1.0;
        } else {
            s0 += data.y()[i];
            n0 += 1.0;
        }
    }
    assert!((ips - (s1 / n1 - s0 / n0)).abs() < 1e-10);
}

#[test]
fn separating_covariate_is_split_first() {
    for seed in 0..5 {
        let data = binary_data(400, 3, 10 + seed, |x| if x[0] < 0.0 { 0.2 } else { 0.8 });
        let s = prepared(&data);
        let cfg = RieszForestConfig {
            max_features: Some(3),
            min_samples_leaf: 20,
            ..RieszForestConfig::default()
        };
        let split: Vec<usize> = (0..200).collect();
        let est: Vec<usize> = (200..400).collect();
        let tree = Tree::grow(&s, split, est, &cfg, Objective::Riesz, RngSeed(seed)).unwrap();
        let (f, thr) = tree.splits()[0];
        assert_eq!(f, 0, "seed {seed}");
        assert!(thr.abs() < 0.15, "threshold {thr}");
    }
}

#[test]
fn forest_is_deterministic() {
    let data = binary_data(300, 4, 5, |x| 0.5 + 0.3 * x[0]);
    let m = MomentFunctional::ate();
    let a = fit_forest(&data, &m, &small_config(7)).unwrap();
    let b = fit_forest(&data, &m, &small_config(7)).unwrap();
    assert_eq!(a, b);
    let c = fit_forest(&data, &m, &small_config(8)).unwrap();
    assert_ne!(a.trees, c.trees);
}

#[test]
fn single_tree_predicts_its_leaf_solution() {
    let data = binary_data(300, 3, 6, |x| 0.5 + 0.3 * x[1]);
    let cfg = RieszForestConfig {
        n_trees: 1,
        ..small_config(6)
    };
    let forest = fit_forest(&data, &MomentFunctional::ate(), &cfg).unwrap();
    assert!(forest.trees[0].n_leaves() > 1);
    for i in 0..20 {
        let x = data.x_row(i);
        let leaf = forest.trees[0].leaf_for(x);
        let want = crate::linalg::solve_ridge(&leaf.jacobian, &leaf.moment, cfg.l2).unwrap();
        assert_eq!(forest.predict_beta(x).unwrap(), want);
    }
}

#[test]
fn multitask_constant_outcome_is_exact() {
    let data = binary_data(300, 3, 7, |x| 0.5 + 0.3 * x[0]);
    let data = data.with_outcome(vec![2.75; 300]).unwrap();
    let cfg = RieszForestConfig {
        multitask: true,
        ..small_config(7)
    };
    let forest = fit_forest(&data, &MomentFunctional::ate(), &cfg).unwrap();
    let g = forest.g_oracle().unwrap();
    for i in 0..30 {
        for t in [0.0, 1.0] {
            assert!((g.eval(t, data.x_row(i)) - 2.75).abs() < 1e-12);
        }
    }
    let plain = fit_forest(&data, &MomentFunctional::ate(), &small_config(7)).unwrap();
    assert!(plain.g_oracle().is_err());
    assert!(plain.predict_g(1.0, data.x_row(0)).is_err());
}

#[test]
fn more_trees_reduce_variance() {
    let data = binary_data(400, 3, 8, |x| 0.5 + 0.3 * x[0]);
    let m = MomentFunctional::ate();
    let points: Vec<Vec<f64>> = (0..10).map(|i| data.x_row(i).to_vec()).collect();
    let spread = |n_trees: usize| -> f64 {
        let preds: Vec<Vec<f64>> = (0..20)
            .map(|s| {
                let cfg = RieszForestConfig {
                    n_trees,
                    ..small_config(1000 + s)
                };
                let f = fit_forest(&data, &m, &cfg).unwrap();
                points.iter().map(|x| f.predict_alpha(1.0, x).unwrap()).collect()
            })
            .collect();
        (0..points.len())
            .map(|p| {
                let v: Vec<f64> = preds.iter().map(|r| r[p]).collect();
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
            })
            .sum()
    };
    let (v5, v10) = (spread(5), spread(10));
    assert!(v10 < v5, "{v10} vs {v5}");
}

#[test]
fn indicator_contrast_is_coefficient_difference() {
    let data = binary_data(300, 3, 9, |x| 0.5 + 0.3 * x[2]);
    let forest = fit_forest(&data, &MomentFunctional::ate(), &small_config(9)).unwrap();
    for i in 0..10 {
        let x = data.x_row(i);
        let b = forest.predict_beta(x).unwrap();
        let diff = forest.predict_alpha(1.0, x).unwrap() - forest.predict_alpha(0.0, x).unwrap();
        assert!((diff - (b[1] - b[0])).abs() < 1e-12);
    }
}

#[test]
fn polynomial_derivative_matches_finite_differences() {
    let data = continuous_data(300, 10);
    let cfg = RieszForestConfig {
        feature_map: Some(FeatureMap::Polynomial { degree: 3 }),
        multitask: true,
        ..small_config(10)
    };
    let forest = fit_forest(&data, &MomentFunctional::avg_derivative(), &cfg).unwrap();
    for head in [ForestHead::Riesz, ForestHead::Regression] {
        let o = forest.oracle(head);
        for i in 0..20 {
            let (t, x) = (data.t()[i], data.x_row(i));
            let exact = o.dt(t, x).unwrap();
            let h = 1e-5;
            let fd = (o.eval(t + h, x) - o.eval(t - h, x)) / (2.0 * h);
            assert!((exact - fd).abs() / (1.0 + exact.abs()) < 1e-6, "{exact} vs {fd}");
        }
    }
    assert_eq!(FeatureMap::Polynomial { degree: 3 }.derivative(2.0), vec![0.0, 1.0, 4.0, 12.0]);
}

#[test]
fn honest_structure_ignores_estimation_outcomes() {
    let data = binary_data(400, 3, 11, |x| 0.5 + 0.3 * x[0]);
    let s = SampleData::prepare(&data, &MomentFunctional::ate(), FeatureMap::BinaryIndicators).unwrap();
    let cfg = RieszForestConfig {
        multitask: true,
        min_samples_leaf: 15,
        ..RieszForestConfig::default()
    };
    let obj = Objective::Multitask { regression_weight: 1.0 };
    let split: Vec<usize> = (0..200).collect();
    let est: Vec<usize> = (200..400).collect();
    let a = Tree::grow(&s, split.clone(), est.clone(), &cfg, obj, RngSeed(3)).unwrap();
    let mut y = s.y().to_vec();
    y[200..].reverse();
    let permuted = s.with_outcome(y).unwrap();
    let b = Tree::grow(&permuted, split, est, &cfg, obj, RngSeed(3)).unwrap();
    assert_eq!(a.nodes, b.nodes);
    assert!(a.splits().len() > 0);
    assert_ne!(a.leaves, b.leaves);
}

#[test]
fn splits_only_use_covariates() {
    let data = binary_data(500, 4, 12, |x| 0.5 + 0.4 * x[3]);
    let forest = fit_forest(&data, &MomentFunctional::ate(), &small_config(12)).unwrap();
    for t in &forest.trees {
        assert!(t.splits().iter().all(|&(f, _)| f < 4));
        for leaf in &t.leaves {
            assert!(leaf.n_est >= 10 && leaf.n_split >= 10);
            assert_eq!(leaf.jacobian[1], leaf.jacobian[2]);
        }
    }
}

#[test]
fn regression_forest_tracks_step() {
    let mut rng = RngSeed(13).rng();
    let x = Array2::from_shape_simple_fn((600, 2), || rng.random_range(-1.0..1.0));
    let y: Vec<f64> = (0..600).map(|i| if x[[i, 0]] > 0.0 { 2.0 } else { 0.0 }).collect();
    let f = fit_regression_forest(x.view(), &y, &small_config(13)).unwrap();
    assert!((f.predict(&[0.7, 0.0]).unwrap() - 2.0).abs() < 0.2);
    assert!(f.predict(&[-0.7, 0.0]).unwrap().abs() < 0.2);
    let batch = f.predict_batch(x.view()).unwrap();
    assert_eq!(batch[5], f.predict(&x.row(5).to_vec()).unwrap());
}

#[test]
fn serialization_round_trip() {
    let data = binary_data(200, 2, 14, |_| 0.5);
    let forest = fit_forest(&data, &MomentFunctional::ate(), &small_config(14)).unwrap();
    let back = RieszForest::from_json(&forest.to_json()).unwrap();
    assert_eq!(forest, back);
    let mut bad = forest.clone();
    bad.version = 99;
    assert!(matches!(RieszForest::from_json(&bad.to_json()), Err(Error::Format(_))));
    let mut bad = forest.clone();
    bad.trees[0].nodes[0] = Node::Leaf { leaf: 999 };
    assert!(RieszForest::from_json(&bad.to_json()).is_err());
}

#[test]
fn config_and_size_errors() {
    assert!(RieszForestConfig::default().validate().is_ok());
    for bad in [
        RieszForestConfig {
            n_trees: 0,
            ..RieszForestConfig::default()
        },
        RieszForestConfig {
            max_samples: 0.0,
            ..RieszForestConfig::default()
        },
        RieszForestConfig {
            l2: -1.0,
            ..RieszForestConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
    let data = binary_data(50, 2, 15, |_| 0.5);
    assert!(matches!(
        fit_forest(&data, &MomentFunctional::ate(), &RieszForestConfig::default()),
        Err(Error::Validation(_))
    ));
    let cont = continuous_data(50, 1);
    assert!(fit_forest(&cont, &MomentFunctional::ate(), &small_config(1)).is_err());
}

#[test]
fn local_regression_forest_recovers_arm_contrast() {
    // y = t + x1 + noise: the local model in (1 − t, t) should find a contrast near 1.
    let data = binary_data(3000, 2, 41, |_| 0.5);
    let f = fit_local_regression_forest(&data, &MomentFunctional::ate(), &small_config(3)).unwrap();
    assert!(f.has_regression());
    let g = f.g_oracle().unwrap();
    let mut total = 0.0;
    for x1 in [-0.5, 0.0, 0.5] {
        let x = [x1, 0.0];
        total += g.eval(1.0, &x) - g.eval(0.0, &x);
        assert!((g.eval(0.0, &x) - x1).abs() < 0.35, "g(0, {x1}) = {}", g.eval(0.0, &x));
    }
    assert!((total / 3.0 - 1.0).abs() < 0.2, "contrast {}", total / 3.0);
}
