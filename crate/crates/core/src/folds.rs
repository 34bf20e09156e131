//! Fold bookkeeping for the cross-fitting schemes.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngSeed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldScheme {
    /// Fit and evaluate on the full sample.
    None,
    /// K-fold: nuisances for fold k are fit on the other K-1 folds.
    Simple,
    /// Three folds with rotating (regression, Riesz, evaluation) roles.
    Double,
}

impl std::str::FromStr for FoldScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FoldScheme::None),
            "simple" | "simple_k_fold" => Ok(FoldScheme::Simple),
            "double" | "double_crossfit" => Ok(FoldScheme::Double),
            other => Err(Error::Argument(format!("unknown cross-fitting scheme '{other}'"))),
        }
    }
}

impl std::fmt::Display for FoldScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FoldScheme::None => "none",
            FoldScheme::Simple => "simple",
            FoldScheme::Double => "double",
        })
    }
}

/// Which fold trains the regression, which trains the Riesz representer, and
/// which one is evaluated, for one step of the double cross-fitting rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTriple {
    pub regression: usize,
    pub riesz: usize,
    pub evaluation: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub scheme: FoldScheme,
    pub k: usize,
    /// Fold index of every row.
    pub folds: Vec<usize>,
    /// Empty unless `scheme` is `Double`.
    pub roles: Vec<RoleTriple>,
}

impl FoldAssignment {
    pub fn n(&self) -> usize {
        self.folds.len()
    }

    /// Row indices in fold `k`, ascending.
    pub fn members(&self, k: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| (f == k).then_some(i))
            .collect()
    }

    /// Row indices outside fold `k`, ascending.
    pub fn complement(&self, k: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| (f != k).then_some(i))
            .collect()
    }
}

/// Number of folds used by the double scheme.
pub const DOUBLE_CROSSFIT_FOLDS: usize = 3;

/// Default number of folds for simple cross-fitting.
pub const DEFAULT_K: usize = 5;

/// Random balanced partition of `0..n`.
///
/// `k` is ignored for `None` (one fold) and `Double` (always three folds).
pub fn make_folds(n: usize, scheme: FoldScheme, k: usize, seed: RngSeed) -> Result<FoldAssignment> {
    if n == 0 {
        return Err(Error::Argument("cannot partition an empty sample".into()));
    }
    let k = match scheme {
        FoldScheme::None => {
            return Ok(FoldAssignment {
                scheme,
                k: 1,
                folds: vec![0; n],
                roles: Vec::new(),
            })
        }
        FoldScheme::Simple => {
            if k < 2 {
                return Err(Error::Argument(format!("simple cross-fitting needs k >= 2, got {k}")));
            }
            k
        }
        FoldScheme::Double => DOUBLE_CROSSFIT_FOLDS,
    };
    if k > n {
        return Err(Error::Argument(format!("k={k} folds exceed n={n} rows")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed.rng());
    let mut folds = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        folds[i] = pos % k;
    }
    let roles = if scheme == FoldScheme::Double {
        (0..k)
            .map(|e| RoleTriple {
                regression: (e + 1) % k,
                riesz: (e + 2) % k,
                evaluation: e,
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(FoldAssignment { scheme, k, folds, roles })
}

/// Random disjoint split `(train, test)` with `|test| = round(n * test_fraction)`.
/// Both index lists are returned in ascending order.
pub fn train_test_split(n: usize, test_fraction: f64, seed: RngSeed) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!("test fraction {test_fraction} is not in (0, 1)")));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::Argument(format!(
            "test fraction {test_fraction} leaves an empty side for n={n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed.rng());
    let mut test = perm[..n_test].to_vec();
    let mut train = perm[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}
