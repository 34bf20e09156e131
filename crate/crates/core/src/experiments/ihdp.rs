use std::path::{Path, PathBuf};

use ndarray::Axis;

use crate::dataset::{load_matrix_csv, Dataset, TreatmentKind};
use crate::error::{Error, Result};

/// Columns that are never covariates in an IHDP replication file.
const RESERVED: [&str; 7] = ["t", "treatment", "y", "y_factual", "y_cfactual", "mu0", "mu1"];

/// One IHDP replication with its sample ATE `mean(μ₁ − μ₀)`.
#[derive(Debug, Clone)]
pub struct IhdpReplication {
    pub path: PathBuf,
    pub data: Dataset,
    pub theta_true: f64,
}

/// Reads a replication CSV with a treatment column (`t` or `treatment`), an
/// outcome (`y` or `y_factual`), the noiseless potential outcomes `mu0` and
/// `mu1`, and any number of covariate columns.
pub fn load_ihdp_replication(path: impl AsRef<Path>) -> Result<IhdpReplication> {
    let path = path.as_ref();
    let (names, m) = load_matrix_csv(path, &[])?;
    let col = |options: &[&str]| -> Result<usize> {
        names
            .iter()
            .position(|n| options.contains(&n.as_str()))
            .ok_or_else(|| Error::Schema(format!("{}: missing column {}", path.display(), options.join(" or "))))
    };
    let (it, iy, i0, i1) = (col(&["t", "treatment"])?, col(&["y", "y_factual"])?, col(&["mu0"])?, col(&["mu1"])?);
    let covariates: Vec<usize> = (0..names.len()).filter(|&j| !RESERVED.contains(&names[j].as_str())).collect();
    if covariates.is_empty() {
        return Err(Error::Schema(format!("{}: no covariate columns", path.display())));
    }
    let n = m.nrows();
    let theta_true = (0..n).map(|i| m[[i, i1]] - m[[i, i0]]).sum::<f64>() / n as f64;
    let mut column_names = vec![names[iy].clone(), names[it].clone()];
    column_names.extend(covariates.iter().map(|&j| names[j].clone()));
    let data = Dataset::new(
        m.column(iy).to_vec(),
        m.column(it).to_vec(),
        m.select(Axis(1), &covariates),
        TreatmentKind::Binary,
        column_names,
    )?;
    Ok(IhdpReplication {
        path: path.to_path_buf(),
        data,
        theta_true,
    })
}

/// All `*.csv` files of `dir` in lexicographic order.
pub fn list_replications(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}
