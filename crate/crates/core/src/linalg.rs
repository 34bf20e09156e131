//! Small dense symmetric solves used by the forest's local moment systems.

use crate::error::{Error, Result};

/// Largest accepted condition estimate for a regularized local Jacobian.
pub const MAX_CONDITION: f64 = 1e12;

/// Solves `(A + l2·I) β = b` for symmetric positive semidefinite `A`
/// (row-major `d×d`) via Cholesky.
///
/// The ratio of the largest to the smallest squared Cholesky pivot is used as
/// the condition estimate; it is exact for diagonal systems.
pub fn solve_ridge(a: &[f64], b: &[f64], l2: f64) -> Result<Vec<f64>> {
    let d = b.len();
    if a.len() != d * d {
        return Err(Error::Shape(format!("matrix has {} entries, expected {}", a.len(), d * d)));
    }
    let mut l = vec![0.0; d * d];
    let mut max_pivot = 0.0f64;
    let mut min_pivot = f64::INFINITY;
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j] + if i == j { l2 } else { 0.0 };
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::Degenerate(format!("non-positive pivot {s:e} at row {i}")));
                }
                max_pivot = max_pivot.max(s);
                min_pivot = min_pivot.min(s);
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    if max_pivot / min_pivot > MAX_CONDITION {
        return Err(Error::Degenerate(format!(
            "condition estimate {:e} exceeds {MAX_CONDITION:e}",
            max_pivot / min_pivot
        )));
    }
    // Forward then backward substitution.
    let mut z = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * z[k];
        }
        z[i] = s / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = z[i];
        for k in i + 1..d {
            s -= l[k * d + i] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
    Ok(x)
}

/// `βᵀ A β` for row-major `A`.
pub fn quad_form(a: &[f64], beta: &[f64]) -> f64 {
    let d = beta.len();
    let mut acc = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for j in 0..d {
            row += a[i * d + j] * beta[j];
        }
        acc += beta[i] * row;
    }
    acc
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
