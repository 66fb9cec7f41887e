use nalgebra::DMatrix;

use super::{AnalysisError, MAX_DENSE_DIM};

/// Finite-difference Hessian of `f` at `theta` with step `h`.
///
/// Diagonal entries use the three-point second difference; off-diagonal
/// entries the four-point mixed difference. The result is symmetrized as
/// (H + Hᵀ)/2.
pub fn empirical_hessian<F>(f: F, theta: &[f64], h: f64) -> Result<DMatrix<f64>, AnalysisError>
where
    F: Fn(&[f64]) -> f64,
{
    let d = theta.len();
    if d > MAX_DENSE_DIM {
        return Err(AnalysisError::TooLarge { d, max: MAX_DENSE_DIM });
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(AnalysisError::Grid(format!("step must be positive and finite, got {h}")));
    }
    let mut point = theta.to_vec();
    let mut eval = |offsets: &[(usize, f64)]| -> Result<f64, AnalysisError> {
        for &(i, o) in offsets {
            point[i] = theta[i] + o;
        }
        let v = f(&point);
        let probe = point.clone();
        for &(i, _) in offsets {
            point[i] = theta[i];
        }
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AnalysisError::NonFinite(probe))
        }
    };

    let f0 = eval(&[])?;
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        let plus = eval(&[(i, h)])?;
        let minus = eval(&[(i, -h)])?;
        hess[(i, i)] = (plus - 2.0 * f0 + minus) / (h * h);
        for j in 0..i {
            let pp = eval(&[(i, h), (j, h)])?;
            let pm = eval(&[(i, h), (j, -h)])?;
            let mp = eval(&[(i, -h), (j, h)])?;
            let mm = eval(&[(i, -h), (j, -h)])?;
            hess[(i, j)] = (pp - pm - mp + mm) / (4.0 * h * h);
            hess[(j, i)] = (pp - mp - pm + mm) / (4.0 * h * h);
        }
    }
    let symmetric = 0.5 * (&hess + hess.transpose());
    Ok(symmetric)
}
