use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{AnalysisError, MAX_DENSE_DIM};
use crate::merge::WeightVector;

/// Absolute symmetry tolerance for a supplied Hessian.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;
/// Relative band inside which the merge-benefit margin counts as a tie.
pub const TIE_BAND: f64 = 1e-12;

/// `L(theta) = L* + 1/2 (theta - theta*)^T H (theta - theta*)` with `H`
/// symmetric positive definite.
#[derive(Debug, Clone)]
pub struct QuadraticOracle {
    theta_star: Vec<f64>,
    hessian: DMatrix<f64>,
    loss_at_opt: f64,
}

impl QuadraticOracle {
    pub fn new(theta_star: Vec<f64>, hessian: DMatrix<f64>, loss_at_opt: f64) -> Result<Self, AnalysisError> {
        let d = theta_star.len();
        if d > MAX_DENSE_DIM {
            return Err(AnalysisError::TooLarge { d, max: MAX_DENSE_DIM });
        }
        if hessian.nrows() != d || hessian.ncols() != d {
            return Err(AnalysisError::Dimension { expected: d, got: hessian.nrows().max(hessian.ncols()) });
        }
        for i in 0..d {
            for j in (i + 1)..d {
                if (hessian[(i, j)] - hessian[(j, i)]).abs() > SYMMETRY_TOLERANCE {
                    return Err(AnalysisError::NotSymmetric { row: i, col: j });
                }
            }
        }
        let min_eig = SymmetricEigen::new(hessian.clone()).eigenvalues.min();
        if min_eig.is_nan() || min_eig <= 0.0 {
            return Err(AnalysisError::NotPositiveDefinite(min_eig));
        }
        Ok(Self { theta_star, hessian, loss_at_opt })
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn theta_star(&self) -> &[f64] {
        &self.theta_star
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn loss_at_opt(&self) -> f64 {
        self.loss_at_opt
    }

    fn deviation(&self, theta: &[f64]) -> Result<Vec<f64>, AnalysisError> {
        if theta.len() != self.dim() {
            return Err(AnalysisError::Dimension { expected: self.dim(), got: theta.len() });
        }
        Ok(theta.iter().zip(&self.theta_star).map(|(t, s)| t - s).collect())
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|r| (0..d).map(|c| self.hessian[(r, c)] * v[c]).sum())
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact loss of the quadratic model at `theta`.
pub fn quadratic_loss(oracle: &QuadraticOracle, theta: &[f64]) -> Result<f64, AnalysisError> {
    let delta = oracle.deviation(theta)?;
    Ok(oracle.loss_at_opt + 0.5 * dot(&delta, &oracle.apply(&delta)))
}

/// Second-order account of averaging `k` parameter vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub k: usize,
    pub weights: Vec<f64>,
    /// `Q[i][j] = delta_i^T H delta_j`.
    pub q_matrix: Vec<Vec<f64>>,
    pub diag_sum: f64,
    /// Sum of the off-diagonal entries of `Q`.
    pub cross_sum: f64,
    /// Positive when merging beats the members' mean loss.
    pub margin: f64,
    pub condition_holds: bool,
    pub avg_individual_loss: f64,
    pub merged_loss_predicted: f64,
    pub merged_loss_exact: Option<f64>,
}

impl TaylorReport {
    /// `cross_sum / diag_sum`; below `k - 1` when merging helps under uniform weights.
    pub fn cross_ratio(&self) -> f64 {
        self.cross_sum / self.diag_sum
    }
}

/// Builds the deviation Gram matrix and the merged-vs-average comparison.
///
/// With `weights == None` the average is uniform and the verdict is
/// `cross_sum < (k-1) diag_sum`. With explicit weights `w` the losses use
/// `sum_i w_i Q_ii` and `sum_ij w_i w_j Q_ij`, and the verdict compares
/// those two quantities directly.
pub fn taylor_report(
    oracle: &QuadraticOracle,
    thetas: &[Vec<f64>],
    weights: Option<&WeightVector>,
) -> Result<TaylorReport, AnalysisError> {
    let k = thetas.len();
    if k < 2 {
        return Err(AnalysisError::TooFewModels(k));
    }
    if let Some(w) = weights {
        if w.len() != k {
            return Err(AnalysisError::Dimension { expected: k, got: w.len() });
        }
    }
    let deltas = thetas
        .iter()
        .map(|t| oracle.deviation(t))
        .collect::<Result<Vec<_>, _>>()?;
    let h_deltas: Vec<Vec<f64>> = deltas.iter().map(|d| oracle.apply(d)).collect();

    let mut q = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let v = dot(&deltas[i], &h_deltas[j]);
            q[i][j] = v;
            q[j][i] = v;
        }
    }
    let diag_sum: f64 = (0..k).map(|i| q[i][i]).sum();
    let cross_sum: f64 = (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| q[i][j])
        .sum();
    let l_star = oracle.loss_at_opt;

    let (w, avg, predicted, margin, scale) = match weights {
        None => {
            let kf = k as f64;
            let avg = l_star + diag_sum / (2.0 * kf);
            let predicted = l_star + (diag_sum + cross_sum) / (2.0 * kf * kf);
            let margin = (kf - 1.0) * diag_sum - cross_sum;
            let scale = (kf - 1.0) * diag_sum.abs() + cross_sum.abs();
            (vec![1.0 / kf; k], avg, predicted, margin, scale)
        }
        Some(wv) => {
            let w = wv.as_slice();
            let weighted_diag: f64 = (0..k).map(|i| w[i] * q[i][i]).sum();
            let mut full = 0.0;
            let mut weighted_cross = 0.0;
            for i in 0..k {
                for j in 0..k {
                    full += w[i] * w[j] * q[i][j];
                    if i != j {
                        weighted_cross += w[i] * w[j] * q[i][j];
                    }
                }
            }
            let own: f64 = (0..k).map(|i| w[i] * (1.0 - w[i]) * q[i][i]).sum();
            let margin = own - weighted_cross;
            (
                w.to_vec(),
                l_star + 0.5 * weighted_diag,
                l_star + 0.5 * full,
                margin,
                own.abs() + weighted_cross.abs(),
            )
        }
    };

    let d = oracle.dim();
    let merged: Vec<f64> = (0..d).map(|c| thetas.iter().zip(&w).map(|(t, wi)| wi * t[c]).sum()).collect();
    let exact = quadratic_loss(oracle, &merged)?;

    Ok(TaylorReport {
        k,
        weights: w,
        q_matrix: q,
        diag_sum,
        cross_sum,
        margin,
        condition_holds: margin > TIE_BAND * scale,
        avg_individual_loss: avg,
        merged_loss_predicted: predicted,
        merged_loss_exact: Some(exact),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let h = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
        // exact symmetry after the product
        DMatrix::from_fn(d, d, |i, j| if i <= j { h[(i, j)] } else { h[(j, i)] })
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn loss_at_optimum() {
        let o = QuadraticOracle::new(vec![1.0, -2.0], DMatrix::identity(2, 2) * 3.0, 0.7).unwrap();
        assert_eq!(quadratic_loss(&o, &[1.0, -2.0]).unwrap(), 0.7);
    }

    #[test]
    fn unit_deviation_under_2i() {
        let o = QuadraticOracle::new(vec![0.0; 3], DMatrix::identity(3, 3) * 2.0, 0.0).unwrap();
        assert_eq!(quadratic_loss(&o, &[0.0, 1.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_pd(&mut rng, 5);
        let star = random_vec(&mut rng, 5);
        let theta = random_vec(&mut rng, 5);
        let o = QuadraticOracle::new(star.clone(), h.clone(), 0.25).unwrap();
        let delta = nalgebra::DVector::from_iterator(5, theta.iter().zip(&star).map(|(a, b)| a - b));
        let expected = 0.25 + 0.5 * (delta.transpose() * &h * &delta)[(0, 0)];
        let got = quadratic_loss(&o, &theta).unwrap();
        assert!((got - expected).abs() <= 1e-14 * expected.abs(), "{got} vs {expected}");
    }

    #[test]
    fn construction_checks() {
        let mut h = DMatrix::identity(2, 2);
        h[(0, 1)] = 0.5;
        assert!(matches!(
            QuadraticOracle::new(vec![0.0; 2], h, 0.0),
            Err(AnalysisError::NotSymmetric { .. })
        ));
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            QuadraticOracle::new(vec![0.0; 2], h, 0.0),
            Err(AnalysisError::NotPositiveDefinite(_))
        ));
        assert!(matches!(
            QuadraticOracle::new(vec![0.0; 3], DMatrix::identity(2, 2), 0.0),
            Err(AnalysisError::Dimension { .. })
        ));
        let o = QuadraticOracle::new(vec![0.0; 2], DMatrix::identity(2, 2), 0.0).unwrap();
        assert!(quadratic_loss(&o, &[0.0]).is_err());
    }

    #[test]
    fn symmetric_pair_merges_to_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_pd(&mut rng, 6);
        let star = random_vec(&mut rng, 6);
        let d1: Vec<f64> = vec![0.5, -0.25, 1.0, 0.0, 2.0, -1.0];
        let o = QuadraticOracle::new(star.clone(), h, 1.5).unwrap();
        let t1: Vec<f64> = star.iter().zip(&d1).map(|(s, d)| s + d).collect();
        let t2: Vec<f64> = star.iter().zip(&d1).map(|(s, d)| s - d).collect();
        let r = taylor_report(&o, &[t1, t2], None).unwrap();
        assert!((r.merged_loss_exact.unwrap() - 1.5).abs() < 1e-12);
        assert!(r.condition_holds);
        assert!((r.cross_sum + r.diag_sum).abs() < 1e-9 * r.diag_sum);
    }

    #[test]
    fn identical_deviations_are_a_tie() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_pd(&mut rng, 4);
        let o = QuadraticOracle::new(vec![0.0; 4], h, 0.0).unwrap();
        let t = random_vec(&mut rng, 4);
        let r = taylor_report(&o, &[t.clone(), t], None).unwrap();
        assert!(!r.condition_holds);
        assert_eq!(r.merged_loss_predicted, r.avg_individual_loss);
        assert_eq!(r.margin, 0.0);
    }

    #[test]
    fn needs_two_models() {
        let o = QuadraticOracle::new(vec![0.0], DMatrix::identity(1, 1), 0.0).unwrap();
        assert!(matches!(taylor_report(&o, &[vec![1.0]], None), Err(AnalysisError::TooFewModels(1))));
    }

    #[test]
    fn explicit_uniform_weights_agree_with_default() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_pd(&mut rng, 5);
        let o = QuadraticOracle::new(random_vec(&mut rng, 5), h, 0.1).unwrap();
        let thetas: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 5)).collect();
        let a = taylor_report(&o, &thetas, None).unwrap();
        let b = taylor_report(&o, &thetas, Some(&WeightVector::uniform(4).unwrap())).unwrap();
        assert_eq!(a.condition_holds, b.condition_holds);
        assert!((a.merged_loss_predicted - b.merged_loss_predicted).abs() < 1e-12);
        assert!((a.avg_individual_loss - b.avg_individual_loss).abs() < 1e-12);
    }

    #[test]
    fn weighted_prediction_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_pd(&mut rng, 6);
        let o = QuadraticOracle::new(random_vec(&mut rng, 6), h, -0.3).unwrap();
        let thetas: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 6)).collect();
        let w = WeightVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        let r = taylor_report(&o, &thetas, Some(&w)).unwrap();
        let exact = r.merged_loss_exact.unwrap();
        assert!((r.merged_loss_predicted - exact).abs() <= 1e-12 * exact.abs().max(1.0));
        let direct_avg: f64 = thetas
            .iter()
            .zip(w.as_slice())
            .map(|(t, wi)| wi * quadratic_loss(&o, t).unwrap())
            .sum();
        assert!((r.avg_individual_loss - direct_avg).abs() < 1e-12);
        assert_eq!(r.condition_holds, exact < direct_avg);
    }
}
