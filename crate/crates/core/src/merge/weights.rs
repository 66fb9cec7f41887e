use std::fmt;

use serde::{Deserialize, Serialize};

use super::MergeError;

/// Absolute tolerance on the sum of a [`WeightVector`].
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

/// How checkpoint weights are assigned. Index 1 is the oldest checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MergeStrategy {
    /// Uniform weights.
    Sma,
    /// Unrolled exponential moving average seeded with the oldest checkpoint.
    Ema { alpha: f64 },
    /// Weights proportional to position, `w_i = i`.
    Wma,
    /// Arbitrary positive weights, normalized by their sum.
    Custom { weights: Vec<f64> },
}

impl MergeStrategy {
    pub fn validate(&self) -> Result<(), MergeError> {
        match self {
            MergeStrategy::Ema { alpha } if !(*alpha > 0.0 && *alpha <= 1.0) => {
                Err(MergeError::Alpha(*alpha))
            }
            MergeStrategy::Custom { weights } => {
                if weights.is_empty() {
                    return Err(MergeError::Strategy("custom strategy needs at least one weight".into()));
                }
                if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
                    return Err(MergeError::Strategy(format!("custom weights must be positive, got {w}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MergeStrategy::Sma => write!(f, "sma"),
            MergeStrategy::Ema { alpha } => write!(f, "ema(alpha={alpha})"),
            MergeStrategy::Wma => write!(f, "wma"),
            MergeStrategy::Custom { weights } => write!(f, "custom({} weights)", weights.len()),
        }
    }
}

/// Non-negative merge coefficients summing to one, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self, MergeError> {
        if weights.is_empty() {
            return Err(MergeError::Weights("empty weight vector".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(MergeError::Weights(format!("weight {w} is negative or non-finite")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(MergeError::Weights(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize) -> Result<Self, MergeError> {
        compute_weights(&MergeStrategy::Sma, n)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = MergeError;
    fn try_from(v: Vec<f64>) -> Result<Self, MergeError> {
        Self::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Vec<f64> {
        w.0
    }
}

/// Closed-form merge coefficients for `n` checkpoints.
///
/// EMA unrolls `avg_i = alpha * M_i + (1 - alpha) * avg_{i-1}` with
/// `avg_1 = M_1`, giving `w_1 = (1-alpha)^(n-1)` and
/// `w_i = alpha (1-alpha)^(n-i)` for `i >= 2`.
pub fn compute_weights(strategy: &MergeStrategy, n: usize) -> Result<WeightVector, MergeError> {
    strategy.validate()?;
    if n == 0 {
        return Err(MergeError::Count("n must be at least 1".into()));
    }
    let weights = match strategy {
        MergeStrategy::Sma => vec![1.0 / n as f64; n],
        MergeStrategy::Wma => {
            let total = (n * (n + 1)) as f64 / 2.0;
            (1..=n).map(|i| i as f64 / total).collect()
        }
        MergeStrategy::Ema { alpha } => {
            let keep = 1.0 - alpha;
            (1..=n)
                .map(|i| {
                    if i == 1 {
                        keep.powi((n - 1) as i32)
                    } else {
                        alpha * keep.powi((n - i) as i32)
                    }
                })
                .collect()
        }
        MergeStrategy::Custom { weights } => {
            if weights.len() != n {
                return Err(MergeError::Count(format!(
                    "custom strategy has {} weights but {n} checkpoints were requested",
                    weights.len()
                )));
            }
            let sum: f64 = weights.iter().sum();
            weights.iter().map(|w| w / sum).collect()
        }
    };
    WeightVector::new(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sma_ten() {
        let w = compute_weights(&MergeStrategy::Sma, 10).unwrap();
        assert_eq!(w.as_slice(), &[0.1; 10]);
    }

    #[test]
    fn wma_three() {
        let w = compute_weights(&MergeStrategy::Wma, 3).unwrap();
        assert_eq!(w.as_slice(), &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]);
    }

    #[test]
    fn ema_two() {
        let w = compute_weights(&MergeStrategy::Ema { alpha: 0.2 }, 2).unwrap();
        assert_eq!(w.as_slice(), &[0.8, 0.2]);
    }

    #[test]
    fn ema_alpha_one_keeps_newest() {
        let w = compute_weights(&MergeStrategy::Ema { alpha: 1.0 }, 4).unwrap();
        assert_eq!(w.as_slice(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ema_ten_by_unrolled_recursion() {
        // Oracle: run the recursion on basis vectors and read off coefficients.
        let n = 10;
        let alpha = 0.1;
        let mut avg = vec![0.0; n];
        avg[0] = 1.0;
        for i in 1..n {
            for a in avg.iter_mut() {
                *a *= 1.0 - alpha;
            }
            avg[i] += alpha;
        }
        let w = compute_weights(&MergeStrategy::Ema { alpha }, n).unwrap();
        for (a, b) in avg.iter().zip(w.as_slice()) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!((w.as_slice()[9] - 0.1).abs() < 1e-15);
        assert!((w.as_slice()[8] - 0.09).abs() < 1e-15);
        assert!((w.as_slice()[0] - 0.387420489).abs() < 1e-12);
    }

    #[test]
    fn alpha_out_of_range() {
        for alpha in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                compute_weights(&MergeStrategy::Ema { alpha }, 3),
                Err(MergeError::Alpha(_))
            ));
        }
    }

    #[test]
    fn custom_length_mismatch_and_positivity() {
        let s = MergeStrategy::Custom { weights: vec![1.0, 2.0] };
        assert!(matches!(compute_weights(&s, 3), Err(MergeError::Count(_))));
        let s = MergeStrategy::Custom { weights: vec![1.0, 0.0] };
        assert!(compute_weights(&s, 2).is_err());
        let s = MergeStrategy::Custom { weights: vec![1.0, 3.0] };
        assert_eq!(compute_weights(&s, 2).unwrap().as_slice(), &[0.25, 0.75]);
    }

    #[test]
    fn zero_checkpoints() {
        assert!(compute_weights(&MergeStrategy::Sma, 0).is_err());
    }

    #[test]
    fn serde_shape() {
        let s: MergeStrategy = serde_json::from_str(r#"{"kind":"ema","alpha":0.2}"#).unwrap();
        assert_eq!(s, MergeStrategy::Ema { alpha: 0.2 });
        assert_eq!(serde_json::to_string(&MergeStrategy::Sma).unwrap(), r#"{"kind":"sma"}"#);
        let bad: Result<WeightVector, _> = serde_json::from_str("[0.5,0.6]");
        assert!(bad.is_err());
    }

    proptest! {
        #[test]
        fn always_sums_to_one(n in 1usize..=10_000, alpha in 0.001f64..=1.0, kind in 0u8..3) {
            let s = match kind {
                0 => MergeStrategy::Sma,
                1 => MergeStrategy::Wma,
                _ => MergeStrategy::Ema { alpha },
            };
            let w = compute_weights(&s, n).unwrap();
            let sum: f64 = w.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() <= WEIGHT_SUM_TOLERANCE);
            prop_assert_eq!(w.len(), n);
        }
    }
}
